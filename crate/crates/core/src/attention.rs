//! Full-scale attention gate for one decoder level `l`.
//!
//! Inputs are every encoder map up to the level, `[E^1 .. E^l]`, and the
//! decoder output one level deeper, `G^(l+1)` with `2C` channels at `(H, W)`.
//! `E^l` sits at `(2H, 2W)` with `C` channels.
//!
//! * every `E^i` is brought to `(C, H, W)` by a [`MatchChain`], giving `S^i`;
//! * `G^(l+1)` is projected to `C` channels by a 1x1 convolution, giving `D`;
//! * channel gate: `W = sigmoid(MLP(GAP(SDC(S^1 + .. + S^(l-1) + D))))`,
//!   `E~ = W * E^l` per channel;
//! * spatial gate: `Q = up2(sigmoid(conv1x1(conv3x3(S^1 + .. + S^l + D))))`;
//! * output `E^ = Q * E~`.
//!
//! The channel sum leaves out `S^l` while the spatial sum keeps it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv, MatchChain, MlpHead, SdcBlock};
use crate::ops::{Conv2dSpec, UpsampleMode};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct ChannelBranch {
    pub sdc: SdcBlock,
    pub mlp: MlpHead,
}

#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub conv3: Conv,
    pub conv1: Conv,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub level: usize,
    pub channels: usize,
    /// `match_chains[i - 1]` maps `E^i`.
    pub match_chains: Vec<MatchChain>,
    pub reduce: Conv,
    /// Absent for spatial-only models.
    pub channel: Option<ChannelBranch>,
    pub spatial: SpatialBranch,
}

impl AttentionParams {
    /// `encoder_channels[i - 1]` is the channel count of `E^i`, `i <= level`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        level: usize,
        encoder_channels: &[usize],
        with_channel_branch: bool,
        reduction: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if level == 0 || encoder_channels.len() < level {
            return Err(Error::arg(format!("attention level {level} with {} encoder levels", encoder_channels.len())));
        }
        let c = encoder_channels[level - 1];
        let match_chains = (1..=level)
            .map(|i| MatchChain::new(params, &format!("{name}.match{i}"), i, level, encoder_channels[i - 1], c, rng))
            .collect::<Result<_>>()?;
        let reduce = Conv::new(params, &format!("{name}.reduce"), 2 * c, c, 1, Conv2dSpec::default(), rng)?;
        let channel = if with_channel_branch {
            Some(ChannelBranch {
                sdc: SdcBlock::new(params, &format!("{name}.sdc"), c, dilations, rng)?,
                mlp: MlpHead::new(params, &format!("{name}.mlp"), c, reduction, rng)?,
            })
        } else {
            None
        };
        let spatial = SpatialBranch {
            conv3: Conv::new(params, &format!("{name}.spatial3"), c, c, 3, Conv2dSpec::same(3, 1), rng)?,
            conv1: Conv::new(params, &format!("{name}.spatial1"), c, 1, 1, Conv2dSpec::default(), rng)?,
        };
        Ok(Self { level, channels: c, match_chains, reduce, channel, spatial })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Skip the channel gate (`W = 1`).
    pub spatial_only: bool,
    /// Add `S^l` to the channel-branch sum as well.
    pub channel_includes_sl: bool,
    /// Upsampling used for `Q`.
    pub upsample_mode: UpsampleMode,
    /// Force both gates to 1 so that `E^ = E^l`. Test hook.
    pub bypass_gates: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            spatial_only: false,
            channel_includes_sl: false,
            upsample_mode: UpsampleMode::Bilinear,
            bypass_gates: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionInputs {
    /// `[E^1 .. E^l]`.
    pub encoder_maps: Vec<Var>,
    /// `G^(l+1)`.
    pub decoder_map: Var,
    pub level: usize,
}

impl AttentionInputs {
    fn validate<T: Real>(&self, tape: &Tape<'_, T>) -> Result<()> {
        if self.level == 0 || self.encoder_maps.len() != self.level {
            return Err(Error::shape(format!(
                "level {} attention needs {} encoder maps, got {}",
                self.level,
                self.level,
                self.encoder_maps.len()
            )));
        }
        let e = tape.shape(self.encoder_maps[self.level - 1]);
        let g = tape.shape(self.decoder_map);
        if e.h() != 2 * g.h() || e.w() != 2 * g.w() || g.c() != 2 * e.c() || e.n() != g.n() {
            return Err(Error::shape(format!(
                "level {}: E^l {e:?} must be (N, C, 2H, 2W) for G^(l+1) {g:?} = (N, 2C, H, W)",
                self.level
            )));
        }
        Ok(())
    }
}

/// Every intermediate value of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub level: usize,
    /// `[S^1 .. S^l]`.
    pub s_maps: Vec<Var>,
    pub d_next: Var,
    /// `None` when the channel gate is skipped.
    pub w_cha: Option<Var>,
    pub e_tilde: Var,
    /// `None` only in bypass mode.
    pub q: Option<Var>,
    pub e_hat: Var,
}

/// `D^(l+1)`: 1x1 projection from `2C` to `C` channels.
pub fn reduce_decoder<T: Real>(tape: &mut Tape<'_, T>, g_next: Var, params: &AttentionParams) -> Result<Var> {
    let c = tape.shape(g_next).c();
    if c % 2 != 0 {
        return Err(Error::shape(format!("decoder map has an odd channel count {c}")));
    }
    params.reduce.forward(tape, g_next)
}

/// `[S^1 .. S^l]` from `[E^1 .. E^l]`.
pub fn match_maps<T: Real>(tape: &mut Tape<'_, T>, encoder_maps: &[Var], params: &AttentionParams) -> Result<Vec<Var>> {
    encoder_maps
        .iter()
        .zip(&params.match_chains)
        .map(|(&e, chain)| chain.forward(tape, e))
        .collect()
}

fn sum_maps<T: Real>(tape: &mut Tape<'_, T>, s_maps: &[Var], d_next: Var) -> Result<Var> {
    let mut terms = s_maps.to_vec();
    terms.push(d_next);
    tape.add_all(&terms)
}

/// Channel gate. `s_maps` is the summand list without `D^(l+1)`; returns
/// `(W_cha, E~)`.
pub fn channel_branch<T: Real>(
    tape: &mut Tape<'_, T>,
    s_maps: &[Var],
    d_next: Var,
    e_l: Var,
    branch: &ChannelBranch,
) -> Result<(Var, Var)> {
    let g_add = sum_maps(tape, s_maps, d_next)?;
    let h = branch.sdc.forward(tape, g_add)?;
    let pooled = tape.global_avg_pool(h)?;
    let w_cha = branch.mlp.forward(tape, pooled)?;
    let e_tilde = tape.mul(e_l, w_cha)?;
    Ok((w_cha, e_tilde))
}

/// Spatial gate `Q` at twice the summand resolution.
pub fn spatial_branch<T: Real>(
    tape: &mut Tape<'_, T>,
    s_maps: &[Var],
    d_next: Var,
    branch: &SpatialBranch,
    mode: UpsampleMode,
) -> Result<Var> {
    let sum = sum_maps(tape, s_maps, d_next)?;
    let h = branch.conv3.forward(tape, sum)?;
    let h = branch.conv1.forward(tape, h)?;
    let gate = tape.sigmoid(h)?;
    tape.upsample(gate, 2, mode)
}

pub fn attention_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    inputs: &AttentionInputs,
    params: &AttentionParams,
    opts: AttentionOptions,
) -> Result<AttentionTrace> {
    inputs.validate(tape)?;
    if params.level != inputs.level {
        return Err(Error::arg(format!("level-{} parameters used at level {}", params.level, inputs.level)));
    }
    let l = inputs.level;
    let e_l = inputs.encoder_maps[l - 1];
    let d_next = reduce_decoder(tape, inputs.decoder_map, params)?;
    let s_maps = match_maps(tape, &inputs.encoder_maps, params)?;
    if opts.bypass_gates {
        return Ok(AttentionTrace { level: l, s_maps, d_next, w_cha: None, e_tilde: e_l, q: None, e_hat: e_l });
    }

    let (w_cha, e_tilde) = if opts.spatial_only {
        (None, e_l)
    } else {
        let branch = params
            .channel
            .as_ref()
            .ok_or_else(|| Error::arg(format!("level {l} has no channel-branch parameters")))?;
        let upto = if opts.channel_includes_sl { l } else { l - 1 };
        let (w, e) = channel_branch(tape, &s_maps[..upto], d_next, e_l, branch)?;
        (Some(w), e)
    };
    let q = spatial_branch(tape, &s_maps, d_next, &params.spatial, opts.upsample_mode)?;
    let e_hat = tape.mul(e_tilde, q)?;
    Ok(AttentionTrace { level: l, s_maps, d_next, w_cha, e_tilde, q: Some(q), e_hat })
}
