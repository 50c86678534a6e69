//! The segmentation network: encoder, bottleneck, attention-gated skips and a
//! residually connected, deeply supervised decoder.
//!
//! With `L` levels the encoder produces `E^1 .. E^L` at `S, S/2, .., S/2^(L-1)`
//! with `C1 * 2^(i-1)` channels, and the bottleneck `G^(L+1)` sits at
//! `S/2^L` with `C1 * 2^L` channels. Decoder level `l` runs from `L` down to
//! 1 and produces `G^l` at the resolution and width of `E^l`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward, AttentionInputs, AttentionOptions, AttentionParams, AttentionTrace};
use crate::error::{Error, Result};
use crate::ften;
use crate::layers::{Conv, ConvBlock};
use crate::ops::{Conv2dSpec, UpsampleMode};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Structural toggles for the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub spatial_only: bool,
    pub deep_supervision: bool,
    pub decoder_residuals: bool,
    pub channel_branch_includes_sl: bool,
}

impl VariantFlags {
    pub const FULL: Self = Self {
        spatial_only: false,
        deep_supervision: true,
        decoder_residuals: true,
        channel_branch_includes_sl: false,
    };
    /// Variant I: spatial attention only.
    pub const SPATIAL_ONLY: Self = Self { spatial_only: true, ..Self::FULL };
    /// Variant II: no deep supervision.
    pub const NO_DEEP_SUPERVISION: Self = Self { deep_supervision: false, ..Self::FULL };
    /// Variant III: no decoder residuals.
    pub const NO_RESIDUALS: Self = Self { decoder_residuals: false, ..Self::FULL };

    pub fn name(&self) -> Option<&'static str> {
        match *self {
            Self::FULL => Some("full"),
            Self::SPATIAL_ONLY => Some("I"),
            Self::NO_DEEP_SUPERVISION => Some("II"),
            Self::NO_RESIDUALS => Some("III"),
            _ => None,
        }
    }
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl FromStr for VariantFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::FULL),
            "I" | "i" => Ok(Self::SPATIAL_ONLY),
            "II" | "ii" => Ok(Self::NO_DEEP_SUPERVISION),
            "III" | "iii" => Ok(Self::NO_RESIDUALS),
            _ => Err(Error::arg(format!("unknown variant {s:?}, expected full, I, II or III"))),
        }
    }
}

impl fmt::Display for VariantFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "custom(spatial_only={}, deep_supervision={}, decoder_residuals={}, channel_branch_includes_sl={})",
                self.spatial_only, self.deep_supervision, self.decoder_residuals, self.channel_branch_includes_sl
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub reduction: usize,
    pub sdc_dilations: Vec<usize>,
    pub upsample_mode: UpsampleMode,
    pub variant: VariantFlags,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            input_channels: 1,
            reduction: 4,
            sdc_dilations: vec![1, 2, 4],
            upsample_mode: UpsampleMode::Bilinear,
            variant: VariantFlags::FULL,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::arg(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.levels > 12 {
            return Err(Error::arg(format!("levels must be <= 12, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.reduction == 0 {
            return Err(Error::arg("channel counts and the reduction ratio must be >= 1"));
        }
        if self.sdc_dilations.is_empty() || self.sdc_dilations.contains(&0) {
            return Err(Error::arg(format!("invalid dilation rates {:?}", self.sdc_dilations)));
        }
        Ok(())
    }

    /// Width of encoder level `i` (1-based); `levels + 1` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Input side lengths must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let d = self.divisor();
        if shape.c() != self.input_channels {
            return Err(Error::shape(format!("expected {} input channels, got {shape:?}", self.input_channels)));
        }
        if shape.h() % d != 0 || shape.w() % d != 0 {
            return Err(Error::shape(format!("input extents {shape:?} are not multiples of {d}")));
        }
        Ok(())
    }
}

/// Parameters of decoder level `l`.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub level: usize,
    pub up: Conv,
    pub attention: AttentionParams,
    pub block: ConvBlock,
    /// `(m, proj_m)` for every deeper decoder level `m`.
    pub projections: Vec<(usize, Conv)>,
    pub side_head: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `(N, 1, H, W)` probabilities.
    pub final_map: Var,
    /// Side-head probabilities for decoder levels `2 ..= L`, each at input
    /// resolution; empty without deep supervision.
    pub side_maps: Vec<Var>,
    /// `[E^1 .. E^L]`.
    pub encoder_maps: Vec<Var>,
    pub bottleneck: Var,
    /// `[G^1 .. G^L]` after residual accumulation.
    pub decoder_maps: Vec<Var>,
    /// Attention evaluations ordered by level, `attention[l - 1]`.
    pub attention: Vec<AttentionTrace>,
}

/// One row of [`Model::parameter_summary`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSummary {
    pub name: String,
    pub shape: Shape,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = crate::tensor::DefaultReal> {
    config: NetworkConfig,
    pub params: ParamSet<T>,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Ordered from level `L` down to 1.
    decoder: Vec<DecoderLevel>,
    head: Conv,
    bypass_attention: bool,
}

impl<T: Real> Model<T> {
    /// Builds a model with He-normal kernels and zero biases drawn from one
    /// RNG seeded by `seed`. Parameters of disabled variant features are not
    /// created.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let levels = config.levels;
        let v = config.variant;

        let mut encoder = Vec::with_capacity(levels);
        for i in 1..=levels {
            let cin = if i == 1 { config.input_channels } else { config.channels(i - 1) };
            encoder.push(ConvBlock::new(&mut params, &format!("enc{i}"), cin, config.channels(i), &mut rng)?);
        }
        let bottleneck =
            ConvBlock::new(&mut params, "bottleneck", config.channels(levels), config.channels(levels + 1), &mut rng)?;

        let widths: Vec<usize> = (1..=levels).map(|i| config.channels(i)).collect();
        let mut decoder = Vec::with_capacity(levels);
        for l in (1..=levels).rev() {
            let c = config.channels(l);
            let up = Conv::new(&mut params, &format!("dec{l}.up"), 2 * c, c, 3, Conv2dSpec::same(3, 1), &mut rng)?;
            let attention = AttentionParams::new(
                &mut params,
                &format!("att{l}"),
                l,
                &widths,
                !v.spatial_only,
                config.reduction,
                &config.sdc_dilations,
                &mut rng,
            )?;
            let block = ConvBlock::new(&mut params, &format!("dec{l}.block"), 2 * c, c, &mut rng)?;
            let mut projections = Vec::new();
            if v.decoder_residuals {
                for m in l + 1..=levels {
                    let conv = Conv::new(&mut params, &format!("dec{l}.proj{m}"), config.channels(m), c, 1, Conv2dSpec::default(), &mut rng)?;
                    // Residual branches start closed. He-scaled projections of
                    // unrectified maps compound level by level and saturate
                    // the output sigmoid before training begins.
                    params.get_mut(conv.weight).data_mut().fill(T::zero());
                    projections.push((m, conv));
                }
            }
            let side_head = if v.deep_supervision && l >= 2 {
                Some(Conv::new(&mut params, &format!("side{l}"), c, 1, 1, Conv2dSpec::default(), &mut rng)?)
            } else {
                None
            };
            decoder.push(DecoderLevel { level: l, up, attention, block, projections, side_head });
        }
        let head = Conv::new(&mut params, "head", config.channels(1), 1, 1, Conv2dSpec::default(), &mut rng)?;

        Ok(Self { config, params, encoder, bottleneck, decoder, head, bypass_attention: false })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantFlags {
        self.config.variant
    }

    /// Switches variant flags at forward time. Disabling a feature leaves its
    /// parameters in place but unused; enabling one whose parameters were
    /// never built is an error.
    pub fn set_variant(&mut self, flags: VariantFlags) -> Result<()> {
        let has_channel = self.decoder.iter().all(|d| d.attention.channel.is_some());
        let has_side = self.decoder.iter().all(|d| d.level < 2 || d.side_head.is_some());
        let has_proj = self.decoder.iter().all(|d| d.projections.len() == self.config.levels - d.level);
        if !flags.spatial_only && !has_channel {
            return Err(Error::arg("model was built without channel-attention parameters"));
        }
        if flags.deep_supervision && !has_side {
            return Err(Error::arg("model was built without side heads"));
        }
        if flags.decoder_residuals && !has_proj {
            return Err(Error::arg("model was built without residual projections"));
        }
        self.config.variant = flags;
        Ok(())
    }

    /// Replaces every attention output with its encoder map.
    pub fn set_attention_bypass(&mut self, on: bool) {
        self.bypass_attention = on;
    }

    pub fn decoder_level(&self, level: usize) -> Option<&DecoderLevel> {
        self.decoder.iter().find(|d| d.level == level)
    }

    pub fn encoder_block(&self, level: usize) -> Option<&ConvBlock> {
        self.encoder.get(level.checked_sub(1)?)
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    /// Number of loss heads the current variant supervises.
    pub fn head_count(&self) -> usize {
        if self.config.variant.deep_supervision {
            self.config.levels
        } else {
            1
        }
    }

    pub fn parameter_summary(&self) -> Vec<ParamSummary> {
        self.params
            .iter()
            .map(|p| ParamSummary { name: p.name.clone(), shape: p.tensor.shape(), count: p.tensor.len() })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            spatial_only: self.config.variant.spatial_only,
            channel_includes_sl: self.config.variant.channel_branch_includes_sl,
            upsample_mode: self.config.upsample_mode,
            bypass_gates: self.bypass_attention,
        }
    }

    /// Records a forward pass of `x` on `tape`, which must borrow this model's
    /// parameters.
    pub fn forward(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<ForwardOutputs> {
        let shape = tape.shape(x);
        self.config.check_input(shape)?;
        let levels = self.config.levels;
        let mode = self.config.upsample_mode;
        let flags = self.config.variant;

        let mut encoder_maps = Vec::with_capacity(levels);
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h)?;
            }
            h = block.forward(tape, h)?;
            encoder_maps.push(h);
        }
        let pooled = tape.max_pool2(h)?;
        let bottleneck = self.bottleneck.forward(tape, pooled)?;

        // g_maps[l - 1] = G^l once computed
        let mut g_maps: Vec<Option<Var>> = vec![None; levels];
        let mut traces = Vec::with_capacity(levels);
        let mut side_maps = Vec::new();
        let opts = self.attention_options();
        let mut deeper = bottleneck;
        for dec in &self.decoder {
            let l = dec.level;
            let up = tape.upsample(deeper, 2, mode)?;
            let u = dec.up.forward(tape, up)?;
            let inputs = AttentionInputs { encoder_maps: encoder_maps[..l].to_vec(), decoder_map: deeper, level: l };
            let trace = attention_forward(tape, &inputs, &dec.attention, opts)?;
            let joined = tape.concat_channels(&[trace.e_hat, u])?;
            let mut g = dec.block.forward(tape, joined)?;
            traces.push(trace);

            if flags.decoder_residuals {
                let mut terms = vec![g];
                for (m, proj) in &dec.projections {
                    let source = g_maps[m - 1].expect("deeper levels are decoded first");
                    // a 1x1 convolution commutes with bilinear resizing, so
                    // project at the coarse resolution
                    let p = proj.forward(tape, source)?;
                    terms.push(tape.upsample(p, 1 << (m - l), UpsampleMode::Bilinear)?);
                }
                g = tape.add_all(&terms)?;
            }
            if flags.deep_supervision && l >= 2 {
                let head = dec.side_head.as_ref().ok_or_else(|| Error::arg("side head parameters missing"))?;
                let logits = head.forward(tape, g)?;
                let prob = tape.sigmoid(logits)?;
                side_maps.push(tape.upsample(prob, 1 << (l - 1), UpsampleMode::Bilinear)?);
            }
            g_maps[l - 1] = Some(g);
            deeper = g;
        }
        let logits = self.head.forward(tape, deeper)?;
        let final_map = tape.sigmoid(logits)?;

        side_maps.reverse();
        traces.reverse();
        Ok(ForwardOutputs {
            final_map,
            side_maps,
            encoder_maps,
            bottleneck,
            decoder_maps: g_maps.into_iter().map(|g| g.expect("every level decoded")).collect(),
            attention: traces,
        })
    }

    /// Final probability map for a batch, without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, v)?;
        Ok(tape.value(out.final_map).clone())
    }
}

/// Writes `att_l{l}_wcha.ften` and `att_l{l}_q.ften` for every level whose
/// gate was evaluated; returns the written paths.
pub fn dump_attention<T: Real>(
    tape: &Tape<'_, T>,
    outputs: &ForwardOutputs,
    dir: impl AsRef<Path>,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for tr in &outputs.attention {
        for (kind, var) in [("wcha", tr.w_cha), ("q", tr.q)] {
            if let Some(v) = var {
                let path = dir.join(format!("att_l{}_{kind}.ften", tr.level));
                ften::save(&path, tape.value(v))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
