//! Parametric building blocks. Each block registers its tensors in a
//! [`ParamSet`] at construction and records its computation on a [`Tape`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Convolution parameters: He-normal kernel, zero bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let wshape = Shape::new(out_channels, in_channels, kernel, kernel)?;
        let weight = params.register(format!("{name}.weight"), Tensor::he_normal(wshape, rng))?;
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(Shape::new(out_channels, 1, 1, 1)?))?;
        Ok(Self { weight, bias, spec, in_channels, out_channels })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.conv2d(x, w, Some(b), self.spec)
    }
}

/// Fully connected layer on `(N, C, 1, 1)` values.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.register(format!("{name}.weight"), Tensor::he_normal(Shape::new(outputs, inputs, 1, 1)?, rng))?;
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(Shape::new(outputs, 1, 1, 1)?))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.dense(x, w, b)
    }
}

fn expect_channels<T: Real>(tape: &Tape<'_, T>, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.c() != channels {
        return Err(Error::shape(format!("{what} expects {channels} channels, got {s:?}")));
    }
    Ok(())
}

/// Two same-padded 3x3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub first: Conv,
    pub second: Conv,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let same = Conv2dSpec::same(3, 1);
        let first = Conv::new(params, &format!("{name}.conv1"), in_channels, out_channels, 3, same, rng)?;
        let second = Conv::new(params, &format!("{name}.conv2"), out_channels, out_channels, 3, same, rng)?;
        Ok(Self { first, second, in_channels, out_channels })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        expect_channels(tape, x, self.in_channels, "conv block")?;
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.second.forward(tape, h)?;
        tape.relu(h)
    }
}

/// Repeated stride-2 2x2 convolutions bringing an encoder map from level
/// `source_level` down to the resolution below `target_level`. Intermediate
/// hops keep the source channel count; the last hop maps to the target's.
#[derive(Clone, Debug)]
pub struct MatchChain {
    pub hops: Vec<Conv>,
    pub source_level: usize,
    pub target_level: usize,
}

impl MatchChain {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        source_level: usize,
        target_level: usize,
        source_channels: usize,
        target_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if source_level == 0 || source_level > target_level {
            return Err(Error::arg(format!("match chain from level {source_level} to {target_level}")));
        }
        let len = target_level - source_level + 1;
        let hops = (0..len)
            .map(|k| {
                let out = if k + 1 == len { target_channels } else { source_channels };
                Conv::new(params, &format!("{name}.hop{k}"), source_channels, out, 2, Conv2dSpec::halving(), rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { hops, source_level, target_level })
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, e: Var) -> Result<Var> {
        let s = tape.shape(e);
        let factor = 1usize << self.hops.len();
        if s.h() % factor != 0 || s.w() % factor != 0 {
            return Err(Error::shape(format!(
                "level-{} map {s:?} is not a multiple of {factor} for a {}-hop match",
                self.source_level,
                self.hops.len()
            )));
        }
        expect_channels(tape, e, self.hops[0].in_channels, "match chain")?;
        self.hops.iter().try_fold(e, |h, conv| conv.forward(tape, h))
    }
}

/// Stacked dilated 3x3 convolutions with ReLU, channel preserving.
#[derive(Clone, Debug)]
pub struct SdcBlock {
    pub convs: Vec<Conv>,
    pub channels: usize,
}

impl SdcBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::arg(format!("invalid dilation rates {dilations:?}")));
        }
        let convs = dilations
            .iter()
            .enumerate()
            .map(|(k, &d)| Conv::new(params, &format!("{name}.conv{k}"), channels, channels, 3, Conv2dSpec::same(3, d), rng))
            .collect::<Result<_>>()?;
        Ok(Self { convs, channels })
    }

    /// Side length of the combined receptive field, `1 + 2 * sum(d)`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.convs.iter().map(|c| c.spec.dilation).sum::<usize>()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        expect_channels(tape, x, self.channels, "dilated block")?;
        self.convs.iter().try_fold(x, |h, conv| {
            let y = conv.forward(tape, h)?;
            tape.relu(y)
        })
    }
}

/// `sigmoid(fc2(relu(fc1(g))))` with hidden width `ceil(C / r)`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl MlpHead {
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        channels.div_ceil(reduction)
    }

    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::arg("MLP reduction ratio must be >= 1"));
        }
        let hidden = Self::hidden_width(channels, reduction);
        let fc1 = Linear::new(params, &format!("{name}.fc1"), channels, hidden, rng)?;
        let fc2 = Linear::new(params, &format!("{name}.fc2"), hidden, channels, rng)?;
        Ok(Self { fc1, fc2, channels, hidden })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
        let s = tape.shape(g);
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::shape(format!("MLP head expects (N,C,1,1), got {s:?}")));
        }
        let h = self.fc1.forward(tape, g)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, h)?;
        tape.sigmoid(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn zero_all(params: &mut ParamSet<f64>) {
        params.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
    }

    fn eval(params: &ParamSet<f64>, x: Tensor<f64>, f: impl Fn(&mut Tape<'_, f64>, Var) -> Result<Var>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new(params);
        let v = tape.constant(x);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    fn rand(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn conv_block_shape_zero_and_sign() {
        let mut params = ParamSet::new();
        let block = ConvBlock::new(&mut params, "b", 1, 8, &mut rng()).unwrap();
        let y = eval(&params, rand([1, 1, 16, 16], 1), |t, x| block.forward(t, x)).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 8, 16, 16));
        assert!(y.data().iter().all(|&v| v >= 0.0));
        assert!(matches!(
            eval(&params, rand([1, 2, 16, 16], 1), |t, x| block.forward(t, x)),
            Err(Error::ShapeMismatch(_))
        ));
        zero_all(&mut params);
        let y = eval(&params, rand([1, 1, 16, 16], 1), |t, x| block.forward(t, x)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blocks_preserve_extents() {
        let mut params = ParamSet::new();
        let block = ConvBlock::new(&mut params, "b", 2, 3, &mut rng()).unwrap();
        let sdc = SdcBlock::new(&mut params, "s", 3, &[1, 2, 4], &mut rng()).unwrap();
        for size in (8..=64).step_by(2) {
            let y = eval(&params, rand([1, 2, size, size], 2), |t, x| {
                let h = block.forward(t, x)?;
                sdc.forward(t, h)
            })
            .unwrap();
            assert_eq!(y.shape(), Shape::of(1, 3, size, size));
        }
    }

    #[test]
    fn match_chain_hops_and_channels() {
        let mut params = ParamSet::new();
        let one = MatchChain::new(&mut params, "m1", 3, 3, 8, 8, &mut rng()).unwrap();
        assert_eq!(one.len(), 1);
        let y = eval(&params, rand([1, 8, 8, 8], 1), |t, x| one.forward(t, x)).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 8, 4, 4));

        let three = MatchChain::new(&mut params, "m3", 1, 3, 2, 8, &mut rng()).unwrap();
        assert_eq!(three.len(), 3);
        let y = eval(&params, rand([1, 2, 32, 32], 1), |t, x| three.forward(t, x)).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 8, 4, 4));
        assert!(matches!(
            eval(&params, rand([1, 2, 20, 20], 1), |t, x| three.forward(t, x)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn match_chain_exhaustive_for_four_levels() {
        let levels = 4;
        let base = 2;
        let h = 2;
        for l in 1..levels {
            for i in 1..=l {
                let mut params = ParamSet::new();
                let (ci, cl) = (base << (i - 1), base << (l - 1));
                let chain = MatchChain::new(&mut params, "m", i, l, ci, cl, &mut rng()).unwrap();
                assert_eq!(chain.len(), l - i + 1);
                let side = h << (l - i + 1);
                let y = eval(&params, rand([2, ci, side, side], 3), |t, x| chain.forward(t, x)).unwrap();
                assert_eq!(y.shape(), Shape::of(2, cl, h, h), "i={i} l={l}");
            }
        }
    }

    #[test]
    fn identity_like_chain_subsamples() {
        let mut params = ParamSet::new();
        let chain = MatchChain::new(&mut params, "m", 1, 2, 2, 2, &mut rng()).unwrap();
        for hop in &chain.hops {
            let w = params.get_mut(hop.weight);
            w.data_mut().fill(0.0);
            for c in 0..2 {
                // weight[c, c, 0, 0] = 1
                w.data_mut()[(c * 2 + c) * 4] = 1.0;
            }
        }
        let x = rand([1, 2, 16, 16], 4);
        let y = eval(&params, x.clone(), |t, v| chain.forward(t, v)).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 2, 4, 4));
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.at(0, c, i, j), x.at(0, c, 4 * i, 4 * j));
                }
            }
        }
    }

    #[test]
    fn sdc_impulse_response_is_fifteen_wide() {
        let mut params = ParamSet::new();
        let sdc = SdcBlock::new(&mut params, "s", 2, &[1, 2, 4], &mut rng()).unwrap();
        assert_eq!(sdc.receptive_field(), 15);
        // positive weights and biases keep every path alive through the ReLUs
        for p in params.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v: &mut f64| *v = v.abs());
        }
        for conv in &sdc.convs {
            params.get_mut(conv.bias).data_mut().fill(0.0);
        }
        let mut x = Tensor::<f64>::zeros(Shape::of(1, 2, 32, 32));
        x.data_mut()[16 * 32 + 16] = 1.0;
        let y = eval(&params, x, |t, v| sdc.forward(t, v)).unwrap();
        let (mut lo, mut hi) = ((usize::MAX, usize::MAX), (0, 0));
        for c in 0..2 {
            for i in 0..32 {
                for j in 0..32 {
                    if y.at(0, c, i, j) != 0.0 {
                        lo = (lo.0.min(i), lo.1.min(j));
                        hi = (hi.0.max(i), hi.1.max(j));
                    }
                }
            }
        }
        assert_eq!((lo, hi), ((9, 9), (23, 23)));
    }

    #[test]
    fn sdc_zero_weights_zero_output() {
        let mut params = ParamSet::new();
        let sdc = SdcBlock::new(&mut params, "s", 8, &[1, 2, 4], &mut rng()).unwrap();
        zero_all(&mut params);
        let y = eval(&params, rand([1, 8, 16, 16], 5), |t, x| sdc.forward(t, x)).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 8, 16, 16));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_head_range_and_width() {
        assert_eq!(MlpHead::hidden_width(8, 4), 2);
        assert_eq!(MlpHead::hidden_width(6, 4), 2);
        let mut params = ParamSet::new();
        let mlp = MlpHead::new(&mut params, "mlp", 8, 4, &mut rng()).unwrap();
        assert_eq!(mlp.hidden, 2);
        let y = eval(&params, rand([3, 8, 1, 1], 6).map(|v| v * 5.0), |t, x| mlp.forward(t, x)).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(
            eval(&params, rand([1, 8, 2, 2], 6), |t, x| mlp.forward(t, x)),
            Err(Error::ShapeMismatch(_))
        ));
        zero_all(&mut params);
        let y = eval(&params, rand([1, 8, 1, 1], 7), |t, x| mlp.forward(t, x)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }
}
