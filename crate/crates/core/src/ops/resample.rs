//! Nearest and bilinear resampling, half-pixel (align-corners = false)
//! convention: source coordinate `(dst + 0.5) * in / out - 0.5`, clamped.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Bilinear,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::arg(format!("unknown upsample mode `{other}`"))),
        }
    }
}

/// One output coordinate's two source taps and the weight of the second.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize, mode: UpsampleMode) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            UpsampleMode::Nearest => {
                let i = (((o as f64 + 0.5) * scale).floor() as usize).min(n_in - 1);
                Tap { lo: i, hi: i, frac: 0.0 }
            }
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                Tap { lo, hi, frac: src - lo as f64 }
            }
        })
        .collect()
}

/// Resamples every plane of `x` to `(oh, ow)`.
pub fn resize<T: Real>(x: &Tensor<T>, oh: usize, ow: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    if oh == 0 || ow == 0 {
        return Err(Error::arg("resize target extents must be >= 1"));
    }
    let s = x.shape();
    let ty = taps(s.h(), oh, mode);
    let tx = taps(s.w(), ow, mode);
    let out_shape = Shape::of(s.n(), s.c(), oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks_exact(s.plane()) {
        for y in &ty {
            let fy = T::of(y.frac);
            let r0 = &plane[y.lo * s.w()..(y.lo + 1) * s.w()];
            let r1 = &plane[y.hi * s.w()..(y.hi + 1) * s.w()];
            for t in &tx {
                let fx = T::of(t.frac);
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * fx;
                let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn resize_backward<T: Real>(input: Shape, oh: usize, ow: usize, mode: UpsampleMode, dout: &[T]) -> Vec<T> {
    let ty = taps(input.h(), oh, mode);
    let tx = taps(input.w(), ow, mode);
    let mut dx = vec![T::zero(); input.numel()];
    for (plane, dplane) in dx.chunks_exact_mut(input.plane()).zip(dout.chunks_exact(oh * ow)) {
        for (yi, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            for (xi, t) in tx.iter().enumerate() {
                let fx = T::of(t.frac);
                let g = dplane[yi * ow + xi];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                let w = input.w();
                plane[y.lo * w + t.lo] = plane[y.lo * w + t.lo] + gt * (T::one() - fx);
                plane[y.lo * w + t.hi] = plane[y.lo * w + t.hi] + gt * fx;
                plane[y.hi * w + t.lo] = plane[y.hi * w + t.lo] + gb * (T::one() - fx);
                plane[y.hi * w + t.hi] = plane[y.hi * w + t.hi] + gb * fx;
            }
        }
    }
    dx
}

/// Integer-factor upsampling, `(N, C, H, W) -> (N, C, fH, fW)`.
pub fn upsample<T: Real>(x: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(Error::arg(format!("upsample factor must be >= 2, got {factor}")));
    }
    let s = x.shape();
    resize(x, s.h() * factor, s.w() * factor, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn nearest_replicates() {
        let x = Tensor::<f32>::new(Shape::of(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_preserves_constant() {
        let x = Tensor::<f32>::full(Shape::of(1, 2, 3, 5), 0.75);
        let y = upsample(&x, 2, UpsampleMode::Bilinear).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 2, 6, 10));
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
    }

    #[test]
    fn factor_below_two_rejected() {
        let x = Tensor::<f32>::zeros(Shape::of(1, 1, 2, 2));
        assert!(matches!(upsample(&x, 1, UpsampleMode::Bilinear), Err(Error::InvalidArgument(_))));
    }

    /// Per-pixel evaluation of the interpolation formula, written without taps.
    fn bilinear_oracle(x: &Tensor<f64>, f: usize) -> Vec<f64> {
        let s = x.shape();
        let (h, w) = (s.h(), s.w());
        let mut out = Vec::new();
        for oy in 0..h * f {
            for ox in 0..w * f {
                let sy = ((oy as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ay, ax) = (sy - y0 as f64, sx - x0 as f64);
                let v = (1.0 - ay) * (1.0 - ax) * x.at(0, 0, y0, x0)
                    + (1.0 - ay) * ax * x.at(0, 0, y0, x1)
                    + ay * (1.0 - ax) * x.at(0, 0, y1, x0)
                    + ay * ax * x.at(0, 0, y1, x1);
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn bilinear_matches_direct_oracle() {
        let x = Tensor::<f64>::create([1, 1, 4, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 9 }).unwrap();
        for f in [2, 4] {
            let y = upsample(&x, f, UpsampleMode::Bilinear).unwrap();
            let want = bilinear_oracle(&x, f);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <R x, g> == <x, R^T g> for random x, g
        let x = Tensor::<f64>::create([1, 2, 3, 4], Init::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            for (oh, ow) in [(6, 8), (12, 16), (2, 2), (5, 7)] {
                let y = resize(&x, oh, ow, mode).unwrap();
                let g = Tensor::<f64>::create([1, 2, oh, ow], Init::Uniform { lo: -1.0, hi: 1.0, seed: 2 }).unwrap();
                let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let dx = resize_backward(x.shape(), oh, ow, mode, g.data());
                let rhs: f64 = x.data().iter().zip(&dx).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12, "{mode:?} {oh}x{ow}");
            }
        }
    }
}
