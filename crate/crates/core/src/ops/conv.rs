//! 2D cross-correlation with stride, dilation and zero padding, lowered to
//! GEMM through an im2col buffer.

use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: 0 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self { stride, dilation, padding }
    }

    /// Stride 1 with `p = floor(d * (k - 1) / 2)`, which keeps extents for odd `k`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    /// Stride-2, unpadded; exact halving for 2x2 kernels on even extents.
    pub fn halving() -> Self {
        Self { stride: 2, dilation: 1, padding: 0 }
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when that is below one.
    pub fn out_extent(&self, n: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    pub fn out_shape(&self) -> Shape {
        Shape::of(self.n, self.cout, self.oh, self.ow)
    }
}

pub(crate) fn geometry(x: Shape, kernel: Shape, bias: Option<Shape>, spec: Conv2dSpec) -> Result<ConvGeometry> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::arg(format!("conv2d stride and dilation must be >= 1, got {spec:?}")));
    }
    if kernel.c() != x.c() {
        return Err(Error::shape(format!(
            "conv2d input {x:?} has {} channels, kernel {kernel:?} expects {}",
            x.c(),
            kernel.c()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != kernel.n() {
            return Err(Error::shape(format!("conv2d bias {b:?} for {} output channels", kernel.n())));
        }
    }
    let oh = spec.out_extent(x.h(), kernel.h());
    let ow = spec.out_extent(x.w(), kernel.w());
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeometry {
            n: x.n(),
            cin: x.c(),
            h: x.h(),
            w: x.w(),
            cout: kernel.n(),
            kh: kernel.h(),
            kw: kernel.w(),
            oh,
            ow,
        }),
        _ => Err(Error::shape(format!(
            "conv2d of {x:?} with kernel {kernel:?} and {spec:?} yields an empty output"
        ))),
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, spec: Conv2dSpec, col: &mut [T]) {
    let p = g.p();
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - pad + ki as isize * d;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kj as isize * d;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry, spec: Conv2dSpec, dx: &mut [T]) {
    let p = g.p();
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - pad + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s - pad + kj as isize * d;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel.shape(), bias.map(|b| b.shape()), spec)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let pointwise = spec.is_pointwise(g.kh, g.kw);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let w = MatRef::new(kernel.data(), g.cout, k);
    for n in 0..g.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let cols = if pointwise {
            xn
        } else {
            im2col(xn, &g, spec, &mut col);
            &col
        };
        let on = &mut out[n * out_per..(n + 1) * out_per];
        gemm(w, MatRef::new(cols, k, p), T::zero(), on);
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_exact_mut(p).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: Conv2dSpec,
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = geometry(x.shape(), kernel.shape(), None, spec).expect("geometry validated in forward");
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let [need_dx, need_dk, need_db] = need;
    let pointwise = spec.is_pointwise(g.kh, g.kw);

    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); kernel.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let mut col = if pointwise || !need_dk { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); k * p] };
    let w = MatRef::new(kernel.data(), g.cout, k);

    for n in 0..g.n {
        let dn = &dout[n * out_per..(n + 1) * out_per];
        let d_mat = MatRef::new(dn, g.cout, p);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dn.chunks_exact(p).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            let cols: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, &g, spec, &mut col);
                &col
            };
            gemm(d_mat, MatRef::new(cols, k, p).t(), T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if pointwise {
                gemm(w.t(), d_mat, T::zero(), dxn);
            } else {
                gemm(w.t(), d_mat, T::zero(), &mut dcol);
                col2im(&dcol, &g, spec, dxn);
            }
        }
    }
    ConvGrads { dx, dkernel: dk, dbias: db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    /// Direct six-loop cross-correlation, independent of im2col/GEMM.
    fn naive(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let (xs, ks) = (x.shape(), k.shape());
        let oh = spec.out_extent(xs.h(), ks.h()).unwrap();
        let ow = spec.out_extent(xs.w(), ks.w()).unwrap();
        let mut out = Tensor::zeros(Shape::of(xs.n(), ks.n(), oh, ow));
        let os = out.shape();
        for n in 0..xs.n() {
            for co in 0..ks.n() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..xs.c() {
                            for ki in 0..ks.h() {
                                for kj in 0..ks.w() {
                                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                                        acc += x.at(n, ci, iy as usize, ix as usize) * k.at(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * os.c() + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn halving_shape() {
        let x = Tensor::<f32>::zeros(Shape::of(1, 1, 4, 4));
        let k = Tensor::<f32>::zeros(Shape::of(1, 1, 2, 2));
        let y = conv2d(&x, &k, None, Conv2dSpec::halving()).unwrap();
        assert_eq!(y.shape(), Shape::of(1, 1, 2, 2));
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::<f32>::full(Shape::of(1, 1, 3, 3), 1.0);
        let k = Tensor::<f32>::full(Shape::of(1, 1, 3, 3), 1.0);
        let b = Tensor::<f32>::zeros(Shape::of(1, 1, 1, 1));
        let y = conv2d(&x, &k, Some(&b), Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), Shape::scalar());
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn dilated_padded_matches_loop_oracle() {
        let x = Tensor::<f64>::create([2, 3, 8, 8], Init::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        let k = Tensor::<f64>::create([4, 3, 3, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 2 }).unwrap();
        let b = Tensor::<f64>::create([4, 1, 1, 1], Init::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        for spec in [Conv2dSpec::new(1, 2, 2), Conv2dSpec::new(2, 1, 1), Conv2dSpec::new(1, 1, 0), Conv2dSpec::new(2, 4, 2)] {
            let got = conv2d(&x, &k, Some(&b), spec).unwrap();
            let want = naive(&x, &k, &b, spec);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn output_extent_formula_grid() {
        for s in [1, 2] {
            for d in [1, 2, 4] {
                for p in [0, 1, 2] {
                    for k in [1, 2, 3] {
                        let spec = Conv2dSpec::new(s, d, p);
                        let h = 9usize;
                        let span = d * (k - 1) + 1;
                        let expected = if h + 2 * p >= span { Some((h + 2 * p - span) / s + 1) } else { None };
                        assert_eq!(spec.out_extent(h, k), expected);
                        let x = Tensor::<f32>::zeros(Shape::of(1, 1, h, h));
                        let kern = Tensor::<f32>::zeros(Shape::of(1, 1, k, k));
                        match (conv2d(&x, &kern, None, spec), expected) {
                            (Ok(y), Some(e)) => assert_eq!(y.shape(), Shape::of(1, 1, e, e)),
                            (Err(Error::ShapeMismatch(_)), None) => {}
                            (r, e) => panic!("{spec:?} k={k}: {r:?} vs {e:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_output_is_shape_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::of(1, 1, 2, 2));
        let k = Tensor::<f32>::zeros(Shape::of(1, 1, 3, 3));
        assert!(matches!(conv2d(&x, &k, None, Conv2dSpec::default()), Err(Error::ShapeMismatch(_))));
        let k2 = Tensor::<f32>::zeros(Shape::of(1, 2, 1, 1));
        assert!(matches!(conv2d(&x, &k2, None, Conv2dSpec::default()), Err(Error::ShapeMismatch(_))));
    }
}
