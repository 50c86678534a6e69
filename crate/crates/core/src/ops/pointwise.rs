//! Elementwise arithmetic with broadcasting, activations, the dense layer and
//! channel concatenation.

use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Strides into `b` for each axis of `a`'s shape, zero on broadcast axes.
/// Every axis of `b` must equal `a`'s or be 1.
pub(crate) fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    let mut strides = [0; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        let (ea, eb) = (a.0[axis], b.0[axis]);
        if eb == ea {
            strides[axis] = acc;
        } else if eb != 1 {
            return Err(Error::shape(format!("{b:?} does not broadcast against {a:?}")));
        }
        acc *= eb;
    }
    Ok(strides)
}

/// Visits `(flat index in a, flat index in b)` in `a`'s row-major order.
fn for_each_pair(a: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = a.0;
    let mut i = 0;
    for in_ in 0..n {
        for ic in 0..c {
            for ih in 0..h {
                let row = in_ * strides[0] + ic * strides[1] + ih * strides[2];
                if strides[3] == 1 {
                    for iw in 0..w {
                        f(i, row + iw);
                        i += 1;
                    }
                } else {
                    for _ in 0..w {
                        f(i, row);
                        i += 1;
                    }
                }
            }
        }
    }
}

pub fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let strides = broadcast_strides(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); a.len()];
    match kind {
        BinaryKind::Add => for_each_pair(a.shape(), strides, |i, j| out[i] = ad[i] + bd[j]),
        BinaryKind::Mul => for_each_pair(a.shape(), strides, |i, j| out[i] = ad[i] * bd[j]),
    }
    Ok(Tensor::from_parts(a.shape(), out))
}

pub(crate) fn binary_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: BinaryKind,
    dout: &[T],
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let strides = broadcast_strides(a.shape(), b.shape()).expect("validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let mut da = need[0].then(|| vec![T::zero(); a.len()]);
    let mut db = need[1].then(|| vec![T::zero(); b.len()]);
    for_each_pair(a.shape(), strides, |i, j| {
        let g = dout[i];
        let (ga, gb) = match kind {
            BinaryKind::Add => (g, g),
            BinaryKind::Mul => (g * bd[j], g * ad[i]),
        };
        if let Some(da) = da.as_mut() {
            da[i] = ga;
        }
        if let Some(db) = db.as_mut() {
            db[j] = db[j] + gb;
        }
    });
    (da, db)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        // NaN passes through so that divergence stays visible downstream
        Activation::Relu => x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Gradient through an activation, expressed with its forward output `y`.
pub(crate) fn activate_backward<T: Real>(y: &Tensor<T>, kind: Activation, dout: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(dout)
        .map(|(&y, &g)| match kind {
            Activation::Relu => {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect()
}

fn dense_check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.h() != 1 || xs.w() != 1 {
        return Err(Error::shape(format!("dense input must be (N,C,1,1), got {xs:?}")));
    }
    if ws.c() * ws.h() * ws.w() != xs.c() || bias.len() != ws.n() {
        return Err(Error::shape(format!(
            "dense weight {ws:?} / bias {:?} incompatible with input {xs:?}",
            bias.shape()
        )));
    }
    Ok((xs.n(), xs.c(), ws.n()))
}

/// `out[n] = W x[n] + b` with `W` stored as `(Cout, C, 1, 1)`.
pub fn dense<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, cout) = dense_check(x, weight, bias)?;
    let mut out = vec![T::zero(); n * cout];
    gemm(MatRef::new(x.data(), n, c), MatRef::new(weight.data(), cout, c).t(), T::zero(), &mut out);
    for row in out.chunks_exact_mut(cout) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(Tensor::from_parts(Shape::of(n, cout, 1, 1), out))
}

pub(crate) struct DenseGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn dense_backward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, dout: &[T], need: [bool; 3]) -> DenseGrads<T> {
    let (n, c) = (x.shape().n(), x.shape().c());
    let cout = weight.shape().n();
    let d = MatRef::new(dout, n, cout);
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); n * c];
        gemm(d, MatRef::new(weight.data(), cout, c), T::zero(), &mut dx);
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); cout * c];
        gemm(d.t(), MatRef::new(x.data(), n, c), T::zero(), &mut dw);
        dw
    });
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); cout];
        for row in dout.chunks_exact(cout) {
            for (a, &g) in db.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        db
    });
    DenseGrads { dx, dw, db }
}

/// Stacks channels in argument order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::arg("concat of zero tensors"))?.shape();
    let mut channels = 0;
    for x in xs {
        let s = x.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::shape(format!("concat_channels: {s:?} vs {first:?}")));
        }
        channels += s.c();
    }
    let out_shape = first.with_channels(channels);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n() {
        for x in xs {
            let per = x.shape().c() * first.plane();
            out.extend_from_slice(&x.data()[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Inverse of [`concat_channels`]: splits `x` into pieces of the given
/// channel counts.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if channels.iter().sum::<usize>() != s.c() || channels.contains(&0) {
        return Err(Error::shape(format!("cannot split {s:?} into channel groups {channels:?}")));
    }
    Ok(split_flat(x.data(), s, channels)
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_parts(s.with_channels(c), d))
        .collect())
}

pub(crate) fn split_flat<T: Real>(data: &[T], s: Shape, channels: &[usize]) -> Vec<Vec<T>> {
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(s.n() * c * s.plane())).collect();
    let mut offset = 0;
    for _ in 0..s.n() {
        for (part, &c) in parts.iter_mut().zip(channels) {
            let len = c * s.plane();
            part.extend_from_slice(&data[offset..offset + len]);
            offset += len;
        }
    }
    parts
}
