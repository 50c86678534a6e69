//! Dense rank-4 tensors in `(batch, channel, height, width)` layout.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

#[cfg(not(feature = "f64"))]
pub type DefaultReal = f32;
#[cfg(feature = "f64")]
pub type DefaultReal = f64;

/// Extents `(N, C, H, W)`; every extent is at least one.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape([n, c, h, w]);
        if shape.0.contains(&0) {
            return Err(Error::InvalidShape(format!("{shape:?}: extents must be >= 1")));
        }
        Ok(shape)
    }

    /// Panics on a zero extent; for internally derived shapes only.
    pub(crate) fn of(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::new(n, c, h, w).expect("derived shape has a zero extent")
    }

    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one `(H, W)` plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Initialization rule for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Normal with variance `2 / fan_in`, where `fan_in = C * H * W` of the
    /// tensor read as a `(Cout, Cin, kH, kW)` kernel.
    HeNormal { seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = DefaultReal> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "{shape:?} holds {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_parts(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn create(extents: [usize; 4], init: Init) -> Result<Self> {
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3])?;
        match init {
            Init::Zeros => Ok(Self::zeros(shape)),
            Init::Constant(c) => Ok(Self::full(shape, T::of(c))),
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::arg(format!("uniform bounds need lo < hi, got [{lo}, {hi})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..shape.numel())
                    .map(|_| T::of(rng.random_range(lo..hi)))
                    .collect();
                Ok(Self::from_parts(shape, data))
            }
            Init::HeNormal { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Self::he_normal(shape, &mut rng))
            }
        }
    }

    /// He-normal draw from an external generator, `fan_in = C * H * W`.
    pub fn he_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let fan_in = (shape.c() * shape.h() * shape.w()) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turns gradient tracking on or off; the gradient buffer exists iff on.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![T::zero(); self.data.len()]);
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        let g = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::arg("tensor does not require grad"))?;
        if g.len() != delta.len() {
            return Err(Error::shape(format!("gradient of {} elements for {:?}", delta.len(), self.shape)));
        }
        for (a, &b) in g.iter_mut().zip(delta) {
            *a = *a + b;
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + h) * s.w() + w]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape, self.data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Item `n` of the batch as its own `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.numel() / self.shape.n();
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Self::from_parts(self.shape.with_batch(1), data)
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::arg("empty batch"))?;
        let inner = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape.0[1..] != inner.0[1..] {
                return Err(Error::shape(format!("cannot stack {:?} with {:?}", t.shape, inner)));
            }
            n += t.shape.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(inner.with_batch(n), data))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }
}

impl Shape {
    pub fn with_batch(self, n: usize) -> Self {
        Shape([n, self.c(), self.h(), self.w()])
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &format_args!("{head:?}{}", if self.len() > 8 { " .." } else { "" }))
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(Tensor::<f32>::create([1, 0, 2, 2], Init::Zeros), Err(Error::InvalidShape(_))));
        assert!(Shape::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn create_zeros_and_constant() {
        let z = Tensor::<f32>::create([1, 1, 2, 2], Init::Zeros).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let ones = Tensor::<f32>::create([1, 3, 4, 4], Init::Constant(1.0)).unwrap();
        assert_eq!(ones.len(), 48);
        assert_eq!(ones.sum(), 48.0);
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let init = Init::Uniform { lo: -1.0, hi: 1.0, seed: 7 };
        let a = Tensor::<f32>::create([1, 1, 8, 8], init).unwrap();
        let b = Tensor::<f32>::create([1, 1, 8, 8], init).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
        let other = Tensor::<f32>::create([1, 1, 8, 8], Init::Uniform { lo: -1.0, hi: 1.0, seed: 8 }).unwrap();
        assert_ne!(bits(&a), bits(&other));
    }

    #[test]
    fn uniform_needs_ordered_bounds() {
        let err = Tensor::<f64>::create([1, 1, 2, 2], Init::Uniform { lo: 1.0, hi: 1.0, seed: 0 });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn he_normal_variance_tracks_fan_in() {
        // fan_in = 16 * 3 * 3 = 144
        let t = Tensor::<f64>::create([64, 16, 3, 3], Init::HeNormal { seed: 3 }).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 144.0;
        assert!((var - want).abs() / want < 0.05, "var {var} want {want}");
    }

    #[test]
    fn grad_buffer_present_iff_requires_grad() {
        let mut t = Tensor::<f32>::zeros(Shape::of(1, 2, 2, 2));
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 8);
        t.accumulate_grad(&[1.0; 8]).unwrap();
        t.accumulate_grad(&[1.0; 8]).unwrap();
        assert!(t.grad().unwrap().iter().all(|&g| g == 2.0));
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }
}
