//! Synthetic chest-slice phantoms with elliptical lesions.
//!
//! A soft-tissue body ellipse in air holds two dark lung fields. Lesions are
//! brighter rotated ellipses inside the lungs. The intensity image is blurred
//! with a Gaussian and then corrupted by Gaussian noise; the mask is the
//! unblurred union of lesion ellipses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{window_and_normalize, RawSlice, SamplePair};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -850.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Inclusive range for the number of lesions.
    pub lesions: (usize, usize),
    /// Lesion intensity above the lung field, in HU.
    pub contrast: (f64, f64),
    pub noise_hu: f64,
    pub blur_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { lesions: (1, 3), contrast: (250.0, 500.0), noise_hu: 20.0, blur_sigma: 1.0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.lesions;
        if a > b {
            return Err(Error::arg(format!("lesion count range ({a}, {b}) is reversed")));
        }
        let (lo, hi) = self.contrast;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::arg(format!("contrast range ({lo}, {hi}) is invalid")));
        }
        if !(self.noise_hu >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::arg("noise and blur must be non-negative"));
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates; pixel `(i, j)` has its centre at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }

    fn covers_pixel(&self, i: usize, j: usize) -> bool {
        self.contains(i as f64 + 0.5, j as f64 + 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub slice: RawSlice,
    /// Row-major 0/1 lesion mask.
    pub mask: Vec<u8>,
    pub lesions: Vec<Ellipse>,
}

impl Phantom {
    pub fn mask_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.slice.height, self.slice.width);
        let data = self.mask.iter().map(|&m| if m == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_parts(Shape::of(1, 1, h, w), data)
    }

    pub fn pair<T: Real>(&self, lo_hu: f64, hi_hu: f64) -> Result<SamplePair<T>> {
        let image = window_and_normalize(&self.slice, lo_hu, hi_hu)?;
        SamplePair::new(self.slice.id.clone(), image, self.mask_tensor())
    }
}

fn paint(field: &mut [f64], size: usize, e: &Ellipse, value: f64) {
    for i in 0..size {
        for j in 0..size {
            if e.covers_pixel(i, j) {
                field[i * size + j] = value;
            }
        }
    }
}

fn gaussian_blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for i in 0..size {
        for j in 0..size {
            tmp[i * size + j] = (-r..=r).zip(&k).map(|(d, w)| w * field[i * size + clamp(j as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = (-r..=r).zip(&k).map(|(d, w)| w * tmp[clamp(i as isize + d) * size + j]).sum();
        }
    }
    out
}

/// Deterministic phantom of `size x size` pixels.
pub fn synth_phantom(id: impl Into<String>, seed: u64, size: usize, cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    if size < 8 {
        return Err(Error::arg(format!("phantom size {size} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mid = s / 2.0;
    let mut field = vec![AIR_HU; size * size];

    let body = Ellipse {
        cy: mid + rng.random_range(-0.02..0.02) * s,
        cx: mid + rng.random_range(-0.02..0.02) * s,
        ry: rng.random_range(0.36..0.40) * s,
        rx: rng.random_range(0.44..0.47) * s,
        angle: 0.0,
    };
    paint(&mut field, size, &body, TISSUE_HU);
    let lungs: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            cy: body.cy + rng.random_range(-0.02..0.02) * s,
            cx: body.cx + side * rng.random_range(0.18..0.21) * s,
            ry: rng.random_range(0.25..0.29) * s,
            rx: rng.random_range(0.13..0.16) * s,
            angle: side * rng.random_range(0.0..0.15),
        })
        .collect();
    for lung in &lungs {
        paint(&mut field, size, lung, LUNG_HU);
    }

    let n = rng.random_range(cfg.lesions.0..=cfg.lesions.1);
    let mut lesions = Vec::with_capacity(n);
    let mut mask = vec![0u8; size * size];
    for _ in 0..n {
        let lung = lungs[rng.random_range(0..2)];
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = rng.random_range(0.0..0.5f64).sqrt() * 0.7;
        let ry = rng.random_range(1.0 / 12.0..1.0 / 7.0) * s;
        let lesion = Ellipse {
            cy: lung.cy + rho * lung.ry * t.sin(),
            cx: lung.cx + rho * lung.rx * t.cos(),
            ry,
            rx: ry * rng.random_range(0.6..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let contrast = if cfg.contrast.0 == cfg.contrast.1 { cfg.contrast.0 } else { rng.random_range(cfg.contrast.0..cfg.contrast.1) };
        paint(&mut field, size, &lesion, LUNG_HU + contrast);
        for i in 0..size {
            for j in 0..size {
                if lesion.covers_pixel(i, j) {
                    mask[i * size + j] = 1;
                }
            }
        }
        lesions.push(lesion);
    }

    let blurred = gaussian_blur(&field, size, cfg.blur_sigma);
    let noise = Normal::new(0.0, cfg.noise_hu.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let pixels = blurred
        .iter()
        .map(|&v| {
            let n = if cfg.noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    Ok(Phantom { slice: RawSlice::new(id, size, size, pixels)?, mask, lesions })
}
