//! Slice preprocessing: intensity windowing, resizing, lesion filtering and
//! the train/validation split, plus synthetic phantoms and on-disk datasets.

pub mod dataset;
pub mod pgm;
pub mod phantom;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{resize, UpsampleMode};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub use dataset::{Dataset, Manifest};
pub use pgm::Pgm;
pub use phantom::{synth_phantom, Ellipse, Phantom, PhantomConfig};

/// Default intensity window in Hounsfield units.
pub const LO_HU: f64 = -1000.0;
pub const HI_HU: f64 = 170.0;

/// Offset between stored 16-bit greymap samples and Hounsfield units.
pub const HU_OFFSET: i32 = 32768;

/// One CT slice in Hounsfield units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSlice {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<i16>,
}

impl RawSlice {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<i16>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(format!("{} pixels for a {height}x{width} slice", pixels.len())));
        }
        Ok(Self { id: id.into(), height, width, pixels })
    }

    /// 16-bit greymap with samples `HU + 32768`.
    pub fn to_pgm(&self) -> Pgm {
        let data = self.pixels.iter().map(|&v| (v as i32 + HU_OFFSET) as u16).collect();
        Pgm { width: self.width, height: self.height, maxval: 65535, data }
    }

    pub fn from_pgm(id: impl Into<String>, pgm: &Pgm) -> Self {
        let pixels = pgm.data.iter().map(|&v| (v as i32 - HU_OFFSET) as i16).collect();
        Self { id: id.into(), height: pgm.height, width: pgm.width, pixels }
    }
}

/// A normalized image and its binary mask, both `(1, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T: Real = crate::tensor::DefaultReal> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> SamplePair<T> {
    pub fn new(id: impl Into<String>, image: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let s = image.shape();
        if s != mask.shape() || s.n() != 1 || s.c() != 1 {
            return Err(Error::shape(format!("image {s:?} and mask {:?} must both be (1,1,H,W)", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::InvalidLabel("mask values must be 0 or 1".into()));
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape().h(), self.image.shape().w())
    }

    pub fn lesion_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == T::one()).count()
    }
}

/// Clips to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn window_and_normalize<T: Real>(raw: &RawSlice, lo_hu: f64, hi_hu: f64) -> Result<Tensor<T>> {
    if !(lo_hu < hi_hu) {
        return Err(Error::arg(format!("window [{lo_hu}, {hi_hu}] is empty")));
    }
    let span = hi_hu - lo_hu;
    let data = raw.pixels.iter().map(|&v| T::of((v as f64).clamp(lo_hu, hi_hu) - lo_hu) / T::of(span)).collect();
    Tensor::new(Shape::new(1, 1, raw.height, raw.width)?, data)
}

/// Binary mask from greymap samples; at least half of `maxval` is lesion.
pub fn mask_from_pgm<T: Real>(pgm: &Pgm) -> Result<Tensor<T>> {
    let half = pgm.maxval as u32;
    let data = pgm.data.iter().map(|&v| if 2 * v as u32 >= half { T::one() } else { T::zero() }).collect();
    Tensor::new(Shape::new(1, 1, pgm.height, pgm.width)?, data)
}

/// 8-bit greymap with lesion pixels at 255.
pub fn mask_to_pgm<T: Real>(mask: &Tensor<T>) -> Pgm {
    let s = mask.shape();
    let half = T::of(0.5);
    let data = mask.data().iter().map(|&v| if v >= half { 255 } else { 0 }).collect();
    Pgm { width: s.w(), height: s.h(), maxval: 255, data }
}

/// Checks a square working resolution against a network depth.
pub fn check_target_size(target: usize, levels: usize) -> Result<()> {
    let d = 1usize << levels;
    if target < 8 || target % d != 0 {
        return Err(Error::arg(format!("size {target} must be >= 8 and divisible by {d}")));
    }
    Ok(())
}

/// Resamples to `target x target`: bilinear for the image, nearest for the
/// mask. Pairs already at the target size pass through unchanged.
pub fn resize_pair<T: Real>(pair: SamplePair<T>, target: usize, levels: usize) -> Result<SamplePair<T>> {
    check_target_size(target, levels)?;
    if pair.size() == (target, target) {
        return Ok(pair);
    }
    let image = resize(&pair.image, target, target, UpsampleMode::Bilinear)?;
    let half = T::of(0.5);
    let mask = resize(&pair.mask, target, target, UpsampleMode::Nearest)?
        .map(|v| if v >= half { T::one() } else { T::zero() });
    Ok(SamplePair { id: pair.id, image, mask })
}

/// Keeps the pairs with at least one lesion pixel, in order.
pub fn filter_lesion_slices<T: Real>(pairs: Vec<SamplePair<T>>) -> Vec<SamplePair<T>> {
    pairs.into_iter().filter(|p| p.lesion_pixels() > 0).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Number of training items for `n` ids: `ceil(0.8 n)`, but always leaving
/// at least one for validation.
pub fn train_count(n: usize) -> usize {
    (4 * n).div_ceil(5).min(n - 1)
}

/// Seeded shuffle; the first [`train_count`] ids train.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitManifest> {
    if ids.len() < 2 {
        return Err(Error::arg(format!("need at least 2 ids to split, got {}", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_ids = order.split_off(train_count(ids.len()));
    Ok(SplitManifest { seed, train_ids: order, val_ids })
}

/// Stacks pairs into an `(N, 1, H, W)` image batch and mask batch.
pub fn stack_pairs<T: Real>(pairs: &[&SamplePair<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.image).collect();
    let masks: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.mask).collect();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(values: &[i16]) -> RawSlice {
        RawSlice::new("s", 1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let t: Tensor<f64> = window_and_normalize(&slice(&[-1000, 170, -2000, 3000, -415]), LO_HU, HI_HU).unwrap();
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.data()[4] - 0.5).abs() < 1e-15);
        assert!(window_and_normalize::<f64>(&slice(&[0]), 10.0, 10.0).is_err());
    }

    #[test]
    fn hu_survives_greymap_round_trip() {
        let raw = slice(&[i16::MIN, -1000, 0, 170, i16::MAX]);
        let pgm = raw.to_pgm();
        assert_eq!(pgm.data, vec![0, 31768, 32768, 32938, 65535]);
        let back = RawSlice::from_pgm("s", &Pgm::parse(&pgm.to_bytes()).unwrap());
        assert_eq!(back, raw);
    }

    fn pair(size: usize, image: impl Fn(usize, usize) -> f64, mask: impl Fn(usize, usize) -> bool) -> SamplePair<f64> {
        let img = (0..size * size).map(|k| image(k / size, k % size)).collect();
        let m = (0..size * size).map(|k| mask(k / size, k % size) as u8 as f64).collect();
        let s = Shape::of(1, 1, size, size);
        SamplePair::new("p", Tensor::new(s, img).unwrap(), Tensor::new(s, m).unwrap()).unwrap()
    }

    #[test]
    fn resize_identity_constant_and_checkerboard() {
        let p = pair(16, |i, j| (i * 16 + j) as f64 / 256.0, |i, j| (i + j) % 3 == 0);
        assert_eq!(resize_pair(p.clone(), 16, 2).unwrap(), p);

        let c = pair(8, |_, _| 0.3, |i, j| (i + j) % 2 == 0);
        let r = resize_pair(c, 16, 2).unwrap();
        assert!(r.image.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        for i in 0..16 {
            for j in 0..16 {
                let want = ((i / 2 + j / 2) % 2 == 0) as u8 as f64;
                assert_eq!(r.mask.at(0, 0, i, j), want);
            }
        }
        let down = resize_pair(pair(32, |i, _| i as f64, |i, _| i < 5), 16, 2).unwrap();
        assert!(down.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(matches!(resize_pair(p.clone(), 20, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(resize_pair(p, 4, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn filter_keeps_positive_slices_in_order() {
        let pairs: Vec<_> = (0..10)
            .map(|k| {
                let mut p = pair(4, |_, _| 0.0, |i, j| [1, 4, 5, 8].contains(&k) && i == 0 && j == 0);
                p.id = k.to_string();
                p
            })
            .collect();
        let kept: Vec<String> = filter_lesion_slices(pairs).into_iter().map(|p| p.id).collect();
        assert_eq!(kept, ["1", "4", "5", "8"]);
        let empty = vec![pair(4, |_, _| 0.0, |_, _| false); 3];
        assert!(filter_lesion_slices(empty).is_empty());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("id{k}")).collect()
    }

    #[test]
    fn split_sizes() {
        for (n, train) in [(10, 8), (5, 4), (2, 1), (3, 2), (4, 3), (200, 160)] {
            let m = split_dataset(&ids(n), 1).unwrap();
            assert_eq!((m.train_ids.len(), m.val_ids.len()), (train, n - train), "n={n}");
        }
        assert_eq!(split_dataset(&ids(10), 5).unwrap(), split_dataset(&ids(10), 5).unwrap());
        assert_ne!(split_dataset(&ids(10), 5).unwrap(), split_dataset(&ids(10), 6).unwrap());
        assert!(split_dataset(&ids(1), 0).is_err());
    }

    #[test]
    fn mask_greymap_round_trip() {
        let m = Tensor::<f32>::new(Shape::of(1, 1, 1, 4), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pgm = mask_to_pgm(&m);
        assert_eq!(pgm.data, vec![0, 255, 255, 0]);
        assert_eq!(mask_from_pgm::<f32>(&pgm).unwrap(), m);
    }
}
