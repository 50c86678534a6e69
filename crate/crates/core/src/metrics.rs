//! Overlap metrics on binarized predictions.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Probabilities at or above this are foreground.
pub const THRESHOLD: f64 = 0.5;

pub const CSV_HEADER: &str = "split,n_images,tp,fp,fn,tn,dsc,iou,recall";

/// Pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts `pred >= threshold` against a binary target.
    pub fn of<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
        }
        let t = T::of(threshold);
        let mut c = Confusion::default();
        for (&p, &y) in pred.data().iter().zip(target.data()) {
            let (p, y) = (p >= t, y >= t);
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&self) -> MetricsRecord {
        MetricsRecord::from_counts(*self)
    }
}

impl Add for Confusion {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub counts: Confusion,
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
}

/// `num / den`, with `0 / 0` read as a perfect score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsRecord {
    pub fn from_counts(c: Confusion) -> Self {
        Self {
            counts: c,
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            recall: ratio(c.tp, c.tp + c.fn_),
        }
    }

    /// One CSV row matching [`CSV_HEADER`].
    pub fn csv_row(&self, split: &str, n_images: usize) -> String {
        let c = &self.counts;
        format!(
            "{split},{n_images},{},{},{},{},{:.4},{:.4},{:.4}",
            c.tp, c.fp, c.fn_, c.tn, self.dsc, self.iou, self.recall
        )
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DSC {:.4}, IoU {:.4}, Recall {:.4}", self.dsc, self.iou, self.recall)
    }
}

/// Metrics of a probability map thresholded at [`THRESHOLD`] against a
/// binary target.
pub fn segmentation_metrics<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<MetricsRecord> {
    Ok(Confusion::of(pred, target, THRESHOLD)?.record())
}

/// `pred >= THRESHOLD` as 0/1 values.
pub fn binarize<T: Real>(pred: &Tensor<T>) -> Tensor<T> {
    let t = T::of(THRESHOLD);
    pred.map(|v| if v >= t { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn mask(bits: &[u8]) -> Tensor<f64> {
        Tensor::new(Shape::of(1, 1, 1, bits.len()), bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn perfect_and_disjoint() {
        let y = mask(&[1, 1, 0, 0]);
        let m = segmentation_metrics(&y, &y).unwrap();
        assert_eq!((m.dsc, m.iou, m.recall), (1.0, 1.0, 1.0));
        let m = segmentation_metrics(&mask(&[0, 0, 1, 1]), &y).unwrap();
        assert_eq!((m.dsc, m.iou, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_against_empty_is_perfect() {
        let z = mask(&[0, 0, 0]);
        let m = segmentation_metrics(&z, &z).unwrap();
        assert_eq!((m.dsc, m.iou, m.recall), (1.0, 1.0, 1.0));
        assert_eq!(m.counts.tn, 3);
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Tensor::new(Shape::of(1, 1, 1, 3), vec![0.5, 0.4999, 0.9]).unwrap();
        let c = Confusion::of(&p, &mask(&[1, 1, 0]), THRESHOLD).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 0 });
        assert_eq!(binarize(&p).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_uses_four_decimals() {
        let r = MetricsRecord { counts: Confusion { tp: 1, fp: 2, fn_: 3, tn: 4 }, dsc: 0.79243, iou: 0.66809, recall: 0.81036 };
        assert_eq!(r.csv_row("val", 2), "val,2,1,2,3,4,0.7924,0.6681,0.8104");
        assert_eq!(r.to_string(), "DSC 0.7924, IoU 0.6681, Recall 0.8104");
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(segmentation_metrics(&mask(&[1]), &mask(&[1, 0])), Err(Error::ShapeMismatch(_))));
    }
}
