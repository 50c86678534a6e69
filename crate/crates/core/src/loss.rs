//! Focal Tversky loss and its deep-supervision aggregate.
//!
//! Soft confusion counts over probabilities `p` and binary targets `y`:
//! `TP = sum(p*y)`, `FN = sum((1-p)*y)`, `FP = sum(p*(1-y))`. The Tversky
//! index is `TI = (TP + eps) / (TP + alpha*FN + beta*FP + eps)` and the loss is
//! `(1 - TI)^(1/gamma)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::ForwardOutputs;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How soft counts are pooled across a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// One index over all `N*H*W` pixels.
    #[default]
    Batch,
    /// One index per batch item; losses averaged.
    Image,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Batch => "batch",
            Pooling::Image => "image",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Pooling::Batch),
            "image" => Ok(Pooling::Image),
            other => Err(Error::arg(format!("unknown loss pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    pub gamma: f64,
    pub smooth: f64,
    /// Per-head weights, final head first. `None` means uniform.
    pub side_weights: Option<Vec<f64>>,
    pub pooling: Pooling,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
            smooth: 1e-6,
            side_weights: None,
            pooling: Pooling::Batch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::arg(format!("alpha + beta must equal 1, got {} + {}", self.alpha, self.beta)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::arg(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::arg(format!("smoothing term must be > 0, got {}", self.smooth)));
        }
        if let Some(w) = &self.side_weights {
            let total: f64 = w.iter().sum();
            if w.is_empty() || (total - 1.0).abs() > 1e-6 || w.iter().any(|&v| v < 0.0) {
                return Err(Error::arg(format!("head weights must be non-negative and sum to 1, got {w:?}")));
            }
        }
        Ok(())
    }

    /// Weights for `heads` loss heads (final head first).
    pub fn head_weights(&self, heads: usize) -> Result<Vec<f64>> {
        match &self.side_weights {
            None => Ok(vec![1.0 / heads as f64; heads]),
            Some(w) if w.len() == heads => Ok(w.clone()),
            Some(w) => Err(Error::arg(format!("{} head weights given for {heads} heads", w.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct SoftCounts {
    tp: f64,
    fn_: f64,
    fp: f64,
}

impl SoftCounts {
    fn of<T: Real>(p: &[T], y: &[T]) -> Self {
        let mut c = SoftCounts::default();
        for (&p, &y) in p.iter().zip(y) {
            let (p, y) = (p.as_f64(), y.as_f64());
            c.tp += p * y;
            c.fn_ += (1.0 - p) * y;
            c.fp += p * (1.0 - y);
        }
        c
    }

    fn index(&self, alpha: f64, beta: f64, eps: f64) -> f64 {
        (self.tp + eps) / (self.tp + alpha * self.fn_ + beta * self.fp + eps)
    }
}

pub(crate) fn check_pair<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", p.shape(), y.shape())));
    }
    if let Some(bad) = y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidLabel(format!("target value {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Batch-pooled Tversky index of `p` against `y`.
pub fn tversky_index<T: Real>(p: &Tensor<T>, y: &Tensor<T>, alpha: f64, beta: f64, eps: f64) -> Result<f64> {
    check_pair(p, y)?;
    Ok(SoftCounts::of(p.data(), y.data()).index(alpha, beta, eps))
}

fn focal(ti: f64, gamma: f64) -> f64 {
    let gap = 1.0 - ti;
    if gap < 0.0 {
        0.0
    } else {
        gap.powf(1.0 / gamma)
    }
}

/// `(1 - TI)^(1/gamma)` evaluated without a tape.
pub fn focal_tversky<T: Real>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_pair(p, y)?;
    Ok(ftl_forward(p, y, cfg))
}

fn groups<'a, T: Real>(p: &'a Tensor<T>, y: &'a Tensor<T>, pooling: Pooling) -> Vec<(&'a [T], &'a [T])> {
    match pooling {
        Pooling::Batch => vec![(p.data(), y.data())],
        Pooling::Image => {
            let per = p.len() / p.shape().n();
            p.data().chunks_exact(per).zip(y.data().chunks_exact(per)).collect()
        }
    }
}

pub(crate) fn ftl_forward<T: Real>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> f64 {
    let gs = groups(p, y, cfg.pooling);
    let total: f64 = gs
        .iter()
        .map(|(p, y)| focal(SoftCounts::of(p, y).index(cfg.alpha, cfg.beta, cfg.smooth), cfg.gamma))
        .sum();
    total / gs.len() as f64
}

/// d(loss)/dp, scaled by the upstream gradient `upstream`.
pub(crate) fn ftl_backward<T: Real>(p: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig, upstream: f64) -> Vec<T> {
    let gs = groups(p, y, cfg.pooling);
    let scale = upstream / gs.len() as f64;
    let (a, b, eps, g) = (cfg.alpha, cfg.beta, cfg.smooth, cfg.gamma);
    let mut out = Vec::with_capacity(p.len());
    for (pg, yg) in gs {
        let c = SoftCounts::of(pg, yg);
        let num = c.tp + eps;
        let den = c.tp + a * c.fn_ + b * c.fp + eps;
        let ti = num / den;
        let gap = 1.0 - ti;
        // the derivative of x^(1/g) blows up at x = 0; the boundary is only
        // reached by an exact fit, where the loss sits at its minimum.
        let dl_dti = if gap > 0.0 { -(1.0 / g) * gap.powf(1.0 / g - 1.0) } else { 0.0 };
        let k = scale * dl_dti / (den * den);
        out.extend(yg.iter().map(|&y| {
            let y = y.as_f64();
            T::of(k * (y * den - num * (y * (1.0 - a) + b * (1.0 - y))))
        }));
    }
    out
}

/// Weighted focal Tversky over the final map and every side map.
pub fn supervised_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    outputs: &ForwardOutputs,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let heads: Vec<Var> = std::iter::once(outputs.final_map).chain(outputs.side_maps.iter().copied()).collect();
    let weights = cfg.head_weights(heads.len())?;
    let mut total: Option<Var> = None;
    for (head, w) in heads.into_iter().zip(weights) {
        let l = tape.focal_tversky(head, target, cfg)?;
        let l = if w == 1.0 { l } else { tape.scale(l, w)? };
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least the final head"))
}
