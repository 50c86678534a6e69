//! Finite-difference verification of the reverse pass through the whole
//! network and its supervised loss.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{supervised_loss, LossConfig};
use crate::net::{Model, NetworkConfig};
use crate::real::Real;
use crate::tape::{BackwardFault, Tape};
use crate::tensor::{Init, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub network: NetworkConfig,
    pub size: usize,
    pub batch: usize,
    pub seed: u64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub samples_per_tensor: usize,
    /// Central-difference step; `None` picks 1e-6 for f64 and 1e-3 for f32.
    pub step: Option<f64>,
    /// Pass threshold on the error measure; `None` picks 1e-5 for f64 and
    /// 5e-2 for f32.
    pub tolerance: Option<f64>,
    pub loss: LossConfig,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig { levels: 3, base_channels: 4, ..NetworkConfig::default() },
            size: 32,
            batch: 2,
            seed: 0,
            samples_per_tensor: 20,
            step: None,
            tolerance: None,
            loss: LossConfig::default(),
            fault: None,
        }
    }
}

/// Gradient magnitude below which errors are measured absolutely. Central
/// differences of an O(1) loss carry roundoff near `machine_eps / step`,
/// which swamps any relative measure on smaller gradients.
pub fn error_floor<T: Real>() -> f64 {
    if T::DTYPE == 1 {
        1e-4
    } else {
        1e-2
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_error: f64,
    /// Flat index, analytic and numeric derivative at the worst coordinate.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub precision: &'static str,
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| !(t.max_error < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.offenders().next().is_none()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision {}, tolerance {:e}, loss {:.6}", self.precision, self.tolerance, self.loss)?;
        for t in &self.tensors {
            let mark = if t.max_error < self.tolerance { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<32} n={:<3} max_rel_err={:.3e}", t.name, t.checked, t.max_error)?;
        }
        write!(
            f,
            "{}: max relative error {:.3e} over {} tensors",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_error(),
            self.tensors.len()
        )
    }
}

fn loss_value<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let v = tape.constant(x.clone());
    let out = model.forward(&mut tape, v)?;
    let loss = supervised_loss(&mut tape, &out, y, cfg)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Random model, random input in `[0, 1]`, random blob target.
pub fn run<T: Real>(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.loss.validate()?;
    let mut model = Model::<T>::build(cfg.network.clone(), cfg.seed)?;
    jitter_biases(&mut model, cfg.seed + 5);
    let extents = [cfg.batch, cfg.network.input_channels, cfg.size, cfg.size];
    let x: Tensor<T> = Tensor::create(extents, Init::Uniform { lo: 0.0, hi: 1.0, seed: cfg.seed + 3 })?;
    let y = blob_target::<T>(cfg.batch, cfg.size, cfg.seed + 3)?;

    let (loss, analytic) = {
        let mut tape = Tape::new(&model.params);
        if let Some(fault) = cfg.fault {
            tape.inject_fault(fault);
        }
        let v = tape.constant(x.clone());
        let out = model.forward(&mut tape, v)?;
        let loss = supervised_loss(&mut tape, &out, &y, &cfg.loss)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = model
            .params
            .ids()
            .map(|id| match grads.param(id) {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; model.params.get(id).len()],
            })
            .collect();
        (tape.value(loss).data()[0].as_f64(), analytic)
    };

    let f64_mode = T::DTYPE == 1;
    let h = cfg.step.unwrap_or(if f64_mode { 1e-6 } else { 1e-3 });
    let tolerance = cfg.tolerance.unwrap_or(if f64_mode { 1e-5 } else { 5e-2 });
    let floor = error_floor::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 4);
    let ids: Vec<_> = model.params.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let len = grad.len();
        let coords: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck { name: model.params.name(id).to_string(), checked: coords.len(), max_error: 0.0, worst: (0, 0.0, 0.0) };
        for i in coords {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = T::of(orig.as_f64() + h);
            let up = loss_value(&model, &x, &y, &cfg.loss)?;
            model.params.get_mut(id).data_mut()[i] = T::of(orig.as_f64() - h);
            let down = loss_value(&model, &x, &y, &cfg.loss)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[i], numeric, floor);
            if !(err <= check.max_error) {
                check.max_error = err;
                check.worst = (i, grad[i], numeric);
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport { precision: T::NAME, tolerance, loss, tensors })
}

/// Zero biases put every pre-activation fed only by dead ReLU outputs exactly
/// on the kink, where the one-sided subgradient and a central difference
/// disagree by construction. Small random biases move them off it.
/// Residual projections start at zero, which would leave the gradient
/// reaching their inputs untested, so they get small weights as well.
fn jitter_biases<T: Real>(model: &mut Model<T>, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        if p.name.ends_with(".bias") || (p.name.contains(".proj") && p.tensor.data().iter().all(|v| *v == T::zero())) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::of(rng.random_range(-0.1..0.1)));
        }
    }
}

/// One filled ellipse per image, placed from `seed`.
fn blob_target<T: Real>(batch: usize, size: usize, seed: u64) -> Result<Tensor<T>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = Shape::new(batch, 1, size, size)?;
    let mut y = Tensor::zeros(shape);
    let s = size as f64;
    for n in 0..batch {
        let (cy, cx) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
        let (ry, rx) = (rng.random_range(0.1..0.25) * s, rng.random_range(0.1..0.25) * s);
        let plane = &mut y.data_mut()[n * size * size..(n + 1) * size * size];
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = ((i as f64 + 0.5 - cy) / ry, (j as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    plane[i * size + j] = T::one();
                }
            }
        }
    }
    Ok(y)
}
