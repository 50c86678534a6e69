//! Python bindings: tensors, the segmentation network, phantoms, losses,
//! metrics and the gradient checker. Everything runs in double precision.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fudsa::data::{synth_phantom as synth, PhantomConfig, SamplePair, HI_HU, LO_HU};
use fudsa::gradcheck::{self, GradcheckConfig};
use fudsa::loss::LossConfig;
use fudsa::net::{dump_attention, Model, NetworkConfig};
use fudsa::train::{self, AdamConfig, AdamState, TrainConfig};
use fudsa::{checkpoint, ften, metrics, Shape, Tape, Tensor};

fn py_err(e: fudsa::Error) -> PyErr {
    match e {
        fudsa::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense `(N, C, H, W)` array of doubles.
#[pyclass(name = "Tensor", module = "fudsa_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        let shape = Shape::new(shape.0, shape.1, shape.2, shape.3).map_err(py_err)?;
        Ok(Self { inner: Tensor::new(shape, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        let shape = Shape::new(shape.0, shape.1, shape.2, shape.3).map_err(py_err)?;
        Ok(Self { inner: Tensor::zeros(shape) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ften::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        ften::save(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [n, c, h, w] = self.inner.shape().0;
        (n, c, h, w)
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape().0)
    }
}

fn pairs(images: &[PyRef<'_, PyTensor>], masks: &[PyRef<'_, PyTensor>]) -> PyResult<Vec<SamplePair<f64>>> {
    if images.len() != masks.len() {
        return Err(PyValueError::new_err(format!("{} images but {} masks", images.len(), masks.len())));
    }
    images
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(k, (x, y))| SamplePair::new(format!("item_{k}"), x.inner.clone(), y.inner.clone()).map_err(py_err))
        .collect()
}

/// The segmentation network.
#[pyclass(name = "Model", module = "fudsa_py")]
pub struct PyModel {
    inner: Model<f64>,
    state: AdamState<f64>,
}

#[pymethods]
impl PyModel {
    /// `variant` is `full`, `I`, `II` or `III`.
    #[new]
    #[pyo3(signature = (levels = 4, base_channels = 16, variant = "full", seed = 0))]
    fn new(levels: usize, base_channels: usize, variant: &str, seed: u64) -> PyResult<Self> {
        let variant = variant.parse().map_err(py_err)?;
        let cfg = NetworkConfig { levels, base_channels, variant, ..NetworkConfig::default() };
        let inner = Model::build(cfg, seed).map_err(py_err)?;
        let state = AdamState::new(&inner.params);
        Ok(Self { inner, state })
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.config().levels
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Final probability map.
    fn predict(&self, image: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor { inner: self.inner.predict(&image.inner).map_err(py_err)? })
    }

    /// Writes every level's channel weights and spatial gate as FTEN files;
    /// returns the paths.
    fn dump_attention(&self, image: &PyTensor, directory: &str) -> PyResult<Vec<String>> {
        let mut tape = Tape::new(&self.inner.params);
        let x = tape.constant(image.inner.clone());
        let out = self.inner.forward(&mut tape, x).map_err(py_err)?;
        let written = dump_attention(&tape, &out, directory).map_err(py_err)?;
        Ok(written.iter().map(|p| p.display().to_string()).collect())
    }

    /// Trains on the given pairs, validating on the same set, and returns the
    /// per-epoch training losses. The best epoch's parameters are kept.
    #[pyo3(signature = (images, masks, epochs, batch_size = 4, learning_rate = 1e-4, seed = 0))]
    fn fit(
        &mut self,
        images: Vec<PyRef<'_, PyTensor>>,
        masks: Vec<PyRef<'_, PyTensor>>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let set = pairs(&images, &masks)?;
        let cfg = TrainConfig {
            adam: AdamConfig { learning_rate, ..AdamConfig::default() },
            batch_size,
            max_epochs: epochs,
            patience: epochs.max(1),
            seed,
            ..TrainConfig::default()
        };
        let out = train::train(&mut self.inner, &set, &set, &cfg, Some(self.state.clone()), None).map_err(py_err)?;
        self.state = out.best.state;
        Ok(out.report.train_losses())
    }

    /// Pooled metrics and mean losses over the pairs.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        images: Vec<PyRef<'_, PyTensor>>,
        masks: Vec<PyRef<'_, PyTensor>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let set = pairs(&images, &masks)?;
        let e = train::evaluate(&self.inner, &set, &LossConfig::default(), 1).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("dsc", e.metrics.dsc)?;
        d.set_item("iou", e.metrics.iou)?;
        d.set_item("recall", e.metrics.recall)?;
        d.set_item("loss", e.loss)?;
        d.set_item("final_ftl", e.final_ftl)?;
        Ok(d)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(path, &self.inner.params, &self.state).map_err(py_err)
    }

    /// Loads parameters and optimizer state; the architecture must match.
    fn load(&mut self, path: &str) -> PyResult<()> {
        self.state = checkpoint::load_into(path, &mut self.inner.params).map_err(py_err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(levels={}, base_channels={}, variant={})", c.levels, c.base_channels, c.variant)
    }
}

/// Normalized phantom image and its binary mask.
#[pyfunction]
#[pyo3(signature = (seed, size = 64))]
fn synth_phantom(seed: u64, size: usize) -> PyResult<(PyTensor, PyTensor)> {
    let p = synth(format!("phantom_{seed}"), seed, size, &PhantomConfig::default()).map_err(py_err)?;
    let pair = p.pair::<f64>(LO_HU, HI_HU).map_err(py_err)?;
    Ok((PyTensor { inner: pair.image }, PyTensor { inner: pair.mask }))
}

/// DSC, IoU, recall and confusion counts of `pred >= 0.5` against `target`.
#[pyfunction]
fn segmentation_metrics<'py>(py: Python<'py>, pred: &PyTensor, target: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::segmentation_metrics(&pred.inner, &target.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("dsc", m.dsc)?;
    d.set_item("iou", m.iou)?;
    d.set_item("recall", m.recall)?;
    d.set_item("tp", m.counts.tp)?;
    d.set_item("fp", m.counts.fp)?;
    d.set_item("fn", m.counts.fn_)?;
    d.set_item("tn", m.counts.tn)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (pred, target, alpha = 0.7, beta = 0.3, gamma = 4.0 / 3.0, smooth = 1e-6))]
fn focal_tversky(pred: &PyTensor, target: &PyTensor, alpha: f64, beta: f64, gamma: f64, smooth: f64) -> PyResult<f64> {
    let cfg = LossConfig { alpha, beta, gamma, smooth, ..LossConfig::default() };
    cfg.validate().map_err(py_err)?;
    fudsa::loss::focal_tversky(&pred.inner, &target.inner, &cfg).map_err(py_err)
}

/// Runs the finite-difference gradient check; returns `(passed, max_error)`.
#[pyfunction]
#[pyo3(signature = (levels = 2, channels = 2, size = 16, seed = 0))]
fn gradient_check(levels: usize, channels: usize, size: usize, seed: u64) -> PyResult<(bool, f64)> {
    let cfg = GradcheckConfig {
        network: NetworkConfig { levels, base_channels: channels, ..NetworkConfig::default() },
        size,
        seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run::<f64>(&cfg).map_err(py_err)?;
    Ok((report.passed(), report.max_error()))
}

#[pymodule]
fn fudsa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(focal_tversky, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add("LO_HU", LO_HU)?;
    m.add("HI_HU", HI_HU)?;
    Ok(())
}
