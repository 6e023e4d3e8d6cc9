use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sppdense::autodiff::Graph;
use sppdense::data::CohortSpec;
use sppdense::eval::ConfusionMatrix;
use sppdense::models::{Backbone, ModelConfig, Preset};
use sppdense::nn::Mode;

fn to_py(e: sppdense::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

#[pyclass(name = "Tensor", module = "sppdense_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: sppdense::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        let inner = sppdense::Tensor::new(shape, data).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed=0, std=1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f32) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PyTensor {
            inner: sppdense::Tensor::randn(shape, std, &mut rng),
        }
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        let inner = sppdense::Tensor::from_bytes(bytes).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn parse_backbone(s: &str) -> PyResult<Backbone> {
    match s.to_ascii_lowercase().as_str() {
        "densenet" => Ok(Backbone::DenseNet),
        "resnet18" => Ok(Backbone::ResNet18),
        _ => Err(PyValueError::new_err(format!("unknown backbone {s:?}"))),
    }
}

#[pyclass(name = "Model", module = "sppdense_py")]
pub struct PyModel {
    inner: sppdense::models::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (backbone="densenet", use_se=true, use_spp=true, in_channels=2, input_size=None, paper=false, seed=0))]
    fn new(
        backbone: &str,
        use_se: bool,
        use_spp: bool,
        in_channels: usize,
        input_size: Option<usize>,
        paper: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let preset = if paper { Preset::Paper } else { Preset::Desk };
        let mut cfg = ModelConfig::preset(parse_backbone(backbone)?, preset).with_toggles(use_se, use_spp);
        cfg.in_channels = in_channels;
        if let Some(s) = input_size {
            cfg.input_size = s;
        }
        let inner = sppdense::models::Model::build(&cfg, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = sppdense::models::Model::load(&dir).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(to_py)
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.config().label()
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.store().param_names().to_vec()
    }

    /// Eval-mode logits, one per sample.
    fn logits(&self, x: &PyTensor) -> PyResult<Vec<f32>> {
        let (t, _) = self.inner.logits(&x.inner, Mode::Eval).map_err(to_py)?;
        Ok(t.into_data())
    }

    fn predict_proba(&self, x: &PyTensor) -> PyResult<Vec<f32>> {
        Ok(self.inner.predict_proba(&x.inner).map_err(to_py)?.into_data())
    }
}

/// Spatial pyramid max pooling of a `[B, C, H, W]` tensor.
#[pyfunction]
#[pyo3(signature = (x, bins=vec![1, 2, 4]))]
fn spp(x: &PyTensor, bins: Vec<usize>) -> PyResult<PyTensor> {
    let mut g = Graph::<f32>::new();
    let v = g.input(x.inner.clone());
    let y = g.spp(v, &bins).map_err(to_py)?;
    Ok(PyTensor {
        inner: g.value(y).clone(),
    })
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    sppdense::eval::auc_scores(&scores, &labels).map_err(to_py)
}

/// `(points, thresholds)` of the empirical ROC curve.
#[pyfunction]
fn roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(Vec<(f64, f64)>, Vec<f64>)> {
    let c = sppdense::eval::roc(&scores, &labels).map_err(to_py)?;
    Ok((c.points, c.thresholds))
}

#[pyfunction]
#[pyo3(signature = (tp, fp, tn, fn_))]
fn metrics<'py>(py: Python<'py>, tp: usize, fp: usize, tn: usize, fn_: usize) -> PyResult<Bound<'py, PyDict>> {
    let m = sppdense::eval::metrics(&ConfusionMatrix { tp, fp, tn, fn_ }).map_err(to_py)?;
    let d = PyDict::new(py);
    for (name, v) in sppdense::eval::METRIC_NAMES.iter().zip(m.values()) {
        d.set_item(*name, v)?;
    }
    Ok(d)
}

/// `(patient_id, label, n_slices)` for each generated patient.
#[pyfunction]
#[pyo3(signature = (n_resistant=97, n_sensitive=192, image_size=64, class_signal=1.0, seed=0))]
fn generate_cohort(
    n_resistant: usize,
    n_sensitive: usize,
    image_size: usize,
    class_signal: f64,
    seed: u64,
) -> PyResult<Vec<(String, String, usize)>> {
    let spec = CohortSpec {
        n_resistant,
        n_sensitive,
        image_size,
        class_signal,
        ..CohortSpec::desk(seed)
    };
    let records = sppdense::data::generate_cohort(&spec).map_err(to_py)?;
    Ok(records
        .into_iter()
        .map(|r| (r.patient_id, r.label.as_str().to_string(), r.slices.len()))
        .collect())
}

/// Runs the gradient audit; one dict per check.
#[pyfunction]
fn gradcheck<'py>(py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = sppdense::audit::gradcheck_suite(None).map_err(to_py)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("tol", r.tol)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// Runs the command line with `args` (without the program name) and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    sppdense::cli::run(std::iter::once("sppdense".to_string()).chain(args))
}

#[pymodule]
fn sppdense_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(spp, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
