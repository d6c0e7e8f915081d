//! Python bindings: tensors, the factorized projection layer, losses,
//! metrics, cost accounting, gradient checks and the training drivers.

use fastsfp_core::config::KvConfig;
use fastsfp_core::error::Error;
use fastsfp_core::metrics::{self, EvalRecord};
use fastsfp_core::siglip::{self, LossNorm};
use fastsfp_core::tensor::{self, Tensor};
use fastsfp_core::{gradcheck, optim, sfp, train};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn records(scores: &[f64], labels: &[bool]) -> PyResult<Vec<EvalRecord>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| EvalRecord::new(s, l))
        .collect())
}

/// Dense row-major `f64` tensor.
#[pyclass(name = "Tensor", module = "fastsfp")]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::from_rows(&rows).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: Tensor::zeros(&shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std = 1.0, seed = 0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: Tensor::random_normal(&shape, std, &mut rng),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn rows(&self) -> PyResult<Vec<Vec<f64>>> {
        let (r, _) = self.inner.dims2().map_err(err)?;
        Ok((0..r).map(|i| self.inner.row(i).to_vec()).collect())
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().reshape(&shape).map_err(err)?,
        })
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.matmul(&other.inner).map_err(err)?,
        })
    }

    fn transpose(&self) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.transpose().map_err(err)?,
        })
    }

    fn softmax(&self, axis: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.softmax(axis).map_err(err)?,
        })
    }

    fn l2_normalize(&self, axis: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.l2_normalize(axis).map_err(err)?,
        })
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Block tensor-train projection `R^in_dim → R^out_dim`.
#[pyclass(name = "SfpLayer", module = "fastsfp")]
#[derive(Clone)]
pub struct PySfpLayer {
    inner: sfp::SfpLayer,
}

#[pymethods]
impl PySfpLayer {
    #[staticmethod]
    #[pyo3(signature = (in_dim, out_dim, rank, seed = 0))]
    fn random(in_dim: usize, out_dim: usize, rank: usize, seed: u64) -> PyResult<Self> {
        let config = sfp::SfpConfig::new(in_dim, out_dim, rank).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: sfp::SfpLayer::random(config, &mut rng).map_err(err)?,
        })
    }

    /// Initializes from a dense `out_dim × in_dim` weight by per-block truncated SVD.
    #[staticmethod]
    fn from_dense(weight: &PyTensor, rank: usize) -> PyResult<Self> {
        let (out_dim, in_dim) = weight.inner.dims2().map_err(err)?;
        let config = sfp::SfpConfig::new(in_dim, out_dim, rank).map_err(err)?;
        Ok(Self {
            inner: sfp::svd_init(&weight.inner, &config).map_err(err)?,
        })
    }

    #[staticmethod]
    fn decode(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: sfp::SfpLayer::decode(bytes).map_err(err)?,
        })
    }

    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encode())
    }

    #[getter]
    fn in_dim(&self) -> usize {
        self.inner.config().in_dim
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.inner.config().out_dim
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.config().rank
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.inner.config().blocks
    }

    /// `(d1, d2)` with `d1 · d2 = out_dim`.
    #[getter]
    fn factors(&self) -> (usize, usize) {
        (self.inner.config().d1, self.inner.config().d2)
    }

    #[getter]
    fn stored_len(&self) -> usize {
        self.inner.stored_len()
    }

    /// Accepts a vector of length `in_dim` or a `B × in_dim` batch.
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        let y = if x.inner.ndim() == 2 {
            self.inner.forward_batched(&x.inner)
        } else {
            self.inner.forward(&x.inner)
        };
        Ok(PyTensor {
            inner: y.map_err(err)?,
        })
    }

    /// The equivalent dense `out_dim × in_dim` weight.
    fn to_dense(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.contract_to_dense(),
        }
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "SfpLayer(in_dim={}, out_dim={}, rank={}, blocks={})",
            c.in_dim, c.out_dim, c.rank, c.blocks
        )
    }
}

/// `{"exact", "nominal", "dense", "relative_to_dense", "within_bound"}` for one rank.
#[pyfunction]
fn accounting<'py>(
    py: Python<'py>,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let config = sfp::SfpConfig::new(in_dim, out_dim, rank).map_err(err)?;
    let params = sfp::param_count(&config);
    let flops = sfp::flops_estimate(&config);
    let d = PyDict::new(py);
    d.set_item("exact", params.exact)?;
    d.set_item("nominal", params.nominal)?;
    d.set_item("dense", sfp::dense_param_count(in_dim, out_dim))?;
    d.set_item("relative_to_dense", flops.relative_to_dense)?;
    d.set_item("within_bound", sfp::within_efficiency_bound(rank, out_dim))?;
    Ok(d)
}

#[pyfunction]
fn efficiency_bound(out_dim: usize) -> f64 {
    sfp::efficiency_bound(out_dim)
}

#[pyfunction]
fn mup_scale_lr(eta_base: f64, d_in: u64, blocks: u64, rank: u64) -> PyResult<f64> {
    optim::mup_scale_lr(eta_base, d_in, blocks, rank).map_err(err)
}

#[pyfunction]
fn width_scaled_lr(lr: f64, width: usize) -> f64 {
    train::width_scaled_lr(lr, width)
}

#[pyfunction]
fn block_singular_values(weight: &PyTensor, rank: usize) -> PyResult<Vec<Vec<f64>>> {
    let (out_dim, in_dim) = weight.inner.dims2().map_err(err)?;
    let config = sfp::SfpConfig::new(in_dim, out_dim, rank).map_err(err)?;
    sfp::block_singular_values(&weight.inner, &config).map_err(err)
}

/// Sigmoid pairwise loss over a `B × B` logit matrix; `norm` is `batch` or `pairs`.
#[pyfunction]
#[pyo3(signature = (logits, norm = "batch"))]
fn siglip_loss(logits: &PyTensor, norm: &str) -> PyResult<f64> {
    let norm: LossNorm = parse(norm)?;
    siglip::siglip_loss_with(&logits.inner, norm).map_err(err)
}

/// Mean diagonal and mean off-diagonal logit.
#[pyfunction]
fn pair_similarity(logits: &PyTensor) -> PyResult<(f64, f64)> {
    siglip::pair_similarity(&logits.inner).map_err(err)
}

#[pyfunction]
fn fr_loss(teacher: &PyTensor, student: &PyTensor) -> PyResult<f64> {
    fastsfp_core::fast::loss_fr(&teacher.inner, &student.inner).map_err(err)
}

#[pyfunction]
fn mse(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    tensor::mse(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&records(&scores, &labels)?).map_err(err)
}

#[pyfunction]
fn weighted_f1(preds: Vec<bool>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::weighted_f1(&preds, &labels).map_err(err)
}

#[pyfunction]
fn accuracy(preds: Vec<bool>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::accuracy(&preds, &labels).map_err(err)
}

/// `(tau, j)` maximizing `TPR − FPR`.
#[pyfunction]
fn youden_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64)> {
    let t = metrics::youden_threshold(&records(&scores, &labels)?).map_err(err)?;
    Ok((t.tau, t.j))
}

/// `[(suite, seeds, max_rel_error, passed)]`; all suites when `suites` is omitted.
#[pyfunction]
#[pyo3(signature = (seeds = gradcheck::DEFAULT_SEEDS, suites = None))]
fn grad_check(
    py: Python<'_>,
    seeds: usize,
    suites: Option<Vec<String>>,
) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let suites: Vec<gradcheck::Suite> = match suites {
        Some(names) => names.iter().map(|s| parse(s)).collect::<PyResult<_>>()?,
        None => gradcheck::Suite::ALL.to_vec(),
    };
    let report = py
        .detach(|| gradcheck::run_suites(&suites, seeds, 0))
        .map_err(err)?;
    Ok(report
        .suites
        .into_iter()
        .map(|s| (s.suite.to_string(), s.seeds, s.max_rel_error, s.passed))
        .collect())
}

/// Parses `key = value` text into a dict of strings.
#[pyfunction]
fn parse_config<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let kv = KvConfig::parse(text).map_err(err)?;
    let d = PyDict::new(py);
    for k in kv.keys() {
        d.set_item(k, kv.get_raw(k))?;
    }
    Ok(d)
}

fn run_config(
    strategy: &str,
    seed: u64,
    epochs: Option<usize>,
    n_volumes: Option<usize>,
    ablation: bool,
) -> PyResult<train::RunConfig> {
    let strategy: train::Strategy = parse(strategy)?;
    let mut cfg = if ablation {
        train::RunConfig::ablation(strategy, seed)
    } else {
        train::RunConfig {
            strategy,
            seed,
            ..Default::default()
        }
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(n) = n_volumes {
        cfg.n_volumes = n;
    }
    Ok(cfg)
}

/// Distills one student; returns the per-epoch history as CSV text.
#[pyfunction]
#[pyo3(signature = (strategy = "fast_full", seed = 0, epochs = None, n_volumes = None))]
fn distill(
    py: Python<'_>,
    strategy: &str,
    seed: u64,
    epochs: Option<usize>,
    n_volumes: Option<usize>,
) -> PyResult<String> {
    let cfg = run_config(strategy, seed, epochs, n_volumes, false)?;
    let out = py.detach(|| train::run_distillation(&cfg)).map_err(err)?;
    Ok(train::distill_csv(&out.history))
}

/// Runs all five strategies on shared data; returns the summary CSV text.
#[pyfunction]
#[pyo3(signature = (seed = 0, epochs = None, n_volumes = None))]
fn ablation(
    py: Python<'_>,
    seed: u64,
    epochs: Option<usize>,
    n_volumes: Option<usize>,
) -> PyResult<String> {
    let cfg = run_config("fast_full", seed, epochs, n_volumes, true)?;
    let runs = py.detach(|| train::run_ablation(&cfg)).map_err(err)?;
    Ok(train::ablation_summary_csv(&runs))
}

#[pymodule]
fn fastsfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySfpLayer>()?;
    m.add("GRAD_TOL", gradcheck::GRAD_TOL)?;
    m.add_function(wrap_pyfunction!(accounting, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_bound, m)?)?;
    m.add_function(wrap_pyfunction!(mup_scale_lr, m)?)?;
    m.add_function(wrap_pyfunction!(width_scaled_lr, m)?)?;
    m.add_function(wrap_pyfunction!(block_singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(siglip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pair_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(fr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(youden_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    Ok(())
}
