//! Python bindings: models, alignment, interpolation metrics and the
//! Gaussian-blob training harness.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moe_rebasin::harness::{
    evaluator, encoded_loss, gen_blobs, train_sgd, DatasetSpec, Encoded, FrozenBackbone, TrainConfig,
};
use moe_rebasin::io::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use moe_rebasin::matching::{self, align_moe, MatchMethod};
use moe_rebasin::metrics::{
    brute_force_best_permutation, eval_curve, ratio_report, BarrierReport, InterpolationCurve,
};
use moe_rebasin::model::{self, MoEConfig, MoEParams, Variant};
use moe_rebasin::numerics::{stable_softmax, uniform_grid, Matrix, RngStream};
use moe_rebasin::symmetry::{apply_group, plant_equivalent, GroupElement, HiddenPerms, Permutation};
use moe_rebasin::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for moe_rebasin::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_method(method: &str) -> PyResult<MatchMethod> {
    method.parse().py()
}

fn model_config(
    variant: &str,
    experts: usize,
    dim: usize,
    hidden: usize,
    top_k: usize,
    shared: usize,
) -> PyResult<MoEConfig> {
    // `experts` counts gated experts; shared experts come on top.
    let config = match variant {
        "dense" => MoEConfig::dense(experts, dim, hidden),
        "sparse" => MoEConfig::sparse(experts, top_k, dim, hidden),
        "shared" => MoEConfig::shared(shared, experts, top_k, dim, hidden),
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    };
    config.validate().py()?;
    Ok(config)
}

fn perms_to_lists(hidden: &HiddenPerms) -> Vec<Vec<usize>> {
    hidden.perms.iter().map(|p| p.as_slice().to_vec()).collect()
}

/// A mixture-of-experts layer.
#[pyclass(name = "MoE", module = "moe_rebasin", frozen)]
struct PyMoE {
    params: MoEParams,
}

#[pymethods]
impl PyMoE {
    #[staticmethod]
    #[pyo3(signature = (variant, experts, dim, hidden, seed=0, top_k=2, shared=1, scale=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        variant: &str,
        experts: usize,
        dim: usize,
        hidden: usize,
        seed: u64,
        top_k: usize,
        shared: usize,
        scale: f64,
    ) -> PyResult<Self> {
        let config = model_config(variant, experts, dim, hidden, top_k, shared)?;
        let params = MoEParams::random(config, &mut RngStream::new(seed), scale).py()?;
        Ok(Self { params })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(path).py()?.params,
        })
    }

    #[pyo3(signature = (path, backbone_seed=0))]
    fn save(&self, path: &str, backbone_seed: u64) -> PyResult<()> {
        let ckpt = Checkpoint::new(self.params.clone(), backbone_seed, Provenance::default());
        save_checkpoint(path, &ckpt).py()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.params.config().variant.name()
    }

    /// Total expert count, shared experts included.
    #[getter]
    fn experts(&self) -> usize {
        self.params.config().experts
    }

    #[getter]
    fn gated_experts(&self) -> usize {
        self.params.config().gate_count()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.params.config().dim
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.config().hidden
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.params.forward(&x).py()
    }

    fn gate_scores(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        model::gate_scores(&x, self.params.gates()).py()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    fn with_flat(&self, flat: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            params: self.params.with_flat(&flat).py()?,
        })
    }

    /// Reorders gates and experts by `tau` and shifts every gate by `(c_w, c_b)`.
    #[pyo3(signature = (tau, c_w=None, c_b=0.0))]
    fn apply_group(&self, tau: Vec<usize>, c_w: Option<Vec<f64>>, c_b: f64) -> PyResult<Self> {
        let g = GroupElement {
            c_w: c_w.unwrap_or_else(|| vec![0.0; self.params.config().dim]),
            c_b,
            tau: Permutation::new(tau).py()?,
        };
        Ok(Self {
            params: apply_group(&self.params, &g).py()?,
        })
    }

    /// A functionally equivalent copy under a random symmetry.
    /// Returns `(model, tau, c_w, c_b, hidden_perms)`.
    #[pyo3(signature = (seed, translation_scale=1.0))]
    #[allow(clippy::type_complexity)]
    fn plant(&self, seed: u64, translation_scale: f64) -> PyResult<(Self, Vec<usize>, Vec<f64>, f64, Vec<Vec<usize>>)> {
        let planted = plant_equivalent(&self.params, &mut RngStream::new(seed), translation_scale).py()?;
        Ok((
            Self {
                params: planted.params,
            },
            planted.group.tau.as_slice().to_vec(),
            planted.group.c_w,
            planted.group.c_b,
            perms_to_lists(&planted.hidden),
        ))
    }

    /// Aligns `other` onto this model. Returns `(aligned_other, tau, hidden_perms)`.
    #[pyo3(signature = (other, method="gram"))]
    fn align(&self, other: &PyMoE, method: &str) -> PyResult<(Self, Vec<usize>, Vec<Vec<usize>>)> {
        let result = align_moe(&self.params, &other.params, parse_method(method)?).py()?;
        let aligned = result.apply(&other.params).py()?;
        Ok((
            Self { params: aligned },
            result.tau.as_slice().to_vec(),
            perms_to_lists(&result.hidden),
        ))
    }

    fn __eq__(&self, other: &PyMoE) -> bool {
        self.params == other.params
    }

    fn __repr__(&self) -> String {
        let c = self.params.config();
        format!("MoE({}, experts={}, dim={}, hidden={})", c.variant, c.experts, c.dim, c.hidden)
    }
}

/// Gaussian blobs pushed through a fixed random encoder, with a fixed readout
/// on top of the MoE layer.
#[pyclass(name = "Task", module = "moe_rebasin", frozen)]
struct PyTask {
    spec: DatasetSpec,
    backbone: FrozenBackbone,
    train: moe_rebasin::harness::Dataset,
    test: Encoded,
}

impl PyTask {
    fn check_dim(&self, m: &PyMoE) -> PyResult<()> {
        if m.params.config().dim != self.backbone.dim() {
            return Err(PyValueError::new_err(format!(
                "model dimension {} does not match task dimension {}",
                m.params.config().dim,
                self.backbone.dim()
            )));
        }
        Ok(())
    }

    fn curve(&self, a: &MoEParams, b: &MoEParams, grid: usize) -> PyResult<BarrierReport> {
        let ts = uniform_grid(grid).py()?;
        let curve = eval_curve(a, b, evaluator(&self.backbone, &self.test), &ts).py()?;
        BarrierReport::from_curve(curve).py()
    }
}

fn report_dict<'py>(py: Python<'py>, report: &BarrierReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let InterpolationCurve { ts, losses, accuracies } = &report.curve;
    d.set_item("ts", ts)?;
    d.set_item("losses", losses)?;
    d.set_item("accuracies", accuracies)?;
    d.set_item("loss_barrier", report.loss_barrier)?;
    d.set_item("loss_auc", report.loss_auc)?;
    d.set_item("acc_barrier", report.acc_barrier)?;
    d.set_item("acc_auc", report.acc_auc)?;
    Ok(d)
}

#[pymethods]
impl PyTask {
    #[new]
    #[pyo3(signature = (classes=4, samples_per_class=200, input_dim=16, noise=1.0, dataset_seed=0, backbone_seed=1, dim=8))]
    fn new(
        classes: usize,
        samples_per_class: usize,
        input_dim: usize,
        noise: f64,
        dataset_seed: u64,
        backbone_seed: u64,
        dim: usize,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            classes,
            samples_per_class,
            input_dim,
            noise_sigma: noise,
            seed: dataset_seed,
            ..DatasetSpec::default()
        };
        let split = gen_blobs(&spec).py()?;
        let backbone = FrozenBackbone::generate(backbone_seed, input_dim, dim, classes).py()?;
        let test = backbone.encode(&split.test).py()?;
        Ok(Self {
            spec,
            backbone,
            train: split.train,
            test,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.backbone.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.spec.classes
    }

    #[pyo3(signature = (variant="dense", experts=4, hidden=16, top_k=2, shared=1, seed=0, data_seed=0, steps=2000, lr=0.1, batch_size=32))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        py: Python<'_>,
        variant: &str,
        experts: usize,
        hidden: usize,
        top_k: usize,
        shared: usize,
        seed: u64,
        data_seed: u64,
        steps: usize,
        lr: f64,
        batch_size: usize,
    ) -> PyResult<PyMoE> {
        let config = model_config(variant, experts, self.backbone.dim(), hidden, top_k, shared)?;
        let train_config = TrainConfig {
            steps,
            batch_size,
            learning_rate: lr,
            init_seed: seed,
            data_order_seed: data_seed,
            ..TrainConfig::default()
        };
        let outcome = py
            .detach(|| train_sgd(&self.train, &self.backbone, &train_config, config))
            .py()?;
        Ok(PyMoE { params: outcome.params })
    }

    /// `(loss, accuracy)` on the held-out split.
    fn evaluate(&self, m: &PyMoE) -> PyResult<(f64, f64)> {
        self.check_dim(m)?;
        let stats = encoded_loss(&m.params, &self.backbone, &self.test).py()?;
        Ok((stats.loss, stats.accuracy))
    }

    /// Interpolation curve from `b` (t = 0) to `a` (t = 1) and its metrics.
    #[pyo3(signature = (a, b, grid=25))]
    fn barrier<'py>(&self, py: Python<'py>, a: &PyMoE, b: &PyMoE, grid: usize) -> PyResult<Bound<'py, PyDict>> {
        self.check_dim(a)?;
        let report = py.detach(|| self.curve(&a.params, &b.params, grid))?;
        report_dict(py, &report)
    }

    /// Naive and aligned barriers with their ratios (×100).
    #[pyo3(signature = (a, b, method="gram", grid=25))]
    fn compare<'py>(
        &self,
        py: Python<'py>,
        a: &PyMoE,
        b: &PyMoE,
        method: &str,
        grid: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_dim(a)?;
        let method = parse_method(method)?;
        let (naive, aligned) = py.detach(|| -> PyResult<_> {
            let result = align_moe(&a.params, &b.params, method).py()?;
            let b_aligned = result.apply(&b.params).py()?;
            Ok((self.curve(&a.params, &b.params, grid)?, self.curve(&a.params, &b_aligned, grid)?))
        })?;
        let ratios = ratio_report(&aligned, &naive).py()?;
        let d = PyDict::new(py);
        d.set_item("naive", report_dict(py, &naive)?)?;
        d.set_item("aligned", report_dict(py, &aligned)?)?;
        let r = PyDict::new(py);
        r.set_item("loss_barrier", ratios.loss_barrier)?;
        r.set_item("loss_auc", ratios.loss_auc)?;
        r.set_item("acc_barrier", ratios.acc_barrier)?;
        r.set_item("acc_auc", ratios.acc_auc)?;
        d.set_item("ratios", r)?;
        Ok(d)
    }

    /// Rank of the chosen expert ordering among all orderings.
    #[pyo3(signature = (a, b, method="gram", grid=25))]
    fn rank<'py>(
        &self,
        py: Python<'py>,
        a: &PyMoE,
        b: &PyMoE,
        method: &str,
        grid: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_dim(a)?;
        let method = parse_method(method)?;
        let report = py.detach(|| -> PyResult<_> {
            let tau = matching::match_expert_order(&a.params, &b.params, method).py()?;
            let ts = uniform_grid(grid).py()?;
            brute_force_best_permutation(&a.params, &b.params, evaluator(&self.backbone, &self.test), &ts, &tau)
                .py()
        })?;
        let d = PyDict::new(py);
        d.set_item("tau", report.chosen_tau.as_slice())?;
        d.set_item("rank", report.rank)?;
        d.set_item("l_hat", report.l_hat)?;
        d.set_item("chosen_barrier", report.chosen_barrier)?;
        d.set_item("l_top1", report.l_top1)?;
        d.set_item("l_naive", report.l_naive)?;
        d.set_item("top1_tau", report.top1_tau.as_slice())?;
        d.set_item("permutations", report.permutations.iter().map(|p| p.as_slice()).collect::<Vec<_>>())?;
        d.set_item("barriers", &report.barriers)?;
        Ok(d)
    }
}

#[pyfunction]
fn softmax(z: Vec<f64>) -> PyResult<Vec<f64>> {
    stable_softmax(&z).py()
}

#[pyfunction]
fn top_k_indices(z: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    model::top_k_indices(&z, k).py()
}

/// Minimum-cost assignment of a square cost matrix: `(perm, cost)`.
#[pyfunction]
fn solve_lap(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("cost matrix must be square"));
    }
    let matrix = Matrix::new(n, n, cost.into_iter().flatten().collect()).py()?;
    let a = matching::solve_lap(&matrix).py()?;
    Ok((a.perm.as_slice().to_vec(), a.cost))
}

#[pyfunction]
#[pyo3(signature = (a, b, method="gram"))]
fn match_experts(a: &PyMoE, b: &PyMoE, method: &str) -> PyResult<Vec<usize>> {
    let tau = matching::match_expert_order(&a.params, &b.params, parse_method(method)?).py()?;
    Ok(tau.as_slice().to_vec())
}

#[pyfunction]
fn variant_names() -> Vec<&'static str> {
    [Variant::Dense, Variant::Sparse { k: 1 }, Variant::Shared { shared: 1, top_k: 1 }]
        .iter()
        .map(Variant::name)
        .collect()
}

#[pymodule]
#[pyo3(name = "moe_rebasin")]
fn moe_rebasin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMoE>()?;
    m.add_class::<PyTask>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lap, m)?)?;
    m.add_function(wrap_pyfunction!(match_experts, m)?)?;
    m.add_function(wrap_pyfunction!(variant_names, m)?)?;
    Ok(())
}
