//! Python bindings. Configs cross the boundary as JSON strings, vectors as
//! lists of floats.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmn::trainer::write_metrics_csv;
use mmn::{MmnError, ReRankConfig, SynthConfig, UnitVector};

fn to_py(e: MmnError) -> PyErr {
    match e {
        MmnError::Io(_) => PyOSError::new_err(e.to_string()),
        MmnError::Diverged(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn unit(v: Vec<f64>) -> PyResult<UnitVector> {
    mmn::core_math::l2_normalize(&v).map_err(to_py)
}

fn units(rows: Vec<Vec<f64>>) -> PyResult<Vec<UnitVector>> {
    rows.into_iter().map(unit).collect()
}

#[pyclass(name = "Dataset", module = "pymmn", frozen)]
struct PyDataset {
    inner: mmn::SynthDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn samples(&self) -> Vec<Vec<f64>> {
        self.inner.samples.clone()
    }

    #[getter]
    fn true_ids(&self) -> Vec<usize> {
        self.inner.true_ids.clone()
    }

    #[getter]
    fn camera_ids(&self) -> Vec<usize> {
        self.inner.camera_ids.clone()
    }

    #[getter]
    fn num_ids(&self) -> usize {
        self.inner.num_ids
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.inner.d_in()
    }
}

/// Generates `(source, target)`. `config_json` holds any subset of the
/// synthetic-data fields.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn generate(config_json: Option<&str>) -> PyResult<(PyDataset, PyDataset)> {
    let cfg: SynthConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthConfig::default(),
    };
    let (source, target) = mmn::generate(&cfg).map_err(to_py)?;
    Ok((PyDataset { inner: source }, PyDataset { inner: target }))
}

#[pyclass(name = "TrainConfig", module = "pymmn")]
struct PyTrainConfig {
    inner: mmn::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(s) => mmn::TrainConfig::from_json(s).map_err(to_py)?,
            None => mmn::TrainConfig::default(),
        };
        Ok(PyTrainConfig { inner })
    }

    /// Sets one of k, alpha2, lambda, beta, gamma.
    fn set_param(&mut self, name: &str, value: f64) -> PyResult<()> {
        self.inner.set_param(name, value).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn total_epochs(&self) -> usize {
        self.inner.schedule.total_epochs
    }

    #[setter]
    fn set_total_epochs(&mut self, epochs: usize) {
        self.inner.schedule.total_epochs = epochs;
    }

    #[getter]
    fn synth_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.synth).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "RunResult", module = "pymmn", frozen)]
struct PyRunResult {
    inner: mmn::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    /// One dict per epoch.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .metrics
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("rho", m.rho)?;
                d.set_item("lr", m.learning_rate)?;
                d.set_item("l_source", m.l_source)?;
                d.set_item("l_instance", m.l_instance)?;
                d.set_item("l_domain", m.l_domain)?;
                d.set_item("l_triplet", m.l_triplet)?;
                d.set_item("total", m.total)?;
                d.set_item("map", m.map)?;
                d.set_item("rank1", m.rank1)?;
                d.set_item("neighbor_precision", m.neighbor_precision)?;
                d.set_item("neighbor_precision_confuser", m.neighbor_precision_confuser)?;
                d.set_item("purity", m.purity)?;
                d.set_item("noise_fraction", m.noise_fraction)?;
                d.set_item("num_clusters", m.num_clusters)?;
                d.set_item("refreshed", m.refreshed)?;
                Ok(d)
            })
            .collect()
    }

    fn metrics_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &self.inner.metrics).map_err(to_py)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    fn checkpoint_json(&self) -> PyResult<String> {
        self.inner.checkpoint.to_json().map_err(to_py)
    }

    #[getter]
    fn final_map(&self) -> f64 {
        self.inner.final_metrics().map
    }
}

/// Trains one variant (baseline, i, i+p, i+d, full, full-unguided).
#[pyfunction]
fn train(
    py: Python<'_>,
    config: &PyTrainConfig,
    variant: &str,
    source: &PyDataset,
    target: &PyDataset,
) -> PyResult<PyRunResult> {
    let variant: mmn::Variant = variant.parse().map_err(to_py)?;
    let cfg = config.inner.clone();
    let result = py
        .detach(|| mmn::run(&cfg, variant, &source.inner, &target.inner))
        .map_err(to_py)?;
    Ok(PyRunResult { inner: result })
}

#[pyclass(name = "MemoryBank", module = "pymmn")]
struct PyMemoryBank {
    inner: mmn::MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    /// Zero-initialized bank; `level` is instance, part_upper, part_bottom or
    /// domain.
    #[new]
    fn new(level: &str, size: usize, dim: usize) -> PyResult<Self> {
        let level: mmn::Level = level.parse().map_err(to_py)?;
        Ok(PyMemoryBank {
            inner: mmn::MemoryBank::zeros(level, size, dim),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Softmax read probabilities; `f` is normalized first.
    #[pyo3(signature = (f, alpha1=0.05))]
    fn read(&self, f: Vec<f64>, alpha1: f64) -> PyResult<Vec<f64>> {
        let p = self.inner.read_probabilities(&unit(f)?, alpha1).map_err(to_py)?;
        Ok(p.into_inner())
    }

    fn write(&mut self, index: usize, f: Vec<f64>, rho: f64) -> PyResult<()> {
        self.inner.write_slot(index, &unit(f)?, rho).map_err(to_py)
    }

    fn slot(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.inner.len() {
            return Err(to_py(MmnError::IndexOutOfRange {
                index,
                len: self.inner.len(),
            }));
        }
        Ok(self.inner.slot(index).to_vec())
    }
}

/// k-reciprocal similarity matrix of the (normalized) feature rows.
#[pyfunction]
#[pyo3(signature = (features, k1=20, k2=6, lambda_r=0.3))]
fn build_similarity(features: Vec<Vec<f64>>, k1: usize, k2: usize, lambda_r: f64) -> PyResult<Vec<Vec<f64>>> {
    let cfg = ReRankConfig { k1, k2, lambda_r };
    let s = mmn::build_similarity(&units(features)?, &cfg).map_err(to_py)?;
    Ok((0..s.len()).map(|i| s.row(i).to_vec()).collect())
}

fn similarity(rows: &[Vec<f64>]) -> PyResult<mmn::SimilarityMatrix> {
    mmn::SimilarityMatrix::from_rows(rows).map_err(to_py)
}

/// Guided neighbor selection for `query`: `(indices, weights)`.
#[pyfunction]
#[pyo3(signature = (s, query, k, alpha2=2.0))]
fn select_neighbors(s: Vec<Vec<f64>>, query: usize, k: usize, alpha2: f64) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let s = similarity(&s)?;
    let sel = mmn::reorder_and_select(&s, query, k).map_err(to_py)?;
    let w = mmn::reciprocal_similarity::soft_weights(&s, query, &sel, alpha2);
    Ok((sel.indices, w))
}

/// Density clustering on `1 − S`; noise is labeled -1.
#[pyfunction]
#[pyo3(signature = (s, eps=0.6, min_cluster_size=4))]
fn cluster(s: Vec<Vec<f64>>, eps: f64, min_cluster_size: usize) -> PyResult<Vec<i64>> {
    let labeling = mmn::cluster(&similarity(&s)?, eps, min_cluster_size).map_err(to_py)?;
    Ok(labeling.labels().iter().map(|l| l.as_i64()).collect())
}

/// `(mAP, rank1)` of cosine retrieval.
#[pyfunction]
fn evaluate_retrieval(
    queries: Vec<Vec<f64>>,
    gallery: Vec<Vec<f64>>,
    query_ids: Vec<usize>,
    gallery_ids: Vec<usize>,
    query_cams: Vec<usize>,
    gallery_cams: Vec<usize>,
) -> PyResult<(f64, f64)> {
    let r = mmn::evaluate_retrieval(&queries, &gallery, &query_ids, &gallery_ids, &query_cams, &gallery_cams)
        .map_err(to_py)?;
    Ok((r.map, r.rank1))
}

/// Finite-difference check of every gradient; one dict per target.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=100))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, configs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let opts = mmn::gradcheck::GradcheckOptions {
        seed,
        configs,
        ..Default::default()
    };
    let reports = py.detach(|| mmn::gradcheck::check_all(&opts)).map_err(to_py)?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("target", r.target.name())?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("worst_config", r.worst_config)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn pymmn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(build_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(select_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
