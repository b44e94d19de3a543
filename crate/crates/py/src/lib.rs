//! Python bindings for the nearnd core library.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use nearnd::fid::FeatureStats;
use nearnd::memory::MemoryMeta;
use nearnd::pipeline::{Overrides, Status};
use nearnd::sde::FidBand;
use nearnd::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Ingestion(_) | Error::Decode { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Area under the ROC curve, anomalous scores expected higher.
#[pyfunction]
fn auroc(scores_normal: Vec<f64>, scores_anomalous: Vec<f64>) -> PyResult<f64> {
    nearnd::eval::auroc(&scores_normal, &scores_anomalous).map_err(to_py)
}

/// Spearman rank correlation.
#[pyfunction]
fn rank_correlation(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    nearnd::eval::rank_correlation(&a, &b).map_err(to_py)
}

/// Mean of the `i` smallest values.
#[pyfunction]
fn bottom_i(per_class_auroc: Vec<f64>, i: usize) -> PyResult<f64> {
    nearnd::benchmark::bottom_i(&per_class_auroc, i).map_err(to_py)
}

/// Frechet distance between two Gaussians given as mean and covariance.
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = FeatureStats { mean: Array1::from(mean_a), cov: matrix(cov_a)?, count: 2 };
    let b = FeatureStats { mean: Array1::from(mean_b), cov: matrix(cov_b)?, count: 2 };
    nearnd::fid::frechet_distance(&a, &b).map_err(to_py)
}

/// Frechet distance between the Gaussians fitted to two sets of rows.
#[pyfunction]
fn frechet_distance_rows(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let sa = nearnd::fid::compute_stats(matrix(a)?.view()).map_err(to_py)?;
    let sb = nearnd::fid::compute_stats(matrix(b)?.view()).map_err(to_py)?;
    nearnd::fid::frechet_distance(&sa, &sb).map_err(to_py)
}

/// Embeddings of normal samples queried by k nearest neighbours.
#[pyclass(name = "MemoryBank", frozen)]
struct PyMemoryBank(nearnd::memory::MemoryBank);

#[pymethods]
impl PyMemoryBank {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        nearnd::memory::MemoryBank::new(matrix(rows)?, MemoryMeta::default()).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        nearnd::memory::MemoryBank::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn content_hash(&self) -> PyResult<String> {
        self.0.content_hash().map_err(to_py)
    }

    /// `(row, squared distance)` of the `k` nearest rows.
    fn nearest(&self, x: Vec<f64>, k: usize) -> PyResult<Vec<(usize, f64)>> {
        self.0.nearest(Array1::from(x).view(), k).map_err(to_py)
    }

    /// Sum of squared distances to the `k` nearest rows.
    #[pyo3(signature = (x, k = nearnd::memory::DEFAULT_K))]
    fn score(&self, x: Vec<f64>, k: usize) -> PyResult<f64> {
        nearnd::memory::novelty_score(Array1::from(x).view(), &self.0, k).map_err(to_py)
    }

    #[pyo3(signature = (rows, k = nearnd::memory::DEFAULT_K, normalize = false))]
    fn score_many(&self, rows: Vec<Vec<f64>>, k: usize, normalize: bool) -> PyResult<Vec<f64>> {
        let scorer = nearnd::memory::NoveltyScorer::new(self.0.clone(), k, normalize).map_err(to_py)?;
        Ok(scorer.score_embeddings(matrix(rows)?.view()).map_err(to_py)?.to_vec())
    }
}

/// Experiment run driven by a TOML config; each command returns
/// `(status, message)` with status `"ok"` or `"band_not_reached"`.
#[pyclass(name = "Pipeline", frozen)]
struct PyPipeline(nearnd::pipeline::Pipeline);

type Outcome = (String, String);

fn outcome(r: nearnd::Result<nearnd::pipeline::Summary>) -> PyResult<Outcome> {
    let s = r.map_err(to_py)?;
    let status = match s.status {
        Status::Ok => "ok",
        Status::BandNotReached => "band_not_reached",
    };
    Ok((status.to_string(), s.message))
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, seed = None, out = None, band = None, k = None))]
    fn new(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, band: Option<(f64, f64)>, k: Option<usize>) -> PyResult<Self> {
        let band = band.map(|(lo, hi)| FidBand::new(lo, hi)).transpose().map_err(to_py)?;
        let overrides = Overrides { seed, out, band, k };
        nearnd::pipeline::Pipeline::open(&config, &overrides).map(Self).map_err(to_py)
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.0.dir().to_path_buf()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.0.config_hash().to_string()
    }

    fn gen_train(&self, py: Python<'_>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.gen_train()))
    }

    #[pyo3(signature = (n = None, to = None))]
    fn gen_sample(&self, py: Python<'_>, n: Option<usize>, to: Option<PathBuf>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.gen_sample(n, to.as_deref())))
    }

    fn finetune(&self, py: Python<'_>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.finetune()))
    }

    fn build_memory(&self, py: Python<'_>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.build_memory()))
    }

    #[pyo3(signature = (input = None))]
    fn score(&self, py: Python<'_>, input: Option<PathBuf>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.score(input.as_deref())))
    }

    fn eval(&self, py: Python<'_>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.eval()))
    }

    fn closeness(&self, py: Python<'_>) -> PyResult<Outcome> {
        outcome(py.detach(|| self.0.closeness()))
    }
}

#[pymodule]
fn nearnd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(rank_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(bottom_i, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance_rows, m)?)?;
    m.add_class::<PyMemoryBank>()?;
    m.add_class::<PyPipeline>()?;
    m.add("DEFAULT_K", nearnd::memory::DEFAULT_K)?;
    Ok(())
}
