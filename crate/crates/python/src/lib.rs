use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use graphdist_core::autodiff::Matrix;
use graphdist_core::config::RunConfig;
use graphdist_core::ged::{self, EditCostModel};
use graphdist_core::graph::{self, SynthParams};
use graphdist_core::head::DistanceMatrix;
use graphdist_core::model::GraphDistanceModel;
use graphdist_core::nearness::{self, FixingConfig, FixingRule};
use graphdist_core::{eval, pipeline, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows).map_err(to_py)
}

#[pyclass(name = "Graph", module = "graphdist", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: graph::GraphInstance,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (id, nodes, edges, attributes=None))]
    fn new(
        id: String,
        nodes: Vec<String>,
        edges: Vec<(usize, usize, f64)>,
        attributes: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Self> {
        let inner = graph::GraphInstance::new(id, nodes, edges, attributes).map_err(to_py)?;
        Ok(PyGraph { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.inner.nodes().to_vec()
    }

    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.inner.edges().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.node_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(id={:?}, nodes={}, edges={})",
            self.inner.id(),
            self.inner.node_count(),
            self.inner.edge_count()
        )
    }
}

#[pyclass(name = "Corpus", module = "graphdist")]
struct PyCorpus {
    inner: graph::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(graphs: Vec<PyGraph>) -> PyResult<Self> {
        let inner = graph::Corpus::new(graphs.into_iter().map(|g| g.inner).collect()).map_err(to_py)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (count=60, size_min=5, size_max=8, edge_prob=0.4, labels=0, seed=1))]
    fn synthetic(
        count: usize,
        size_min: usize,
        size_max: usize,
        edge_prob: f64,
        labels: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = SynthParams {
            count,
            size_min,
            size_max,
            edge_prob,
            labels,
            seed,
        };
        let inner = graph::generate_synthetic_corpus(&params).map_err(to_py)?;
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: graph::Corpus::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, index: usize) -> PyResult<PyGraph> {
        if index >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(index));
        }
        Ok(PyGraph {
            inner: self.inner.get(index).clone(),
        })
    }
}

#[pyclass(name = "Model", module = "graphdist")]
struct PyModel {
    inner: GraphDistanceModel,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint written by training (plus its `.json` metadata).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: GraphDistanceModel::load(path).map_err(to_py)?,
        })
    }

    /// Untrained model sized for `corpus`.
    #[staticmethod]
    #[pyo3(signature = (corpus, seed=1))]
    fn for_corpus(corpus: &PyCorpus, seed: u64) -> PyResult<Self> {
        let inner = GraphDistanceModel::for_corpus(Default::default(), &corpus.inner, seed).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    /// One representation vector per corpus graph.
    fn embed(&self, corpus: &PyCorpus) -> PyResult<Vec<Vec<f64>>> {
        let features = self.inner.features(&corpus.inner).map_err(to_py)?;
        self.inner.embed_all(&features).map_err(to_py)
    }

    fn distance(&self, z_i: Vec<f64>, z_j: Vec<f64>) -> PyResult<f64> {
        self.inner.distance(&z_i, &z_j).map_err(to_py)
    }

    fn distance_matrix(&self, corpus: &PyCorpus) -> PyResult<Vec<Vec<f64>>> {
        let z = self.embed(corpus)?;
        let d = self.inner.distance_matrix(corpus.inner.ids(), &z).map_err(to_py)?;
        Ok(d.values().to_rows())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.parameter_count()
    }
}

#[pyfunction]
#[pyo3(signature = (g1, g2, size_cap=ged::DEFAULT_SIZE_CAP))]
fn exact_ged(g1: &PyGraph, g2: &PyGraph, size_cap: usize) -> PyResult<f64> {
    ged::exact_ged(&g1.inner, &g2.inner, &EditCostModel::default(), size_cap).map_err(to_py)
}

#[pyfunction]
fn normalized_ground_truth(d: f64, n1: usize, n2: usize) -> PyResult<f64> {
    ged::normalized_ground_truth(d, n1, n2).map_err(to_py)
}

#[pyfunction]
fn spearman_rho(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman_rho(&a, &b).map_err(to_py)
}

#[pyfunction]
fn kendall_tau(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::kendall_tau(&a, &b).map_err(to_py)
}

#[pyfunction]
fn precision_at_k(pred: Vec<f64>, truth: Vec<f64>, k: usize) -> PyResult<f64> {
    eval::precision_at_k(&pred, &truth, k).map_err(to_py)
}

/// Violated triangles as `(i, j, k, magnitude)` with `(i, j)` the long side.
#[pyfunction]
#[pyo3(signature = (d, tol=0.0))]
fn triangle_violations(d: Vec<Vec<f64>>, tol: f64) -> PyResult<Vec<(usize, usize, usize, f64)>> {
    let v = nearness::triangle_violations(&matrix(d)?, tol).map_err(to_py)?;
    Ok(v.into_iter().map(|t| (t.i, t.j, t.k, t.magnitude)).collect())
}

/// Returns the repaired matrix and the number of sweeps.
#[pyfunction]
#[pyo3(signature = (d, epsilon=nearness::DEFAULT_EPSILON, max_sweeps=nearness::DEFAULT_MAX_SWEEPS, verbatim=false))]
fn triangle_fixing(d: Vec<Vec<f64>>, epsilon: f64, max_sweeps: usize, verbatim: bool) -> PyResult<(Vec<Vec<f64>>, usize)> {
    let config = FixingConfig {
        epsilon,
        max_sweeps,
        rule: if verbatim { FixingRule::Verbatim } else { FixingRule::Projection },
    };
    let out = nearness::triangle_fixing(&matrix(d)?, &config).map_err(to_py)?;
    Ok((out.matrix.to_rows(), out.sweeps))
}

#[pyfunction]
fn apsp_metric_repair(d: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(nearness::apsp_metric_repair(&matrix(d)?).map_err(to_py)?.to_rows())
}

/// Reads a distance-matrix CSV as `(ids, rows)`.
#[pyfunction]
fn load_distance_matrix(path: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let d = DistanceMatrix::load(path).map_err(to_py)?;
    Ok((d.ids().to_vec(), d.values().to_rows()))
}

/// Runs every stage into `out` and returns the headline metrics.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None))]
fn run_pipeline(py: Python<'_>, out: PathBuf, config: Option<String>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut cfg = match config {
        Some(text) => RunConfig::from_toml(&text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let summary = pipeline::run_pipeline(&cfg, &out).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("rho", summary.report.rho)?;
    d.set_item("tau", summary.report.tau)?;
    d.set_item("precision_at_k", summary.report.precision_at_k)?;
    d.set_item("k", summary.report.k)?;
    d.set_item("fixed_rho", summary.fixed_report.rho)?;
    d.set_item("violations_before", summary.fix.violations_before)?;
    d.set_item("violations_after", summary.fix.violations_after)?;
    d.set_item("best_epoch", summary.outcome.best_epoch)?;
    Ok(d.into_any().unbind())
}

#[pymodule]
fn graphdist(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(exact_ged, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(triangle_violations, m)?)?;
    m.add_function(wrap_pyfunction!(triangle_fixing, m)?)?;
    m.add_function(wrap_pyfunction!(apsp_metric_repair, m)?)?;
    m.add_function(wrap_pyfunction!(load_distance_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
