//! Python bindings. Structured results are returned as plain dicts and lists.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use enclip_core::corpus::ingest_text as core_ingest;
use enclip_core::evalkit::{self, ApDenominator, EvalConfig, SynthSpec};
use enclip_core::pipeline::PipelineConfig;
use enclip_core::{Comparator, TsneParams};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// Embedding stores of every checkpoint, ordered by epoch.
#[pyclass(frozen, module = "enclip")]
struct ModelSet {
    inner: enclip_core::ModelSet,
}

#[pymethods]
impl ModelSet {
    /// Opens a directory of `.encb` stores, or a list of store paths.
    #[new]
    fn new(stores: Bound<'_, PyAny>) -> PyResult<Self> {
        let inner = if let Ok(paths) = stores.extract::<Vec<PathBuf>>() {
            enclip_core::ModelSet::open(&paths)
        } else {
            let dir: PathBuf = stores.extract()?;
            if dir.is_dir() {
                enclip_core::ModelSet::open_dir(&dir)
            } else {
                enclip_core::ModelSet::open(&[dir])
            }
        }
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn z(&self) -> usize {
        self.inner.z()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn corpus_size(&self) -> usize {
        self.inner.corpus_size()
    }

    #[getter]
    fn model_ids(&self) -> Vec<String> {
        self.inner.models().iter().map(|m| m.model_id().to_string()).collect()
    }

    #[getter]
    fn epochs(&self) -> Vec<u32> {
        self.inner.models().iter().map(|m| m.epoch()).collect()
    }

    /// Embedding of `item_id` under `model_id`.
    fn vector(&self, model_id: &str, item_id: &str) -> PyResult<Vec<f32>> {
        let n = self
            .inner
            .index_of(model_id)
            .ok_or_else(|| value_err(format!("unknown model {model_id:?}")))?;
        self.inner
            .model(n)
            .vector_of(item_id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| value_err(format!("unknown item {item_id:?}")))
    }

    /// Plain cosine top-k under one checkpoint: list of (item_id, similarity).
    fn top_k(&self, py: Python<'_>, model_id: &str, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f64)>> {
        let n = self
            .inner
            .index_of(model_id)
            .ok_or_else(|| value_err(format!("unknown model {model_id:?}")))?;
        let hits = py
            .detach(|| enclip_core::cosine_topk(self.inner.model(n), &query, k))
            .map_err(value_err)?;
        Ok(hits.into_iter().map(|h| (h.item_id, h.similarity)).collect())
    }

    /// Ensemble search. `query_vectors` maps every model id to its query vector.
    #[pyo3(signature = (query_vectors, n=10, top_k_per_model=20, k_min=4, k_max=6, seed=0, comparator="freq_then_ws", include_diagnostics=false))]
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        py: Python<'_>,
        query_vectors: BTreeMap<String, Vec<f32>>,
        n: usize,
        top_k_per_model: usize,
        k_min: usize,
        k_max: usize,
        seed: u64,
        comparator: &str,
        include_diagnostics: bool,
    ) -> PyResult<Py<PyAny>> {
        if let Some(unknown) = query_vectors.keys().find(|id| self.inner.index_of(id).is_none()) {
            return Err(value_err(format!("unknown model id {unknown:?}")));
        }
        let ordered = self
            .inner
            .models()
            .iter()
            .map(|m| {
                query_vectors
                    .get(m.model_id())
                    .map(Vec::as_slice)
                    .ok_or_else(|| value_err(format!("missing query vector for {:?}", m.model_id())))
            })
            .collect::<PyResult<Vec<&[f32]>>>()?;
        let config = PipelineConfig {
            top_k_per_model,
            n,
            k_min,
            k_max,
            seed,
            comparator: parse::<Comparator>(comparator)?,
            ..PipelineConfig::default()
        };
        let mut result = py
            .detach(|| enclip_core::run_query(&self.inner, &ordered, &config))
            .map_err(value_err)?;
        if !include_diagnostics {
            result.diagnostics = None;
        }
        to_py(py, &result)
    }

    /// Evaluates the ensemble and every checkpoint on line-delimited query
    /// and relevance files. Queries must carry precomputed vectors.
    #[pyo3(signature = (queries, qrels, k=10, denominator="min", comparator="freq_then_ws", n=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        queries: PathBuf,
        qrels: PathBuf,
        k: usize,
        denominator: &str,
        comparator: &str,
        n: Option<usize>,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let queries = evalkit::read_queries(&queries).map_err(value_err)?;
        let qrels = evalkit::read_qrels(&qrels).map_err(value_err)?;
        let config = EvalConfig {
            k,
            denominator: parse::<ApDenominator>(denominator)?,
            pipeline: PipelineConfig {
                n: n.unwrap_or(k.max(10)),
                seed,
                comparator: parse::<Comparator>(comparator)?,
                ..PipelineConfig::default()
            },
        };
        let report = py
            .detach(|| evalkit::run_eval(&self.inner, &queries, &qrels, &config))
            .map_err(value_err)?;
        let table = report.table();
        let out = to_py(py, &report)?;
        out.bind(py).set_item("table", table)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSet(z={}, dim={}, corpus_size={}, models={:?})",
            self.inner.z(),
            self.inner.dim(),
            self.inner.corpus_size(),
            self.model_ids()
        )
    }
}

/// Converts a line-delimited text embedding file into a binary store.
#[pyfunction]
#[pyo3(signature = (input, out, model_id=None, epoch=None))]
fn ingest_text(input: PathBuf, out: PathBuf, model_id: Option<&str>, epoch: Option<u32>) -> PyResult<usize> {
    let m = core_ingest(&input, model_id, epoch).map_err(value_err)?;
    enclip_core::write_store(&m, &out).map_err(value_err)?;
    Ok(m.len())
}

/// Writes a synthetic multi-checkpoint fixture to `out`.
#[pyfunction]
#[pyo3(signature = (out, seed=0, items=2000, groups=20, models=5, dim=64, queries_per_group=5))]
fn synth(
    out: PathBuf,
    seed: u64,
    items: usize,
    groups: usize,
    models: usize,
    dim: usize,
    queries_per_group: usize,
) -> PyResult<()> {
    let spec = SynthSpec {
        items,
        groups,
        models,
        dim,
        queries_per_group,
        ..SynthSpec::default()
    };
    let fx = evalkit::synth_fixture(seed, &spec).map_err(value_err)?;
    evalkit::write_fixture(&fx, &out).map_err(value_err)
}

/// Epoch weighting of an occurrence vector.
#[pyfunction]
fn weighted_score(occurrence: Vec<bool>) -> f64 {
    enclip_core::weighted_score(&occurrence)
}

#[pyfunction]
fn precision_at_k(ranked: Vec<String>, relevant: HashSet<String>, k: usize) -> PyResult<f64> {
    evalkit::precision_at_k(&ranked, &relevant, k).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (ranked, relevant, k, denominator="min"))]
fn average_precision_at_k(ranked: Vec<String>, relevant: HashSet<String>, k: usize, denominator: &str) -> PyResult<f64> {
    evalkit::average_precision_at_k(&ranked, &relevant, k, parse(denominator)?).map_err(value_err)
}

#[pyfunction]
fn mean_average_precision(per_query: Vec<f64>) -> PyResult<f64> {
    evalkit::mean_average_precision(&per_query).map_err(value_err)
}

fn flatten(points: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(value_err("rows have different lengths"));
    }
    Ok((points.concat(), dim))
}

/// Exact t-SNE to two dimensions. Returns a list of (x, y).
#[pyfunction]
#[pyo3(signature = (points, perplexity=30.0, iterations=1000, seed=0))]
fn tsne_2d(py: Python<'_>, points: Vec<Vec<f64>>, perplexity: f64, iterations: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let (flat, dim) = flatten(&points)?;
    let params = TsneParams {
        perplexity,
        iterations,
        seed,
        ..TsneParams::default()
    };
    let proj = py.detach(|| enclip_core::tsne_2d(&flat, dim, &params)).map_err(value_err)?;
    Ok(proj.coords.into_iter().map(|[x, y]| (x, y)).collect())
}

#[pyfunction]
fn trustworthiness(high: Vec<Vec<f64>>, low: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let (h, hd) = flatten(&high)?;
    let (l, ld) = flatten(&low)?;
    enclip_core::trustworthiness(&h, hd, &l, ld, k).map_err(value_err)
}

/// Fits K-means for every K in range and keeps the best silhouette.
#[pyfunction]
#[pyo3(signature = (points, k_min=4, k_max=6, seed=0))]
fn select_k(py: Python<'_>, points: Vec<(f64, f64)>, k_min: usize, k_max: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let pts: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
    let sel = enclip_core::select_k(&pts, k_min, k_max, seed).map_err(value_err)?;
    to_py(py, &sel)
}

#[pymodule]
fn enclip(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelSet>()?;
    m.add_function(wrap_pyfunction!(ingest_text, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_score, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(tsne_2d, m)?)?;
    m.add_function(wrap_pyfunction!(trustworthiness, m)?)?;
    m.add_function(wrap_pyfunction!(select_k, m)?)?;
    Ok(())
}
