//! Python module `escalate`: repositories, training, features and scoring.
//! Structured values cross the boundary as plain dicts and lists.

use std::fs;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use escalate_core::features::{build_training_set, standard_feature_names, FeatureExtractor, FeatureVector};
use escalate_core::forest::{self, deserialize_model, serialize_model, TrainConfig};
use escalate_core::ingestion::{generate_mock_repository, load_repository, serialize_repository, MockConfig};
use escalate_core::model::timestamp;
use escalate_core::scoring::{self, RiskSnapshot};
use escalate_core::{ForestModel, RepositorySnapshot, Timestamp};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_instant(s: Option<&str>, default: Timestamp) -> PyResult<Timestamp> {
    match s {
        Some(s) => timestamp::parse(s).map_err(PyValueError::new_err),
        None => Ok(default),
    }
}

#[pyclass(name = "Repository", module = "escalate", frozen)]
struct PyRepository {
    inner: RepositorySnapshot,
    rejected: usize,
}

#[pymethods]
impl PyRepository {
    /// Synthetic repository; identical arguments give identical tickets.
    #[staticmethod]
    #[pyo3(signature = (seed=42, customers=150, tickets=2000, rate=0.3, horizon_days=365))]
    fn generate(seed: u64, customers: usize, tickets: usize, rate: f64, horizon_days: u32) -> PyResult<Self> {
        let config = MockConfig {
            seed,
            n_customers: customers,
            n_tickets: tickets,
            horizon_days,
            base_escalation_rate: rate,
        };
        Ok(PyRepository {
            inner: generate_mock_repository(&config).map_err(value_err)?,
            rejected: 0,
        })
    }

    /// Loads a JSON Lines file; invalid lines are skipped and counted.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let report = load_repository(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyRepository {
            inner: report.snapshot,
            rejected: report.rejects.len(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let bytes = serialize_repository(&self.inner).map_err(value_err)?;
        fs::write(path, bytes).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Repository({} tickets from {})", self.inner.len(), self.inner.source)
    }

    #[getter]
    fn rejected(&self) -> usize {
        self.rejected
    }

    #[getter]
    fn loaded_at(&self) -> String {
        timestamp::format(&self.inner.loaded_at)
    }

    fn ticket_ids(&self) -> Vec<String> {
        self.inner.tickets.keys().cloned().collect()
    }

    fn open_ticket_ids(&self) -> Vec<String> {
        self.inner.open_tickets().map(|t| t.ticket_id.clone()).collect()
    }

    fn ticket<'py>(&self, py: Python<'py>, ticket_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let t = self.inner.get(ticket_id).ok_or_else(|| PyKeyError::new_err(ticket_id.to_string()))?;
        to_py(py, t)
    }
}

#[pyclass(name = "Model", module = "escalate", frozen)]
struct PyModel {
    inner: ForestModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyModel {
            inner: deserialize_model(&bytes).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        fs::write(path, serialize_model(&self.inner)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn model_version(&self) -> String {
        self.inner.model_version.clone()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    #[getter]
    fn feature_schema(&self) -> Vec<String> {
        self.inner.feature_schema.clone()
    }

    /// Escalation probability for a `{name: value}` mapping or the dict
    /// returned by `ticket_features`.
    fn predict(&self, features: &Bound<'_, PyDict>) -> PyResult<f64> {
        let values = match features.get_item("values")? {
            Some(inner) => inner.cast_into::<PyDict>()?,
            None => features.clone(),
        };
        let dense = self
            .inner
            .feature_schema
            .iter()
            .map(|name| match values.get_item(name)? {
                Some(v) => v.extract::<f64>(),
                None => Err(PyKeyError::new_err(name.clone())),
            })
            .collect::<PyResult<Vec<f64>>>()?;
        self.inner.predict_values(&dense).map_err(value_err)
    }

    fn feature_importance(&self) -> Vec<(String, f64)> {
        forest::feature_importance(&self.inner).into_iter().collect()
    }
}

/// Trains on every resolved ticket of `repo`.
#[pyfunction]
#[pyo3(signature = (repo, trees=100, depth=12, min_leaf=2, seed=42, parallel=true))]
fn train(py: Python<'_>, repo: &PyRepository, trees: usize, depth: usize, min_leaf: usize, seed: u64, parallel: bool) -> PyResult<PyModel> {
    let config = TrainConfig {
        n_trees: trees,
        max_depth: depth,
        min_samples_leaf: min_leaf,
        features_per_split: None,
        seed,
    };
    let snapshot = &repo.inner;
    let model = py.detach(|| {
        let vectors = build_training_set(snapshot).map_err(|e| e.to_string())?;
        let fit = if parallel { forest::train_forest } else { forest::train_forest_serial };
        fit(&vectors, &config).map_err(|e| e.to_string())
    });
    Ok(PyModel {
        inner: model.map_err(PyValueError::new_err)?,
    })
}

/// Feature vector of one ticket at `as_of` (default: the data horizon).
#[pyfunction]
#[pyo3(signature = (repo, ticket_id, as_of=None))]
fn ticket_features<'py>(py: Python<'py>, repo: &PyRepository, ticket_id: &str, as_of: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let ticket = repo.inner.get(ticket_id).ok_or_else(|| PyKeyError::new_err(ticket_id.to_string()))?;
    let as_of = parse_instant(as_of, repo.inner.loaded_at)?;
    let fv = FeatureExtractor::new(&repo.inner).ticket_features(ticket, as_of).map_err(value_err)?;
    to_py(py, &fv)
}

#[pyfunction]
fn feature_names() -> Vec<String> {
    standard_feature_names()
}

/// Heuristic risk for a dict returned by `ticket_features`.
#[pyfunction]
fn estimate_risk(features: &Bound<'_, PyAny>) -> PyResult<f64> {
    let fv: FeatureVector = from_py(features)?;
    Ok(scoring::estimate_risk(&fv))
}

/// Scores every open ticket. `history` is the list returned by a previous
/// call; it supplies previous_risk and delta.
#[pyfunction]
#[pyo3(signature = (model, repo, as_of=None, history=None))]
fn score_all<'py>(
    py: Python<'py>,
    model: &PyModel,
    repo: &PyRepository,
    as_of: Option<&str>,
    history: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let history: Vec<RiskSnapshot> = match history {
        Some(h) => from_py(h)?,
        None => Vec::new(),
    };
    let as_of = parse_instant(as_of, repo.inner.loaded_at)?;
    let batch = scoring::score_all(&model.inner, &repo.inner, &history, as_of).map_err(value_err)?;
    to_py(py, &batch)
}

#[pyfunction]
fn gini(labels: Vec<bool>) -> PyResult<f64> {
    forest::gini(&labels).map_err(value_err)
}

#[pymodule]
fn escalate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRepository>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ticket_features, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_risk, m)?)?;
    m.add_function(wrap_pyfunction!(score_all, m)?)?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    Ok(())
}
