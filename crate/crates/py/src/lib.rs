//! Python bindings. Structured results cross the boundary as JSON strings so
//! the Python side needs nothing beyond the standard library.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use disac_core::fusion::Weighting;
use disac_core::harness::{self, Mode, PathSource};
use disac_core::scene::random_scene;
use disac_core::{DisacError, ScenarioConfig};

fn value_err(e: DisacError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn config(text: Option<&str>) -> PyResult<ScenarioConfig> {
    match text {
        Some(t) => ScenarioConfig::from_toml_str(t).map_err(value_err),
        None => Ok(ScenarioConfig::default()),
    }
}

fn weighting(name: &str) -> PyResult<Weighting> {
    match name {
        "gain" => Ok(Weighting::Gain),
        "uniform" => Ok(Weighting::Uniform),
        other => Err(PyValueError::new_err(format!("unknown weighting {other:?}, expected gain or uniform"))),
    }
}

fn source(ground_truth: bool) -> PathSource {
    if ground_truth {
        PathSource::GroundTruth
    } else {
        PathSource::Estimated
    }
}

/// Built-in scenario as a TOML document.
#[pyfunction]
fn default_config() -> String {
    ScenarioConfig::default().to_toml_string()
}

/// Samples a scene and returns it as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None))]
fn simulate_scene(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let scene = random_scene(&cfg, seed.unwrap_or(cfg.seed)).map_err(value_err)?;
    to_json(&scene)
}

/// One end-to-end trial, returned as a JSON object.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None, mode="disac", weighting="gain", ground_truth=false))]
fn run_trial(
    py: Python<'_>,
    config_toml: Option<&str>,
    seed: Option<u64>,
    mode: &str,
    weighting: &str,
    ground_truth: bool,
) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let mode: Mode = mode.parse().map_err(value_err)?;
    let w = self::weighting(weighting)?;
    let seed = seed.unwrap_or(cfg.seed);
    let r = py.detach(|| harness::run_trial_with(&cfg, seed, mode, w, source(ground_truth)));
    to_json(&r)
}

/// Repeated trials; returns the per-mode summaries as a JSON list.
#[pyfunction]
#[pyo3(signature = (trials, modes=vec!["disac".to_string()], config_toml=None, weighting="gain", ground_truth=false))]
fn run_montecarlo(
    py: Python<'_>,
    trials: usize,
    modes: Vec<String>,
    config_toml: Option<&str>,
    weighting: &str,
    ground_truth: bool,
) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let w = self::weighting(weighting)?;
    let modes = modes
        .iter()
        .map(|m| m.parse::<Mode>().map(|m| (m, w)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let report = py
        .detach(|| harness::run_montecarlo(&cfg, trials, &modes, source(ground_truth)))
        .map_err(value_err)?;
    to_json(&report.summaries)
}

/// Fraction of samples at or below `query`.
#[pyfunction]
fn empirical_cdf(samples: Vec<f64>, query: f64) -> PyResult<f64> {
    harness::empirical_cdf(&samples, query).map_err(value_err)
}

/// Inverse empirical CDF at `level` in [0, 1].
#[pyfunction]
fn percentile(samples: Vec<f64>, level: f64) -> PyResult<f64> {
    harness::percentile(&samples, level).map_err(value_err)
}

#[pymodule]
fn disac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_montecarlo, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    Ok(())
}
