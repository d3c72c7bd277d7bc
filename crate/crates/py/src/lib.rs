//! Python module `emotcav`: pipeline stages, the oracle suite and the
//! statistics helpers. Reports and stage outputs cross the boundary as JSON
//! strings.

use std::path::PathBuf;

use emotcav::config::RunConfig;
use emotcav::pipeline;
use emotcav::tcav;
use emotcav::validate::{self, ValidateOptions};
use pyo3::exceptions::{
    PyArithmeticError, PyFileExistsError, PyFileNotFoundError, PyIOError, PyValueError,
};
use pyo3::prelude::*;

fn to_py(e: emotcav::Error) -> PyErr {
    use emotcav::Error as E;
    let msg = e.to_string();
    match e {
        E::Io { .. } | E::Format(_) | E::Integrity(_) | E::Json(_) => PyIOError::new_err(msg),
        E::Overwrite(_) => PyFileExistsError::new_err(msg),
        E::MissingArtifact { .. } => PyFileNotFoundError::new_err(msg),
        E::Divergence { .. } | E::NonFinite(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Staged pipeline bound to one configuration and output directory.
#[pyclass(module = "emotcav")]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    /// `config` is TOML text; `None` means defaults. `out_dir`, `seed` and
    /// `jobs` override the file.
    #[new]
    #[pyo3(signature = (config=None, out_dir=None, seed=None, jobs=None, force=false))]
    fn new(
        config: Option<&str>,
        out_dir: Option<PathBuf>,
        seed: Option<u64>,
        jobs: Option<usize>,
        force: bool,
    ) -> PyResult<Self> {
        let mut c = match config {
            Some(text) => RunConfig::parse(text).map_err(to_py)?,
            None => RunConfig::default(),
        };
        if let Some(o) = out_dir {
            c.out_dir = o;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(j) = jobs {
            c.jobs = j;
        }
        Ok(Self {
            inner: pipeline::Pipeline::new(c, force).map_err(to_py)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash().to_string()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out.clone()
    }

    /// Effective configuration as TOML.
    fn config_toml(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(to_py)
    }

    /// Returns (train videos, test videos).
    fn generate(&self, py: Python<'_>) -> PyResult<(usize, usize)> {
        let (a, b) = py.detach(|| self.inner.generate()).map_err(to_py)?;
        Ok((a.n_videos, b.n_videos))
    }

    /// Returns (train accuracy, test accuracy).
    fn train(&self, py: Python<'_>) -> PyResult<(f64, f64)> {
        let s = py.detach(|| self.inner.train()).map_err(to_py)?;
        Ok((s.train_accuracy, s.test_accuracy))
    }

    /// Concept name with positive and negative set sizes.
    fn build_concepts(&self, py: Python<'_>) -> PyResult<Vec<(String, usize, usize)>> {
        let sets = py.detach(|| self.inner.build_concepts()).map_err(to_py)?;
        Ok(sets
            .into_iter()
            .map(|c| (c.name, c.positive_ids.len(), c.negative_ids.len()))
            .collect())
    }

    /// Returns (proposed ensembles, random ensembles).
    fn train_cavs(&self, py: Python<'_>) -> PyResult<(usize, usize)> {
        let (p, r) = py.detach(|| self.inner.train_cavs()).map_err(to_py)?;
        Ok((p.len(), r.len()))
    }

    /// Score file as JSON.
    fn score(&self, py: Python<'_>) -> PyResult<String> {
        let s = py.detach(|| self.inner.score()).map_err(to_py)?;
        json(&s)
    }

    /// Verdict file as JSON.
    fn significance(&self, py: Python<'_>) -> PyResult<String> {
        let v = py.detach(|| self.inner.significance()).map_err(to_py)?;
        json(&v)
    }

    /// Report as JSON.
    fn report(&self, py: Python<'_>) -> PyResult<String> {
        let r = py.detach(|| self.inner.report()).map_err(to_py)?;
        r.to_json().map_err(to_py)
    }

    /// Everything downstream of a trained checkpoint; report as JSON.
    fn tcav(&self, py: Python<'_>) -> PyResult<String> {
        let r = py.detach(|| self.inner.tcav()).map_err(to_py)?;
        r.to_json().map_err(to_py)
    }

    /// Every stage; report as JSON.
    fn run(&self, py: Python<'_>) -> PyResult<String> {
        let r = py.detach(|| self.inner.run_all()).map_err(to_py)?;
        r.to_json().map_err(to_py)
    }
}

/// Default configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(to_py)
}

/// Quick oracle checks as (name, passed, detail) triples.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn validate_quick(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    let opts = ValidateOptions {
        seed,
        ..ValidateOptions::default()
    };
    py.detach(|| validate::quick_checks(&opts))
        .into_iter()
        .map(|r| (r.name, r.passed, r.detail))
        .collect()
}

/// Welch's unequal-variance t-test; returns (t, df, two-tailed p).
#[pyfunction]
fn welch_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let w = tcav::welch_t_test(&a, &b).map_err(to_py)?;
    Ok((w.t, w.df, w.p))
}

/// Fraction of strictly positive directional derivatives.
#[pyfunction]
fn score_from_derivatives(derivatives: Vec<f64>) -> PyResult<f64> {
    tcav::score_from_derivatives(&derivatives).map_err(to_py)
}

/// Rejections needed among `n` random comparisons.
#[pyfunction]
fn required_rejections(n: usize) -> usize {
    tcav::required_rejections(n)
}

#[pymodule]
#[pyo3(name = "emotcav")]
fn emotcav_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_quick, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(score_from_derivatives, m)?)?;
    m.add_function(wrap_pyfunction!(required_rejections, m)?)?;
    Ok(())
}
