//! Python module `fpp`: presets, point evaluations and subcommand tables.

use std::collections::BTreeMap;

use fpp_core::cli_harness::{run_subcommand, Cell, Resolved, RunConfig, Subcommand, PRESETS};
use fpp_core::error::Error;
use fpp_core::portfolio::pi_approx;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Names of the built-in presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// A resolved run: built from a preset, a TOML document, or both (the
/// document overlays the preset).
#[pyclass(module = "fpp")]
struct Model {
    run: Resolved,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (preset=None, config=None, seed=None))]
    fn new(preset: Option<&str>, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match (preset, config) {
            (Some(p), None) => RunConfig::preset(p),
            (None, Some(text)) => RunConfig::from_toml(text),
            (Some(p), Some(text)) => RunConfig::from_toml(&format!("preset = \"{p}\"\n{text}")),
            (None, None) => Err(Error::Validation("give a preset or a config".into())),
        }
        .map_err(py_err)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Model {
            run: Resolved::new(cfg).map_err(py_err)?,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.run.config.label()
    }

    /// sha256 of the canonical config
    #[getter]
    fn config_hash(&self) -> String {
        self.run.hash()
    }

    #[getter]
    fn has_closed_form(&self) -> bool {
        self.run.benchmark.is_some()
    }

    /// Expansion terms at one state: `v0`, `v10`, `v01`, `v2` and `combined`.
    fn value(&self, t: f64, x: f64, y1: f64, y2: f64, delta: f64, epsilon: f64) -> PyResult<BTreeMap<&'static str, f64>> {
        let s = &self.run.surface;
        let r = s.approx_value(t, x, y1, y2, delta, epsilon).map_err(py_err)?;
        let v2 = s.v2_eval(t, x, y1, y2).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("v0", r.v0),
            ("v10", r.v10),
            ("v01", r.v01),
            ("v2", v2),
            ("combined", r.combined),
        ]))
    }

    /// Closed-form value, when the model has one.
    fn exact(&self, t: f64, x: f64, y1: f64, y2: f64, delta: f64, epsilon: f64) -> PyResult<f64> {
        let b = self
            .run
            .benchmark
            .as_ref()
            .ok_or_else(|| PyValueError::new_err(self.run.no_oracle.clone().unwrap_or_default()))?;
        b.exact(delta, epsilon)
            .and_then(|e| e.value(t, x, y1, y2))
            .map_err(py_err)
    }

    /// Approximate optimal holdings per asset, split into their parts.
    fn portfolio(
        &self,
        t: f64,
        x: f64,
        y1: f64,
        y2: f64,
        delta: f64,
        epsilon: f64,
    ) -> PyResult<BTreeMap<&'static str, Vec<f64>>> {
        let p = pi_approx(&self.run.surface, t, x, y1, y2, delta, epsilon).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("weights", p.weights),
            ("myopic", p.myopic),
            ("slow_hedge", p.slow_hedge),
            ("fast_hedge", p.fast_hedge),
            ("exposure", p.exposure),
        ]))
    }

    /// Run a subcommand and return `{table: {"columns": [...], "rows": [...]}}`.
    fn run<'py>(&self, py: Python<'py>, command: &str) -> PyResult<Bound<'py, PyDict>> {
        let cmd: Subcommand = command.parse().map_err(py_err)?;
        let report = run_subcommand(&self.run, cmd).map_err(py_err)?;
        let out = PyDict::new(py);
        for t in &report.tables {
            let rows = PyList::empty(py);
            for r in &t.rows {
                let row = PyList::empty(py);
                for c in r {
                    match c {
                        Cell::Num(v) => row.append(*v)?,
                        Cell::Int(i) => row.append(*i)?,
                        Cell::Text(s) => row.append(s)?,
                    }
                }
                rows.append(row)?;
            }
            let d = PyDict::new(py);
            d.set_item("columns", &t.columns)?;
            d.set_item("rows", rows)?;
            out.set_item(&t.name, d)?;
        }
        Ok(out)
    }
}

#[pymodule]
fn fpp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
