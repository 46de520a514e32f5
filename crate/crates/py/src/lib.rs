//! Python bindings for `xigen`. Structured results cross the boundary as
//! JSON strings or plain tuples/lists.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use xigen::ewens::{self, AlleleConfiguration};
use xigen::experiments::{self, ExperimentSpec, TheoremCheck};
use xigen::simulator::{self, Event, MarkedGenealogy, StopRule};
use xigen::speed::{comes_down_check, SpeedSolver};
use xigen::statistics;
use xigen::{CoalescentMeasure, MeasureDescription, PsiEvaluator, PsiVariant};

create_exception!(pyxigen, XigenError, PyValueError);

fn err(e: xigen::Error) -> PyErr {
    XigenError::new_err(format!("{}: {e}", e.kind()))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// A validated driving measure.
///
/// `Measure("beta:1.5")`, `Measure("kingman")`, or a TOML/JSON description.
#[pyclass(name = "Measure", module = "pyxigen", frozen)]
struct PyMeasure {
    psi: Arc<PsiEvaluator>,
}

impl PyMeasure {
    fn inner(&self) -> &CoalescentMeasure {
        self.psi.measure()
    }
}

#[pymethods]
impl PyMeasure {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let desc = if spec.contains('=') || spec.trim_start().starts_with('{') {
            MeasureDescription::parse(spec)
        } else {
            MeasureDescription::from_shorthand(spec)
        }
        .map_err(err)?;
        let m = xigen::validate_measure(&desc).map_err(err)?;
        Ok(PyMeasure {
            psi: Arc::new(PsiEvaluator::new(m)),
        })
    }

    /// JSON description of the measure.
    fn description(&self) -> String {
        to_json(&self.inner().to_description())
    }

    fn kingman_mass(&self) -> f64 {
        self.inner().kingman_mass()
    }

    fn is_lambda(&self) -> bool {
        self.inner().is_lambda()
    }

    #[pyo3(signature = (q, bar = false))]
    fn psi(&self, q: f64, bar: bool) -> PyResult<f64> {
        let variant = if bar { PsiVariant::Bar } else { PsiVariant::Standard };
        self.psi.psi(q, variant).map_err(err)
    }

    /// `(value, infinite)`
    fn regularity(&self) -> (f64, bool) {
        let r = self.inner().regularity_integral();
        (r.value, r.infinite)
    }

    /// `[λ_{b,2}, ..., λ_{b,b}]`
    fn merger_rates(&self, b: usize) -> PyResult<Vec<f64>> {
        Ok(xigen::merger_rates(self.inner(), b).map_err(err)?.by_k)
    }

    /// JSON verdict of the coming-down check.
    fn comes_down(&self) -> PyResult<String> {
        Ok(to_json(&comes_down_check(self.inner()).map_err(err)?))
    }

    fn v(&self, n: u64, t: f64) -> PyResult<f64> {
        SpeedSolver::new(self.psi.clone(), n)
            .and_then(|s| s.v_of_t(t))
            .map_err(err)
    }

    /// ℓ(n), or ℓ_t(n) when `t` is given.
    #[pyo3(signature = (n, t = None))]
    fn ell(&self, n: u64, t: Option<f64>) -> PyResult<f64> {
        SpeedSolver::new(self.psi.clone(), n)
            .and_then(|s| s.ell(t))
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Measure({})", self.description())
    }
}

#[pyclass(name = "Genealogy", module = "pyxigen", frozen)]
struct PyGenealogy {
    g: MarkedGenealogy,
}

#[pymethods]
impl PyGenealogy {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyGenealogy {
            g: MarkedGenealogy::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.g.to_json()
    }

    #[getter]
    fn n(&self) -> u32 {
        self.g.n()
    }

    #[getter]
    fn tau(&self) -> Option<f64> {
        self.g.tau()
    }

    #[getter]
    fn tau_star(&self) -> Option<f64> {
        self.g.tau_star()
    }

    #[getter]
    fn end(&self) -> f64 {
        self.g.end()
    }

    /// `(N, N^o, M, M^o, length)` at time `t`.
    fn counts_at(&self, t: f64) -> (u32, u32, u32, u32, f64) {
        let p = statistics::trajectories(&self.g).at(t);
        (p.n, p.n_open, p.m, p.m_open, p.length)
    }

    fn leaf_partition_at(&self, t: f64) -> Vec<Vec<u32>> {
        self.g.leaf_partition_at(t)
    }

    /// Allelic type per leaf, 0 for the ancestral type.
    fn allelic_types(&self) -> Vec<u32> {
        statistics::allelic_types(&self.g)
    }

    /// Sites families, allele partition and spectra as JSON.
    fn families(&self) -> String {
        to_json(&statistics::family_decomposition(&self.g))
    }

    fn __repr__(&self) -> String {
        format!("Genealogy(n={}, events={})", self.g.n(), self.g.events().len())
    }
}

/// `stop` is `tau`, `tau-star`, `time=T` or `blocks=B`.
#[pyfunction]
#[pyo3(signature = (measure, n, gamma, seed, stop = "tau"))]
fn simulate(
    py: Python<'_>,
    measure: &PyMeasure,
    n: u32,
    gamma: f64,
    seed: u64,
    stop: &str,
) -> PyResult<PyGenealogy> {
    let stop: StopRule = stop.parse().map_err(err)?;
    let m = measure.inner().clone();
    let g = py
        .detach(|| simulator::simulate(&m, n, gamma, seed, stop))
        .map_err(err)?;
    Ok(PyGenealogy { g })
}

/// Build a genealogy from a JSON list of events.
#[pyfunction]
fn replay(events_json: &str, n: u32) -> PyResult<PyGenealogy> {
    let events: Vec<Event> = serde_json::from_str(events_json)
        .map_err(|e| XigenError::new_err(format!("ConfigError: {e}")))?;
    Ok(PyGenealogy {
        g: simulator::replay(events, n).map_err(err)?,
    })
}

#[pyfunction]
fn ewens_pmf(n: usize, gamma: f64, a: Vec<u32>) -> PyResult<f64> {
    ewens::ewens_pmf(n, gamma, &AlleleConfiguration::new(a)).map_err(err)
}

/// `[(a, p), ...]` in lexicographic order of `a`.
#[pyfunction]
fn ewens_distribution(n: usize, gamma: f64) -> PyResult<Vec<(Vec<u32>, f64)>> {
    let d = ewens::ewens_distribution(n, gamma).map_err(err)?;
    Ok(d.pmf.into_iter().map(|(a, p)| (a.0, p)).collect())
}

#[pyfunction]
fn predicted_spectrum(beta: f64, r: u32, ell: f64) -> PyResult<f64> {
    statistics::predicted_spectrum(beta, r, ell).map_err(err)
}

/// Run a TOML experiment spec; returns the result as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec_toml: &str) -> PyResult<String> {
    let spec = ExperimentSpec::parse(spec_toml).map_err(err)?;
    let res = py.detach(|| experiments::run_experiment(&spec)).map_err(err)?;
    Ok(to_json(&res))
}

/// `(passed, report)` for one of T1, P2, T3, T4, C7.
#[pyfunction]
fn theorem_check(py: Python<'_>, spec_toml: &str, which: &str) -> PyResult<(bool, String)> {
    let spec = ExperimentSpec::parse(spec_toml).map_err(err)?;
    let which: TheoremCheck = which.parse().map_err(err)?;
    let v = py
        .detach(|| experiments::theorem_check(&spec, which))
        .map_err(err)?;
    Ok((v.passed(), v.report()))
}

/// `(mean, stderr)` of the M̄ diagnostic at time `t`.
#[pyfunction]
fn martingale(
    py: Python<'_>,
    measure: &PyMeasure,
    n: u32,
    t: f64,
    replicates: u64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let m = measure.inner().clone();
    let est = py
        .detach(|| experiments::martingale_diagnostic(&m, n, t, replicates, seed))
        .map_err(err)?;
    Ok((est.mean, est.stderr))
}

#[pymodule]
fn pyxigen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("XigenError", m.py().get_type::<XigenError>())?;
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyGenealogy>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(ewens_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(ewens_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_check, m)?)?;
    m.add_function(wrap_pyfunction!(martingale, m)?)?;
    Ok(())
}
