//! Python bindings for the blowfly lab.

use blowfly_core::charspec::{self, RegimeLabel, WaveSpec};
use blowfly_core::delayode;
use blowfly_core::pde::Grid1D;
use blowfly_core::stability::{self, ExperimentSpec, Perturbation, PerturbationKind};
use blowfly_core::waves::{self, ProfileLabel, ProfileOptions};
use blowfly_core::{Error, ModelParams};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Domain(_) | Error::Regime(_) | Error::Precondition(_) | Error::Config { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn wave(mp: &ModelParams, c_factor: f64) -> PyResult<WaveSpec> {
    if c_factor == 1.0 { WaveSpec::critical(mp) } else { WaveSpec::from_factor(mp, c_factor) }.map_err(to_py)
}

#[pyclass(name = "ModelParams", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyModelParams(ModelParams);

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (D = 1.0, delta = 1.0, p = std::f64::consts::E * std::f64::consts::E, a = 1.0, r = 1.0))]
    #[allow(non_snake_case)]
    fn new(D: f64, delta: f64, p: f64, a: f64, r: f64) -> PyResult<Self> {
        ModelParams::new(D, delta, p, a, r).map(Self).map_err(to_py)
    }

    #[getter(D)]
    fn diffusion(&self) -> f64 {
        self.0.diffusion
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta
    }

    #[getter]
    fn p(&self) -> f64 {
        self.0.p
    }

    #[getter]
    fn a(&self) -> f64 {
        self.0.a
    }

    #[getter]
    fn r(&self) -> f64 {
        self.0.r
    }

    #[getter]
    fn v_plus(&self) -> f64 {
        self.0.v_plus()
    }

    fn birth(&self, v: f64) -> PyResult<f64> {
        self.0.birth(v).map_err(to_py)
    }

    fn with_delay(&self, r: f64) -> PyResult<Self> {
        self.0.with_delay(r).map(Self).map_err(to_py)
    }

    /// `"extinction"`, `"monotone"`, `"moderate"` or `"strong"`.
    fn regime(&self) -> String {
        format!("{:?}", self.0.regime()).to_lowercase()
    }

    fn __repr__(&self) -> String {
        let m = &self.0;
        format!("ModelParams(D={}, delta={}, p={}, a={}, r={})", m.diffusion, m.delta, m.p, m.a, m.r)
    }
}

/// `(c*, λ*)`.
#[pyfunction]
fn min_speed(mp: &PyModelParams) -> PyResult<(f64, f64)> {
    charspec::min_speed(&mp.0).map_err(to_py)
}

/// `(r_under, r_bar)`; `r_under` is `None` when the oscillation window is empty.
#[pyfunction]
fn delay_thresholds(mp: &PyModelParams) -> PyResult<(Option<f64>, f64)> {
    let t = charspec::delay_thresholds(&mp.0).map_err(to_py)?;
    Ok((t.r_under, t.r_bar))
}

#[pyfunction]
fn classify_regime(mp: &PyModelParams, c: f64) -> PyResult<&'static str> {
    Ok(match charspec::classify_regime(&mp.0, c).map_err(to_py)? {
        RegimeLabel::Monotone => "monotone",
        RegimeLabel::Oscillatory => "oscillatory",
        RegimeLabel::NoWave => "no_wave",
    })
}

#[pyfunction]
fn delayed_exp(k_bar: f64, r: f64, t: f64) -> PyResult<f64> {
    Ok(delayode::DelayedExpParams::new(k_bar, r).map_err(to_py)?.eval(t))
}

fn label_name(l: ProfileLabel) -> &'static str {
    match l {
        ProfileLabel::Monotone => "monotone",
        ProfileLabel::Oscillatory => "oscillatory",
        ProfileLabel::Ambiguous => "ambiguous",
    }
}

#[pyclass(name = "WaveProfile", frozen)]
struct PyWaveProfile(waves::WaveProfile);

#[pymethods]
impl PyWaveProfile {
    #[getter]
    fn xi(&self) -> Vec<f64> {
        self.0.grid.points()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.0.phi.clone()
    }

    #[getter]
    fn c(&self) -> f64 {
        self.0.c
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.0.residual
    }

    #[getter]
    fn crossings(&self) -> usize {
        self.0.crossings
    }

    fn label(&self) -> &'static str {
        label_name(waves::classify_profile(&self.0))
    }

    fn __call__(&self, xi: f64) -> f64 {
        self.0.eval(xi)
    }
}

/// Travelling-wave profile at speed `c_factor · c*`.
#[pyfunction]
#[pyo3(signature = (mp, c_factor = 1.0, L = 60.0, n = 1201))]
#[allow(non_snake_case)]
fn compute_profile(py: Python<'_>, mp: &PyModelParams, c_factor: f64, L: f64, n: usize) -> PyResult<PyWaveProfile> {
    let m = mp.0;
    let ws = wave(&m, c_factor)?;
    let grid = Grid1D::new(L, n).map_err(to_py)?;
    py.detach(|| waves::compute_profile(&ws, &m, &grid, &ProfileOptions::default())).map(PyWaveProfile).map_err(to_py)
}

#[pyclass(name = "StabilityResult", frozen)]
struct PyStabilityResult(stability::StabilityOutcome);

#[pymethods]
impl PyStabilityResult {
    #[getter]
    fn t(&self) -> Vec<f64> {
        self.0.series.t.clone()
    }

    #[getter]
    fn sup_u(&self) -> Vec<f64> {
        self.0.series.sup_u.clone()
    }

    #[getter]
    fn sup_u_far(&self) -> Vec<f64> {
        self.0.series.sup_u_far.clone()
    }

    /// `"algebraic"` at `c*`, `"mixed"` otherwise.
    #[getter]
    fn fit_model(&self) -> String {
        format!("{:?}", self.0.fit.model).to_lowercase()
    }

    /// Algebraic exponent or exponential rate of the main fit.
    #[getter]
    fn fit_parameter(&self) -> f64 {
        self.0.fit.parameter()
    }

    #[getter]
    fn r_squared(&self) -> f64 {
        self.0.fit.r_squared
    }

    #[getter]
    fn mu_bound(&self) -> f64 {
        self.0.mu_bound
    }

    #[getter]
    fn far_rate(&self) -> Option<f64> {
        self.0.zones.far.map(|f| f.parameter())
    }

    /// `min(u⁺ − |ũ|)` over the run, when the comparison pair was tracked.
    #[getter]
    fn min_gap(&self) -> Option<f64> {
        self.0.boundedness.map(|b| b.min_gap)
    }

    fn rate_passed(&self) -> bool {
        self.0.rate_passed()
    }
}

#[pyfunction]
#[pyo3(signature = (mp, c_factor = 1.2, L = 40.0, n = 401, t_end = 30.0, perturbation = "bump", amplitude = 0.1, seed = 0, track_comparison = true, window = None))]
#[allow(non_snake_case, clippy::too_many_arguments)]
fn run_stability(
    py: Python<'_>,
    mp: &PyModelParams,
    c_factor: f64,
    L: f64,
    n: usize,
    t_end: f64,
    perturbation: &str,
    amplitude: f64,
    seed: u64,
    track_comparison: bool,
    window: Option<(f64, f64)>,
) -> PyResult<PyStabilityResult> {
    let m = mp.0;
    let ws = wave(&m, c_factor)?;
    let kind: PerturbationKind = perturbation.parse().map_err(to_py)?;
    let grid = Grid1D::new(L, n).map_err(to_py)?;
    let pert = Perturbation { kind, ..Perturbation::bump(amplitude) };
    let mut spec = ExperimentSpec::new(m, ws, pert, grid, t_end);
    spec.seed = seed;
    spec.track_comparison = track_comparison;
    spec.window = window;
    py.detach(|| stability::run_stability(&spec)).map(PyStabilityResult).map_err(to_py)
}

#[pymodule]
fn blowfly(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyWaveProfile>()?;
    m.add_class::<PyStabilityResult>()?;
    m.add_function(wrap_pyfunction!(min_speed, m)?)?;
    m.add_function(wrap_pyfunction!(delay_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(classify_regime, m)?)?;
    m.add_function(wrap_pyfunction!(delayed_exp, m)?)?;
    m.add_function(wrap_pyfunction!(compute_profile, m)?)?;
    m.add_function(wrap_pyfunction!(run_stability, m)?)?;
    Ok(())
}
