//! Decay-rate fitting and the end-to-end stability experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charspec::WaveSpec;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pde::{BoundednessMonitor, BoundednessReport, DelayField, Grid1D};
use crate::waves::{classify_profile, compute_profile, ProfileLabel, ProfileOptions, WaveProfile};

/// Log-linear model used by [`fit_decay`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitModel {
    /// `y = C t^α`
    Algebraic,
    /// `y = C e^{−μt}`
    Exponential,
    /// `y = C t^{−1/2} e^{−μt}`
    Mixed,
}

/// Least-squares fit of a decay series in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: FitModel,
    pub alg_exponent: Option<f64>,
    pub exp_rate: Option<f64>,
    pub log_c: f64,
    /// Standard error of the fitted exponent or rate.
    pub stderr: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

impl RateFit {
    /// Fitted slope parameter: the exponent for algebraic fits, the rate otherwise.
    pub fn parameter(&self) -> f64 {
        self.alg_exponent.or(self.exp_rate).unwrap_or(f64::NAN)
    }
}

/// Minimum number of samples in the fit window.
pub const MIN_FIT_SAMPLES: usize = 30;

struct LineFit {
    intercept: f64,
    slope: f64,
    slope_se: f64,
    r_squared: f64,
}

fn least_squares(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    let slope_se = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::INFINITY };
    LineFit { intercept, slope, slope_se, r_squared }
}

/// Fits `(t, y)` samples with `t` in `window` to the given log-model.
pub fn fit_decay(t: &[f64], y: &[f64], model: FitModel, window: (f64, f64)) -> Result<RateFit> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Fit(format!("empty window [{lo}, {hi}]")));
    }
    if model == FitModel::Algebraic && !(lo > 0.0 && hi >= 10.0 * lo * (1.0 - 1e-12)) {
        return Err(Error::Fit(format!("algebraic fit needs a full decade, window is [{lo}, {hi}]")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &yi) in t.iter().zip(y) {
        if ti < lo || ti > hi {
            continue;
        }
        if !(yi > 0.0) {
            return Err(Error::Fit(format!("non-positive value {yi} at t = {ti}")));
        }
        match model {
            FitModel::Algebraic => {
                xs.push(ti.ln());
                ys.push(yi.ln());
            }
            FitModel::Exponential => {
                xs.push(ti);
                ys.push(yi.ln());
            }
            FitModel::Mixed => {
                if !(ti > 0.0) {
                    return Err(Error::Fit("mixed model needs t > 0".into()));
                }
                xs.push(ti);
                ys.push(yi.ln() + 0.5 * ti.ln());
            }
        }
    }
    if xs.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!("{} samples in window, need {MIN_FIT_SAMPLES}", xs.len())));
    }
    let f = least_squares(&xs, &ys);
    let (alg_exponent, exp_rate) = match model {
        FitModel::Algebraic => (Some(f.slope), None),
        FitModel::Exponential | FitModel::Mixed => (None, Some(-f.slope)),
    };
    Ok(RateFit { model, alg_exponent, exp_rate, log_c: f.intercept, stderr: f.slope_se, r_squared: f.r_squared, window, samples: xs.len() })
}

/// Default fit window `[max(10r, 20), t_end]`.
pub fn default_window(r: f64, t_end: f64) -> (f64, f64) {
    ((10.0 * r).max(20.0), t_end)
}

/// Shape of the initial perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// Gaussian bump of height `amplitude`.
    Bump,
    /// `φ(ξ + h) − φ(ξ)` with `h = amplitude`.
    Shift,
    /// Sign-changing Gaussian wave packet.
    Packet,
    /// Sign-changing packet with sup-norm `amplitude · v+`.
    Large,
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bump" => Ok(Self::Bump),
            "shift" => Ok(Self::Shift),
            "packet" => Ok(Self::Packet),
            "large" => Ok(Self::Large),
            _ => Err(Error::config("perturbation", format!("unknown perturbation '{s}'"))),
        }
    }
}

/// Initial perturbation `u0(ξ)`, used as a time-constant history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    /// Seeded uniform noise on `[−noise, noise]` under the Gaussian envelope.
    pub noise: f64,
}

impl Perturbation {
    pub fn bump(amplitude: f64) -> Self {
        Self { kind: PerturbationKind::Bump, amplitude, center: 0.0, width: 1.0, noise: 0.0 }
    }

    /// `u0` at every grid point. Every shape is multiplied by a logistic cutoff
    /// rising at `center − 4·width` with slope `2λ + 1`, which makes
    /// `e^{−λξ} u0` vanish at `−∞`, and then clipped so that `φ + u0 ≥ 0`.
    pub fn sample(&self, ws: &WaveSpec, wp: &WaveProfile, seed: u64) -> Vec<f64> {
        let kappa = 2.0 * ws.lambda + 1.0;
        let edge = self.center - 4.0 * self.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wp.grid
            .points()
            .iter()
            .map(|&x| {
                let z = (x - self.center) / self.width;
                let g = (-0.5 * z * z).exp();
                let jitter = if self.noise > 0.0 { self.noise * g * rng.gen_range(-1.0..=1.0) } else { 0.0 };
                let raw = jitter
                    + match self.kind {
                        PerturbationKind::Bump => self.amplitude * g,
                        PerturbationKind::Shift => wp.eval(x + self.amplitude) - wp.eval(x),
                        PerturbationKind::Packet => self.amplitude * g * (3.0 * z).sin(),
                        PerturbationKind::Large => self.amplitude * wp.v_plus * g * (2.0 * z).cos(),
                    };
                let cut = 1.0 / (1.0 + (-kappa * (x - edge)).exp());
                (raw * cut).max(-wp.eval(x))
            })
            .collect()
    }
}

/// Everything one stability run needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mp: ModelParams,
    pub ws: WaveSpec,
    pub perturbation: Perturbation,
    pub grid: Grid1D,
    pub dt: Option<f64>,
    pub t_end: f64,
    pub sample_dt: f64,
    /// Far-field split point; chosen from the profile when absent.
    pub x0: Option<f64>,
    pub window: Option<(f64, f64)>,
    /// Also evolve the anti-weighted perturbation and its comparison solution.
    pub track_comparison: bool,
    pub profile: ProfileOptions,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(mp: ModelParams, ws: WaveSpec, perturbation: Perturbation, grid: Grid1D, t_end: f64) -> Self {
        Self {
            mp,
            ws,
            perturbation,
            grid,
            dt: None,
            t_end,
            sample_dt: 0.5,
            x0: None,
            window: None,
            track_comparison: true,
            profile: ProfileOptions::default(),
            seed: 0,
        }
    }

    pub fn window(&self) -> (f64, f64) {
        self.window.unwrap_or_else(|| default_window(self.mp.r, self.t_end))
    }
}

/// Sampled sup-norms; the `utilde` and `uplus` columns are NaN when the
/// comparison pair is not tracked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilitySeries {
    pub t: Vec<f64>,
    pub sup_u: Vec<f64>,
    pub sup_u_near: Vec<f64>,
    pub sup_u_far: Vec<f64>,
    pub sup_utilde: Vec<f64>,
    pub sup_uplus: Vec<f64>,
}

impl StabilitySeries {
    pub const CSV_HEADER: &'static str = "t,sup_u,sup_u_near,sup_u_far,sup_utilde,sup_uplus";

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Row `i` as `[t, sup_u, sup_u_near, sup_u_far, sup_utilde, sup_uplus]`.
    pub fn row(&self, i: usize) -> [f64; 6] {
        [self.t[i], self.sup_u[i], self.sup_u_near[i], self.sup_u_far[i], self.sup_utilde[i], self.sup_uplus[i]]
    }
}

/// Smallest grid point from which `|φ − v+| < 0.05 v+` holds all the way right.
pub fn select_x0(wp: &WaveProfile) -> f64 {
    let tol = 0.05 * wp.v_plus;
    let mut i = wp.phi.len() - 1;
    while i > 0 && (wp.phi[i - 1] - wp.v_plus).abs() < tol {
        i -= 1;
    }
    wp.grid.x(i)
}

/// Per-zone diagnostics around `x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneReport {
    pub x0: f64,
    pub far: Option<RateFit>,
    pub far_passed: bool,
    pub near: Option<RateFit>,
    pub near_passed: bool,
}

/// Result of [`run_stability`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    pub profile_residual: f64,
    pub profile_label: ProfileLabel,
    pub x0: f64,
    pub series: StabilitySeries,
    /// Algebraic fit at `c*`, mixed fit otherwise.
    pub fit: RateFit,
    /// Mixed-model fit at `c*`, whose rate should be indistinguishable from 0.
    pub guard: Option<RateFit>,
    /// `min{δ, μ0}` for the wave's weight exponent.
    pub mu_bound: f64,
    pub zones: ZoneReport,
    pub boundedness: Option<BoundednessReport>,
    pub dt: f64,
}

impl StabilityOutcome {
    /// The critical run's rate is algebraic in `[−0.65, −0.35]`, the others decay exponentially.
    pub fn rate_passed(&self) -> bool {
        match self.fit.model {
            FitModel::Algebraic => self.fit.alg_exponent.is_some_and(|a| (-0.65..=-0.35).contains(&a)),
            _ => self.fit.exp_rate.is_some_and(|m| m > 0.0),
        }
    }

    pub fn guard_passed(&self) -> Option<bool> {
        self.guard.map(|g| g.exp_rate.is_some_and(|m| m.abs() <= 2.0 * g.stderr))
    }
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits the far-zone column to `e^{−μ2 t}`; passes iff `0 < μ2 < δ + 2σ`.
pub fn zone_far(series: &StabilitySeries, mp: &ModelParams, window: (f64, f64)) -> (Option<RateFit>, bool) {
    match fit_decay(&series.t, &series.sup_u_far, FitModel::Exponential, window) {
        Ok(f) => {
            let mu = f.parameter();
            let passed = mu > 0.0 && mu < mp.delta + 2.0 * f.stderr;
            (Some(f), passed)
        }
        Err(_) => (None, false),
    }
}

/// Fits the near-zone column in `1 + t`: algebraic at `c*` (pass iff the
/// exponent is in `[−0.65, −0.35]`), mixed above (pass iff `μ1 > 0`).
pub fn zone_near(series: &StabilitySeries, ws: &WaveSpec, window: (f64, f64)) -> (Option<RateFit>, bool) {
    let t1: Vec<f64> = series.t.iter().map(|t| 1.0 + t).collect();
    let w = (1.0 + window.0, 1.0 + window.1);
    let model = if ws.critical { FitModel::Algebraic } else { FitModel::Mixed };
    match fit_decay(&t1, &series.sup_u_near, model, w) {
        Ok(f) => {
            let p = f.parameter();
            let passed = if ws.critical { (-0.65..=-0.35).contains(&p) } else { p > 0.0 };
            (Some(f), passed)
        }
        Err(_) => (None, false),
    }
}

/// Computes the profile, evolves `u` (and optionally `ũ`, `u⁺` from matched
/// data), samples the sup-norms and fits the decay.
pub fn run_stability(spec: &ExperimentSpec) -> Result<StabilityOutcome> {
    let (mp, ws, grid) = (&spec.mp, &spec.ws, spec.grid);
    mp.require_in_scope()?;
    if !(spec.t_end > 0.0 && spec.sample_dt > 0.0) {
        return Err(Error::config("t_end", "t_end and sample_dt must be positive"));
    }
    let wp = compute_profile(ws, mp, &grid, &spec.profile)?;
    let x0 = spec.x0.unwrap_or_else(|| select_x0(&wp));
    if x0 < -grid.half_width || x0 > grid.half_width {
        return Err(Error::config("x0", format!("x0 = {x0} lies outside the grid")));
    }
    let xs = grid.points();
    let u0 = spec.perturbation.sample(ws, &wp, spec.seed);
    let ut0: Vec<f64> = xs.iter().zip(&u0).map(|(x, u)| (-ws.lambda * x).exp() * u).collect();
    let scale = sup_abs(&ut0);
    if !scale.is_finite() || ut0[0].abs() > 1e-6 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::config("perturbation", "perturbation is not admissible: e^{-lambda xi} u0 does not vanish at the left end"));
    }
    let prof = |x: f64| wp.eval(x);
    let lookup = |v: &[f64], x: f64| -> f64 {
        let i = ((x + grid.half_width) / grid.dx()).round() as usize;
        v[i.min(grid.n - 1)]
    };
    let hist_u = |_: f64, x: f64| lookup(&u0, x);
    let mut fu = DelayField::perturbation(ws, mp, &prof, grid, &hist_u, spec.dt)?;
    let mut pair = if spec.track_comparison {
        let hist_t = |_: f64, x: f64| lookup(&ut0, x);
        let hist_p = |_: f64, x: f64| lookup(&ut0, x).abs();
        let ft = DelayField::antiweighted(ws, mp, &prof, grid, &hist_t, spec.dt)?;
        let fp = DelayField::comparison(ws, mp, grid, &hist_p, Some(ft.dt()))?;
        Some((ft, fp, BoundednessMonitor::default()))
    } else {
        None
    };
    let split = xs.partition_point(|&x| x < x0);
    let mut series = StabilitySeries::default();
    let mut t = 0.0;
    let n_samples = (spec.t_end / spec.sample_dt).round() as usize;
    for k in 1..=n_samples {
        t = k as f64 * spec.sample_dt;
        fu.advance_to(t)?;
        let cur = fu.current();
        series.t.push(t);
        series.sup_u.push(sup_abs(cur));
        series.sup_u_near.push(sup_abs(&cur[..split]));
        series.sup_u_far.push(sup_abs(&cur[split..]));
        match pair.as_mut() {
            Some((ft, fp, mon)) => {
                while ft.time() + 0.5 * ft.dt() < t {
                    ft.step()?;
                    fp.step()?;
                    mon.observe(ft.time(), &grid, ft.current(), fp.current());
                }
                series.sup_utilde.push(ft.sup_norm());
                series.sup_uplus.push(fp.sup_norm());
            }
            None => {
                series.sup_utilde.push(f64::NAN);
                series.sup_uplus.push(f64::NAN);
            }
        }
    }
    debug_assert!((t - spec.t_end).abs() < spec.sample_dt);
    let window = spec.window();
    let (fit, guard) = if ws.critical {
        let f = fit_decay(&series.t, &series.sup_u, FitModel::Algebraic, window)?;
        (f, fit_decay(&series.t, &series.sup_u, FitModel::Mixed, window).ok())
    } else {
        (fit_decay(&series.t, &series.sup_u, FitModel::Mixed, window)?, None)
    };
    let (far, far_passed) = zone_far(&series, mp, window);
    let (near, near_passed) = zone_near(&series, ws, window);
    Ok(StabilityOutcome {
        profile_residual: wp.residual,
        profile_label: classify_profile(&wp),
        x0,
        series,
        fit,
        guard,
        mu_bound: ws.mu_bound(mp),
        zones: ZoneReport { x0, far, far_passed, near, near_passed },
        boundedness: pair.map(|(_, _, mon)| mon.report()),
        dt: fu.dt(),
    })
}
