//! Fourier solution of the linear comparison equation
//! `u_t = D u_ξξ − a0 u_ξ − a1 u + k2 u(t − r, ξ − cr)` on a periodic box.
//!
//! Each mode obeys the scalar complex delay equation `û' + A û = B û(t − r)`
//! with `A(η) = Dη² + a1 + i a0 η` and `B(η) = k2 e^{−iηcr}`; modes are
//! independent, so the whole half-spectrum is advanced as one vector state by
//! the method-of-steps RK4 from `delayode`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::charspec::WaveSpec;
use crate::delayode::{delayed_exp, DdeStepper};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pde::{choose_dt, Grid1D, Operator};
use crate::stability::{fit_decay, FitModel, RateFit};

/// Symbols of one Fourier mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSymbols {
    pub eta: f64,
    pub a: Complex64,
    pub b: Complex64,
    /// `B e^{A r}`, the coefficient of the mode's delayed exponential.
    pub b_bar: Complex64,
}

fn symbols(op: &Operator, k2: f64, eta: f64) -> ModeSymbols {
    let a = Complex64::new(op.diffusion * eta * eta + op.decay, op.advection * eta);
    let b = k2 * Complex64::from_polar(1.0, -eta * op.shift);
    ModeSymbols { eta, a, b, b_bar: b * (a * op.delay).exp() }
}

/// Operator of the comparison equation for a wave.
pub fn comparison_operator(ws: &WaveSpec, mp: &ModelParams) -> Operator {
    Operator { diffusion: mp.diffusion, advection: ws.a0(mp), decay: ws.a1(mp), shift: ws.c * mp.r, delay: mp.r }
}

/// Mode symbols for the comparison equation of `ws`. Fails if `a1` falls
/// below the delay coupling, which would mean `(c, λ)` lies outside the
/// admissible band.
pub fn mode_coefficients(ws: &WaveSpec, mp: &ModelParams, eta: f64) -> Result<ModeSymbols> {
    let op = comparison_operator(ws, mp);
    let k2 = ws.k2(mp);
    let tol = 1e-9 * k2.max(1.0);
    if op.decay < k2 - tol {
        return Err(Error::Precondition(format!("a1 = {} is below p e^(-lambda c r) = {k2}; inconsistent (c, lambda)", op.decay)));
    }
    if ws.critical && (op.decay - k2).abs() > 1e-8 * k2.max(1.0) {
        return Err(Error::Precondition("critical wave without neutral zero mode".into()));
    }
    Ok(symbols(&op, k2, eta))
}

/// Stability function of classical RK4.
fn rk4_amplification(z: Complex64) -> f64 {
    (1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0).norm()
}

type ModeRhs<'a> = Box<dyn FnMut(f64, &Vec<Complex64>, &Vec<Complex64>) -> Vec<Complex64> + 'a>;
type ModeHistory<'a> = Box<dyn Fn(f64) -> Vec<Complex64> + 'a>;

/// Half-spectrum state of a real field on a periodic grid.
pub struct SpectralField<'a> {
    grid: Grid1D,
    op: Operator,
    k2: f64,
    symbols: Vec<ModeSymbols>,
    stepper: DdeStepper<Vec<Complex64>, ModeRhs<'a>, ModeHistory<'a>>,
    dt_value: f64,
    inverse: Arc<dyn Fft<f64>>,
    warnings: Vec<String>,
    history_constant: bool,
}

/// Forward transform of a real field, keeping modes `0..n/2`.
fn forward_half(fft: &Arc<dyn Fft<f64>>, values: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.truncate(values.len() / 2);
    buf
}

impl<'a> SpectralField<'a> {
    /// Comparison equation of a wave, with the finite-difference step by default.
    pub fn comparison(
        ws: &WaveSpec,
        mp: &ModelParams,
        grid: Grid1D,
        history: &'a (dyn Fn(f64, f64) -> f64 + 'a),
        dt: Option<f64>,
    ) -> Result<Self> {
        mode_coefficients(ws, mp, 0.0)?;
        Self::linear(comparison_operator(ws, mp), ws.k2(mp), grid, history, dt)
    }

    /// Generic constant-coefficient linear delayed equation.
    pub fn linear(op: Operator, k2: f64, grid: Grid1D, history: &'a (dyn Fn(f64, f64) -> f64 + 'a), dt: Option<f64>) -> Result<Self> {
        let n = grid.n;
        if !n.is_power_of_two() {
            return Err(Error::config("n", format!("spectral grid needs a power of two, got {n}")));
        }
        let dt = match dt {
            Some(dt) => {
                crate::delayode::steps_per_delay(op.delay, dt)?;
                dt
            }
            None => choose_dt(&op, &grid, None)?.0,
        };
        let dx = grid.dx();
        let period = n as f64 * dx;
        let half = n / 2;
        let syms: Vec<ModeSymbols> = (0..half).map(|k| symbols(&op, k2, 2.0 * std::f64::consts::PI * k as f64 / period)).collect();
        for s in &syms {
            let amp = rk4_amplification(-dt * s.a);
            if amp > 1.0 + 1e-12 {
                return Err(Error::config("dt", format!("step {dt} is outside the RK4 stability region for mode eta = {}", s.eta)));
            }
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let xs = grid.points();
        let a: Vec<Complex64> = syms.iter().map(|s| s.a).collect();
        let b: Vec<Complex64> = syms.iter().map(|s| s.b).collect();
        let rhs: ModeRhs<'a> = Box::new(move |_, y: &Vec<Complex64>, yd: &Vec<Complex64>| {
            y.iter().zip(yd).zip(a.iter().zip(&b)).map(|((y, yd), (a, b))| -a * y + b * yd).collect()
        });
        let fwd = forward.clone();
        let hist: ModeHistory<'a> = Box::new(move |s: f64| {
            let values: Vec<f64> = xs.iter().map(|&x| history(s, x)).collect();
            forward_half(&fwd, &values)
        });
        let history_constant = {
            let probe_a = hist(0.0);
            let probe_b = hist(-0.5 * op.delay);
            probe_a.iter().zip(&probe_b).all(|(p, q)| (p - q).norm() <= 1e-14 * p.norm().max(1.0))
        };
        let stepper = DdeStepper::new(rhs, hist, op.delay, dt)?;
        let mut field = Self { grid, op, k2, symbols: syms, stepper, dt_value: dt, inverse, warnings: Vec::new(), history_constant };
        field.diagnose();
        Ok(field)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn coupling(&self) -> f64 {
        self.k2
    }

    pub fn symbols(&self) -> &[ModeSymbols] {
        &self.symbols
    }

    pub fn dt(&self) -> f64 {
        self.dt_value
    }

    pub fn time(&self) -> f64 {
        self.stepper.time()
    }

    /// Current half-spectrum.
    pub fn modes(&self) -> &[Complex64] {
        self.stepper.state()
    }

    pub fn history_is_constant(&self) -> bool {
        self.history_constant
    }

    pub fn step(&mut self) {
        self.stepper.step();
    }

    pub fn advance_to(&mut self, t_end: f64) {
        let dt = self.dt_value;
        while self.time() + 0.5 * dt < t_end {
            self.step();
        }
    }

    /// Physical field from the Hermitian extension of the half-spectrum.
    pub fn field(&self) -> Vec<f64> {
        let n = self.grid.n;
        let half = self.stepper.state();
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        full[0] = Complex64::new(half[0].re, 0.0);
        for k in 1..n / 2 {
            full[k] = half[k];
            full[n - k] = half[k].conj();
        }
        self.inverse.process(&mut full);
        full.iter().map(|z| z.re / n as f64).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.field().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks aliasing (energy in the top tenth of the spectrum) and whether the
    /// field reaches the edges of the box; records a warning for each.
    pub fn diagnose(&mut self) {
        let modes = self.stepper.state();
        let total: f64 = modes.iter().map(|z| z.norm_sqr()).sum();
        let cut = modes.len() - modes.len() / 10;
        let top: f64 = modes[cut..].iter().map(|z| z.norm_sqr()).sum();
        if total > 0.0 && top / total > 1e-6 {
            self.push_warning(format!("aliasing: top 10% of modes carry {:.3e} of the energy", top / total));
        }
        let field = self.field();
        let edge = 0.8 * self.grid.half_width;
        let reach = field.iter().enumerate().filter(|(i, _)| self.grid.x(*i).abs() > edge).fold(0.0f64, |m, (_, v)| m.max(v.abs()));
        if reach > 1e-8 {
            self.push_warning(format!("domain too small: |u| = {reach:.3e} beyond 0.8 L"));
        }
    }

    fn push_warning(&mut self, w: String) {
        let key = w.split(':').next().unwrap_or("").to_string();
        if !self.warnings.iter().any(|x| x.starts_with(&key)) {
            self.warnings.push(w);
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Closed-form value of one mode at time `t` for a time-constant history
/// `û0`, through the complex delayed exponential. Only well conditioned for
/// modest `|A| r` and `t`.
pub fn closed_form_mode(sym: &ModeSymbols, r: f64, z0: Complex64, t: f64) -> Complex64 {
    let a = sym.a;
    let kb = sym.b_bar;
    let head = (-a * (t + r)).exp() * delayed_exp(kb, r, t) * z0;
    // ∫_{−r}^{0} e^{−A(t−s)} E(t − r − s) A z0 ds, split where E has kinks
    let mut cuts = vec![-r, 0.0];
    let mut j = 0i64;
    loop {
        let s = t - r - j as f64 * r;
        if s <= -r {
            break;
        }
        if s < 0.0 {
            cuts.push(s);
        }
        j += 1;
    }
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (nodes, weights) = crate::pde::gauss_legendre(20);
    let mut integral = Complex64::new(0.0, 0.0);
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        for (x, wt) in nodes.iter().zip(&weights) {
            let s = 0.5 * (hi - lo) * (x + 1.0) + lo;
            integral += 0.5 * (hi - lo) * wt * (-a * (t - s)).exp() * delayed_exp(kb, r, t - r - s);
        }
    }
    head + integral * a * z0
}

/// Sup-norm series of a spectral run sampled every `stride` steps, plus the
/// largest relative gap found by closed-form spot checks on low modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRun {
    pub t: Vec<f64>,
    pub sup: Vec<f64>,
    pub spot_check_error: Option<f64>,
    pub warnings: Vec<String>,
}

/// Evolves to `t_end`, recording the sup-norm every `sample_dt`. When the
/// history is constant in time, ten (mode, time) pairs are checked against
/// [`closed_form_mode`].
pub fn evolve_spectral(field: &mut SpectralField, t_end: f64, sample_dt: f64) -> Result<SpectralRun> {
    let r = field.op.delay;
    let initial: Vec<Complex64> = field.modes().to_vec();
    let check_times: Vec<f64> =
        if field.history_constant && r > 0.0 { (1..=10).map(|i| (0.5 * i as f64 * r).min(t_end)).collect() } else { Vec::new() };
    let mut next_check = 0;
    let mut spot: Option<f64> = None;
    let mut out = SpectralRun { t: vec![field.time()], sup: vec![field.sup_norm()], spot_check_error: None, warnings: Vec::new() };
    let mut next_sample = sample_dt;
    let dt = field.dt_value;
    while field.time() + 0.5 * dt < t_end {
        field.step();
        let t = field.time();
        while next_check < check_times.len() && t + 0.5 * dt >= check_times[next_check] {
            let k = 1 + 2 * next_check;
            if k < field.symbols.len() && initial[k].norm() > 0.0 {
                let exact = closed_form_mode(&field.symbols[k], r, initial[k], t);
                let rel = (field.modes()[k] - exact).norm() / initial[k].norm();
                spot = Some(spot.map_or(rel, |s: f64| s.max(rel)));
            }
            next_check += 1;
        }
        if t + 0.5 * dt >= next_sample {
            let s = field.sup_norm();
            if !s.is_finite() {
                return Err(Error::numerical(format!("spectral solution not finite at t = {t}"), s));
            }
            out.t.push(t);
            out.sup.push(s);
            next_sample += sample_dt;
        }
    }
    field.diagnose();
    out.spot_check_error = spot;
    out.warnings = field.warnings().to_vec();
    Ok(out)
}

/// Rate summary of a linear decay run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecayReport {
    pub fit: RateFit,
    pub critical: bool,
    /// `μ0 = cλ + δ − Dλ² − p e^{−λcr}`.
    pub mu0: f64,
    /// Fitted rate over `μ0` for non-critical runs.
    pub mu_ratio: Option<f64>,
    pub decaying: bool,
}

/// Fits `C (1+t)^{−1/2}` (critical, as a power law in `1+t`) or
/// `C (1+t)^{−1/2} e^{−μ1 t}` (non-critical) to a sup-norm series.
pub fn measure_linear_decay(t: &[f64], sup: &[f64], ws: &WaveSpec, mp: &ModelParams, window: (f64, f64)) -> Result<LinearDecayReport> {
    if window.0 < 5.0 * mp.r || window.1 < 10.0 * window.0 * (1.0 - 1e-12) {
        return Err(Error::Fit("linear decay window must span a decade past 5r".into()));
    }
    let shifted: Vec<f64> = t.iter().map(|t| 1.0 + t).collect();
    let win = (1.0 + window.0, 1.0 + window.1);
    let mu0 = ws.mu0(mp);
    let fit =
        if ws.critical { fit_decay(&shifted, sup, FitModel::Algebraic, win)? } else { fit_decay(&shifted, sup, FitModel::Mixed, win)? };
    let decaying = match fit.model {
        FitModel::Algebraic => fit.alg_exponent.unwrap_or(0.0) < 0.0,
        _ => fit.exp_rate.unwrap_or(0.0) > 0.0,
    };
    let mu_ratio = (!ws.critical && mu0 > 0.0).then(|| fit.exp_rate.unwrap_or(f64::NAN) / mu0);
    Ok(LinearDecayReport { fit, critical: ws.critical, mu0, mu_ratio, decaying })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delayode::integrate_dde_steps;
    use crate::pde::DelayField;
    use std::f64::consts::E;

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, E * E, 1.0, 0.5).unwrap()
    }

    #[test]
    fn mode_coefficient_examples() {
        let mp = params();
        let crit = WaveSpec::critical(&mp).unwrap();
        let s = mode_coefficients(&crit, &mp, 0.0).unwrap();
        assert!((s.a.re - s.b.norm()).abs() < 1e-10);
        let fast = WaveSpec::from_factor(&mp, 1.2).unwrap();
        let s = mode_coefficients(&fast, &mp, 0.0).unwrap();
        assert!(s.a.re - s.b.norm() > 0.0);
        assert!((s.a.re - s.b.norm() - fast.mu0(&mp)).abs() < 1e-12);
        for eta in [0.3, -1.7, 4.0] {
            let s = mode_coefficients(&fast, &mp, eta).unwrap();
            assert!((s.a.re - s.b.norm() - (eta * eta + fast.mu0(&mp))).abs() < 1e-12);
            assert!((s.b.norm() - fast.k2(&mp)).abs() < 1e-12);
        }
        let bad = WaveSpec { c: fast.c, lambda: 1e-3, critical: false };
        assert!(mode_coefficients(&bad, &mp, 0.0).is_err());
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mp = params();
        let ws = WaveSpec::critical(&mp).unwrap();
        let h = |_: f64, _: f64| 0.0;
        assert!(SpectralField::comparison(&ws, &mp, Grid1D::new(10.0, 100).unwrap(), &h, None).is_err());
    }

    #[test]
    fn uncoupled_gaussian_is_advected_and_damped() {
        let op = Operator { diffusion: 1.0, advection: 0.7, decay: 0.3, shift: 0.0, delay: 0.5 };
        let g = Grid1D::new(40.0, 512).unwrap();
        let h = |_: f64, x: f64| (-(x * x)).exp();
        let mut f = SpectralField::linear(op, 0.0, g, &h, Some(0.5 / 200.0)).unwrap();
        let t = 3.0;
        f.advance_to(t);
        let var = 0.25 + t;
        for (i, v) in f.field().iter().enumerate() {
            let y = g.x(i) - 0.7 * t;
            let exact = (-0.3 * t).exp() * (0.25 / var).sqrt() * (-(y * y) / (4.0 * var)).exp();
            assert!((v - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mode_matches_scalar_dde() {
        let mp = params();
        let ws = WaveSpec::from_factor(&mp, 1.2).unwrap();
        let g = Grid1D::new(10.0, 64).unwrap();
        let h = |_: f64, _: f64| 1.0;
        let dt = mp.r / 500.0;
        let mut f = SpectralField::comparison(&ws, &mp, g, &h, Some(dt)).unwrap();
        f.advance_to(3.0);
        let (a1, k2) = (ws.a1(&mp), ws.k2(&mp));
        let oracle = integrate_dde_steps(|_, y: &f64, yd: &f64| -a1 * y + k2 * yd, |_| 1.0, mp.r, 3.0, dt).unwrap();
        let mode0 = f.modes()[0].re / 64.0;
        assert!((mode0 - oracle.y.last().unwrap()).abs() < 1e-8);
    }

    #[test]
    fn closed_form_spot_checks() {
        let mp = params();
        let ws = WaveSpec::from_factor(&mp, 1.2).unwrap();
        let g = Grid1D::new(20.0, 256).unwrap();
        let h = |_: f64, x: f64| (-(x * x) / 2.0).exp();
        let mut f = SpectralField::comparison(&ws, &mp, g, &h, None).unwrap();
        let run = evolve_spectral(&mut f, 5.0, 0.1).unwrap();
        assert!(run.spot_check_error.unwrap() < 1e-6, "{:?}", run.spot_check_error);
    }

    #[test]
    fn superposition() {
        let mp = params();
        let ws = WaveSpec::critical(&mp).unwrap();
        let g = Grid1D::new(20.0, 128).unwrap();
        let f1 = |_: f64, x: f64| (-(x - 2.0) * (x - 2.0)).exp();
        let f2 = |s: f64, x: f64| (1.0 + s) * (-(x + 1.0) * (x + 1.0) / 3.0).exp();
        let mix = |s: f64, x: f64| 2.0 * f1(s, x) - 0.7 * f2(s, x);
        let run = |h: &dyn Fn(f64, f64) -> f64| {
            let mut f = SpectralField::comparison(&ws, &mp, g, h, None).unwrap();
            f.advance_to(2.0);
            f.field()
        };
        let (a, b, c) = (run(&f1), run(&f2), run(&mix));
        for i in 0..g.n {
            assert!((c[i] - (2.0 * a[i] - 0.7 * b[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_and_finite_difference_agree() {
        let mp = params();
        let ws = WaveSpec::from_factor(&mp, 1.2).unwrap();
        let gap = |n: usize| {
            let g = Grid1D::new(20.0, n).unwrap();
            let h = |_: f64, x: f64| (-(x * x) / 2.0).exp();
            let mut fd = DelayField::comparison(&ws, &mp, g, &h, None).unwrap();
            let mut sp = SpectralField::comparison(&ws, &mp, g, &h, Some(fd.dt())).unwrap();
            fd.advance_to(2.0).unwrap();
            sp.advance_to(2.0);
            let s = sp.field();
            assert!(s.iter().all(|v| *v >= -1e-8));
            fd.current().iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (gap(128), gap(256));
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }

    #[test]
    fn critical_linear_decay_is_half_power() {
        let mp = params();
        let ws = WaveSpec::critical(&mp).unwrap();
        let g = Grid1D::new(80.0, 512).unwrap();
        let h = |_: f64, x: f64| (-(x * x) / 2.0).exp();
        let mut f = SpectralField::comparison(&ws, &mp, g, &h, Some(mp.r / 50.0)).unwrap();
        let run = evolve_spectral(&mut f, 120.0, 0.5).unwrap();
        let rep = measure_linear_decay(&run.t, &run.sup, &ws, &mp, (10.0, 120.0)).unwrap();
        let a = rep.fit.alg_exponent.unwrap();
        assert!((-0.65..=-0.35).contains(&a), "{a}");
    }
}
