//! Scalar delayed ODEs: the delayed exponential, the variation-of-constants
//! formula for `z' + k1 z = k2 z(t − r)`, a method-of-steps RK4 integrator
//! used as the numerical oracle, and the far-field equation near `v+`.

use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Coefficient and delay of the delayed exponential `E(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayedExpParams {
    pub k_bar: f64,
    pub r: f64,
}

impl DelayedExpParams {
    pub fn new(k_bar: f64, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("delay must be positive, got {r}")));
        }
        if !k_bar.is_finite() {
            return Err(Error::Domain("k_bar must be finite".into()));
        }
        Ok(Self { k_bar, r })
    }

    pub fn eval(&self, t: f64) -> f64 {
        delayed_exp(self.k_bar, self.r, t)
    }

    /// `E(t)` plus a flag set when the value saturated to a non-finite number.
    pub fn eval_flagged(&self, t: f64) -> (f64, bool) {
        let v = self.eval(t);
        if v.is_finite() {
            (v, false)
        } else {
            (v.signum() * f64::MAX, true)
        }
    }
}

/// Delayed exponential with coefficient `k̄` (real or complex):
/// 0 before `−r`, 1 on `[−r, 0)`, and on `[(m−1)r, mr)` the sum
/// `Σ_{j≤m} k̄^j (t − (j−1)r)^j / j!`.
pub fn delayed_exp<T>(k_bar: T, r: f64, t: f64) -> T
where
    T: Copy + From<f64> + Add<Output = T> + Mul<Output = T> + Mul<f64, Output = T>,
{
    if t < -r {
        return T::from(0.0);
    }
    if t < 0.0 {
        return T::from(1.0);
    }
    let m = (t / r).floor() as usize + 1;
    let mut sum = T::from(1.0);
    for j in 1..=m {
        let x = t - (j as f64 - 1.0) * r;
        // build k̄^j x^j / j! as a running product so the factorial never appears
        let mut term = T::from(1.0);
        for i in 1..=j {
            term = term * k_bar * (x / i as f64);
        }
        sum = sum + term;
    }
    sum
}

/// State types the method-of-steps integrator can carry.
pub trait DdeState: Clone {
    /// `self += a · x`
    fn add_scaled(&mut self, a: f64, x: &Self);
    /// `self *= a`
    fn scale(&mut self, a: f64);
    /// Largest component magnitude.
    fn sup_norm(&self) -> f64;
}

impl DdeState for f64 {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
    fn sup_norm(&self) -> f64 {
        self.abs()
    }
}

impl DdeState for Complex64 {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        *self += x * a;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
    fn sup_norm(&self) -> f64 {
        self.norm()
    }
}

impl<S: DdeState> DdeState for Vec<S> {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        for (s, xi) in self.iter_mut().zip(x) {
            s.add_scaled(a, xi);
        }
    }
    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            s.scale(a);
        }
    }
    fn sup_norm(&self) -> f64 {
        self.iter().map(DdeState::sup_norm).fold(0.0, f64::max)
    }
}

fn lincomb<T: DdeState>(base: &T, a: f64, x: &T) -> T {
    let mut out = base.clone();
    out.add_scaled(a, x);
    out
}

/// Number of steps per delay; errors unless `dt` divides `r`.
pub fn steps_per_delay(r: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", format!("step must be positive, got {dt}")));
    }
    if r == 0.0 {
        return Ok(0);
    }
    let m = (r / dt).round();
    if m < 1.0 || ((m * dt - r).abs() > 1e-9 * r) {
        return Err(Error::config("dt", format!("step {dt} does not divide the delay {r}")));
    }
    Ok(m as usize)
}

/// Streaming RK4 for `y' = f(t, y(t), y(t − r))` with a ring of the last
/// `m + 1` states and slopes. Delayed values at grid times are read exactly;
/// delayed half-step values come from the cubic Hermite interpolant.
pub struct DdeStepper<T, F, H> {
    rhs: F,
    history: H,
    r: f64,
    dt: f64,
    m: usize,
    n: usize,
    y: T,
    ring_y: Vec<T>,
    ring_f: Vec<T>,
}

impl<T, F, H> DdeStepper<T, F, H>
where
    T: DdeState,
    F: FnMut(f64, &T, &T) -> T,
    H: Fn(f64) -> T,
{
    pub fn new(rhs: F, history: H, r: f64, dt: f64) -> Result<Self> {
        let m = steps_per_delay(r, dt)?;
        let y = history(0.0);
        Ok(Self { rhs, history, r, dt, m, n: 0, y, ring_y: Vec::new(), ring_f: Vec::new() })
    }

    pub fn time(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn state(&self) -> &T {
        &self.y
    }

    pub fn steps_taken(&self) -> usize {
        self.n
    }

    fn slot(&self, j: usize) -> usize {
        j % (self.m + 1)
    }

    fn store(&mut self, y: T, f: T) {
        let s = self.slot(self.n);
        if self.ring_y.len() <= s {
            self.ring_y.push(y);
            self.ring_f.push(f);
        } else {
            self.ring_y[s] = y;
            self.ring_f[s] = f;
        }
    }

    /// Solution at grid index `j` (may be negative, i.e. inside the history).
    fn grid_value(&self, j: isize) -> T {
        if j <= 0 {
            (self.history)(j as f64 * self.dt)
        } else {
            self.ring_y[self.slot(j as usize)].clone()
        }
    }

    pub fn step(&mut self) {
        let dt = self.dt;
        let t = self.time();
        let n = self.n as isize;
        let m = self.m as isize;
        if self.m == 0 {
            let y = self.y.clone();
            let k1 = (self.rhs)(t, &y, &y);
            let y2 = lincomb(&y, 0.5 * dt, &k1);
            let k2 = (self.rhs)(t + 0.5 * dt, &y2, &y2);
            let y3 = lincomb(&y, 0.5 * dt, &k2);
            let k3 = (self.rhs)(t + 0.5 * dt, &y3, &y3);
            let y4 = lincomb(&y, dt, &k3);
            let k4 = (self.rhs)(t + dt, &y4, &y4);
            self.finish(k1, k2, k3, k4);
            return;
        }
        let yd0 = if n - m < 0 { (self.history)(t - self.r) } else { self.ring_y[self.slot((n - m) as usize)].clone() };
        let y = self.y.clone();
        let k1 = (self.rhs)(t, &y, &yd0);
        self.store(y.clone(), k1.clone());
        let ydh = if n + 1 - m <= 0 {
            (self.history)(t + 0.5 * dt - self.r)
        } else {
            let (a, b) = (self.slot((n - m) as usize), self.slot((n + 1 - m) as usize));
            // Hermite midpoint: (y0 + y1)/2 + dt (f0 − f1)/8
            let mut v = lincomb(&self.ring_y[a], 1.0, &self.ring_y[b]);
            v.scale(0.5);
            v.add_scaled(0.125 * dt, &self.ring_f[a]);
            v.add_scaled(-0.125 * dt, &self.ring_f[b]);
            v
        };
        let yd1 = self.grid_value(n + 1 - m);
        let y2 = lincomb(&y, 0.5 * dt, &k1);
        let k2 = (self.rhs)(t + 0.5 * dt, &y2, &ydh);
        let y3 = lincomb(&y, 0.5 * dt, &k2);
        let k3 = (self.rhs)(t + 0.5 * dt, &y3, &ydh);
        let y4 = lincomb(&y, dt, &k3);
        let k4 = (self.rhs)(t + dt, &y4, &yd1);
        self.finish(k1, k2, k3, k4);
    }

    fn finish(&mut self, k1: T, k2: T, k3: T, k4: T) {
        let h = self.dt / 6.0;
        self.y.add_scaled(h, &k1);
        self.y.add_scaled(2.0 * h, &k2);
        self.y.add_scaled(2.0 * h, &k3);
        self.y.add_scaled(h, &k4);
        self.n += 1;
    }
}

/// Grid times and states of an integration.
#[derive(Debug, Clone, PartialEq)]
pub struct Series<T> {
    pub t: Vec<f64>,
    pub y: Vec<T>,
}

impl<T> Series<T> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Method-of-steps RK4 from `t = 0` to `t_end` with output at every step.
pub fn integrate_dde_steps<T, F, H>(rhs: F, history: H, r: f64, t_end: f64, dt: f64) -> Result<Series<T>>
where
    T: DdeState,
    F: FnMut(f64, &T, &T) -> T,
    H: Fn(f64) -> T,
{
    if !(t_end > 0.0) {
        return Err(Error::config("t_end", "must be positive"));
    }
    let mut st = DdeStepper::new(rhs, history, r, dt)?;
    let steps = (t_end / dt).round() as usize;
    let mut out = Series { t: Vec::with_capacity(steps + 1), y: Vec::with_capacity(steps + 1) };
    out.t.push(0.0);
    out.y.push(st.state().clone());
    for _ in 0..steps {
        st.step();
        out.t.push(st.time());
        out.y.push(st.state().clone());
    }
    Ok(out)
}

/// History of a delayed ODE with its derivative (finite differences if absent).
pub struct History {
    pub value: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub derivative: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl History {
    pub fn constant(v: f64) -> Self {
        Self { value: Box::new(move |_| v), derivative: Some(Box::new(|_| 0.0)) }
    }

    pub fn affine(a: f64, b: f64) -> Self {
        Self { value: Box::new(move |s| a + b * s), derivative: Some(Box::new(move |_| b)) }
    }

    pub fn from_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Box::new(f), derivative: None }
    }

    pub fn with_derivative(f: impl Fn(f64) -> f64 + Send + Sync + 'static, df: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Box::new(f), derivative: Some(Box::new(df)) }
    }

    pub fn at(&self, s: f64) -> f64 {
        (self.value)(s)
    }

    fn slope(&self, s: f64, h: f64) -> f64 {
        match &self.derivative {
            Some(d) => d(s),
            None => ((self.value)(s + h) - (self.value)(s - h)) / (2.0 * h),
        }
    }
}

/// `z' + k1 z = k2 z(t − r)` with history on `[−r, 0]`.
pub struct LinearDde {
    pub k1: f64,
    pub k2: f64,
    pub r: f64,
    pub history: History,
}

impl LinearDde {
    pub fn new(k1: f64, k2: f64, r: f64, history: History) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("delay must be positive, got {r}")));
        }
        if !(k1.is_finite() && k2.is_finite()) {
            return Err(Error::Domain("coefficients must be finite".into()));
        }
        Ok(Self { k1, k2, r, history })
    }

    /// `k̄ = k2 e^{k1 r}`.
    pub fn k_bar(&self) -> f64 {
        self.k2 * (self.k1 * self.r).exp()
    }

    fn history_slope(&self, s: f64) -> f64 {
        // keep the stencil inside [−r, 0]
        let h = self.r * 1e-6;
        let s = s.clamp(-self.r + h, -h);
        self.history.slope(s, h)
    }

    /// Variation-of-constants solution at `t ≥ 0`.
    pub fn solve_formula(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::Precondition("formula solution needs t >= 0".into()));
        }
        let (k1, r) = (self.k1, self.r);
        let kb = self.k_bar();
        let head = (-k1 * (t + r)).exp() * delayed_exp(kb, r, t) * self.history.at(-r);
        let integrand = |s: f64| (-k1 * (t - s)).exp() * delayed_exp(kb, r, t - r - s) * (self.history_slope(s) + k1 * self.history.at(s));
        // E(t − r − s) has kinks where t − r − s is a multiple of r
        let mut cuts = vec![-r];
        let mut j = ((t - r) / r).floor() as i64 - 1;
        loop {
            let s = t - r - j as f64 * r;
            if s >= 0.0 {
                j += 1;
                continue;
            }
            if s <= -r {
                break;
            }
            cuts.push(s);
            j += 1;
        }
        cuts.push(0.0);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * r);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            total += adaptive_simpson(&integrand, w[0], w[1], 1e-12 * r.max(1.0))?;
        }
        Ok(head + total)
    }

    /// RK4 oracle on the grid `t = 0, dt, …`.
    pub fn integrate(&self, t_end: f64, dt: f64) -> Result<Series<f64>> {
        let (k1, k2) = (self.k1, self.k2);
        integrate_dde_steps(|_, y: &f64, yd: &f64| -k1 * y + k2 * yd, |s| self.history.at(s), self.r, t_end, dt)
    }
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol {
        return Ok(left + right + err / 15.0);
    }
    if depth == 0 || !err.is_finite() {
        return Err(Error::numerical("adaptive Simpson did not converge", err.abs()));
    }
    Ok(simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// Far-field options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarfieldOptions {
    /// Target step; shrunk so it divides the delay.
    pub dt: f64,
    /// Blow-up guard as a multiple of `v+`.
    pub blowup_factor: f64,
    /// Largest admissible history amplitude as a fraction of `v+`.
    pub max_initial: f64,
}

impl Default for FarfieldOptions {
    fn default() -> Self {
        Self { dt: 1e-3, blowup_factor: 10.0, max_initial: 0.1 }
    }
}

/// Step not exceeding `target` that divides `r` exactly (any step if `r = 0`).
pub fn dividing_step(r: f64, target: f64) -> f64 {
    if r == 0.0 {
        target
    } else {
        r / (r / target).ceil()
    }
}

/// `z' + δ z = b(v+ + z(t − r)) − b(v+)`: the equation a front obeys far
/// behind its leading edge, written in the deviation from `v+`.
pub fn farfield_ode(mp: &ModelParams, history: &History, t_end: f64, opts: &FarfieldOptions) -> Result<Series<f64>> {
    mp.require_in_scope()?;
    let vp = mp.v_plus();
    let r = mp.r;
    let probe = (0..=64).map(|i| history.at(-r * i as f64 / 64.0).abs()).fold(0.0, f64::max);
    if probe > opts.max_initial * vp {
        return Err(Error::Precondition(format!("history amplitude {probe} exceeds {} v+", opts.max_initial)));
    }
    let dt = dividing_step(r, opts.dt);
    let b_plus = mp.birth_unchecked(vp);
    let delta = mp.delta;
    let rhs = |_: f64, z: &f64, zd: &f64| -delta * z + mp.birth_unchecked(vp + zd) - b_plus;
    let mut st = DdeStepper::new(rhs, |s| history.at(s), r, dt)?;
    let steps = (t_end / dt).round() as usize;
    let mut out = Series { t: vec![0.0], y: vec![*st.state()] };
    let guard = opts.blowup_factor * vp;
    for _ in 0..steps {
        st.step();
        let z = *st.state();
        if !(z.abs() <= guard) {
            return Err(Error::Stability(format!("far-field solution left |z| <= {guard} at t = {}", st.time())));
        }
        out.t.push(st.time());
        out.y.push(z);
    }
    Ok(out)
}

/// Outcome of checking `|z(t)| ≤ C e^{−ε1 (k1 − k2) t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayBoundReport {
    pub epsilon1: f64,
    pub c: f64,
    pub c0: f64,
    pub max_violation: f64,
    pub passed: bool,
}

/// Picks the largest `ε1` on the grid `0.01, …, 0.99` for which
/// `e^{−k1 t} E(t) e^{ε1 (k1 − k2) t}` stops growing over `[5r, t_end]`,
/// forms `C = C0 · sup` of that product, and measures how far `|z|` exceeds
/// the resulting bound on `t_grid`.
pub fn decay_bound_check(dde: &LinearDde, t_grid: &[f64]) -> Result<DecayBoundReport> {
    let (k1, k2, r) = (dde.k1, dde.k2, dde.r);
    if !(k1 >= k2 && k2 >= 0.0) {
        return Err(Error::Precondition("decay bound needs k1 >= k2 >= 0".into()));
    }
    if t_grid.is_empty() {
        return Err(Error::Precondition("empty time grid".into()));
    }
    let t_end = t_grid.iter().copied().fold(0.0, f64::max);
    let c0 = (-k1 * r).exp() * dde.history.at(-r).abs()
        + adaptive_simpson(&|s: f64| (k1 * s).exp() * (dde.history_slope(s) + k1 * dde.history.at(s)).abs(), -r, 0.0, 1e-12)?;
    let kb = dde.k_bar();
    let gap = k1 - k2;
    let samples = 400usize;
    let ts: Vec<f64> = (0..=samples).map(|i| t_end * i as f64 / samples as f64).collect();
    let window_start = 5.0 * r;
    let log_envelope = |eps: f64, t: f64| -k1 * t + delayed_exp(kb, r, t).ln() + eps * gap * t;
    let mut chosen = if gap == 0.0 { Some(0.99) } else { None };
    for i in (1..=99).rev().filter(|_| chosen.is_none()) {
        let eps = i as f64 / 100.0;
        let win: Vec<f64> = ts.iter().copied().filter(|&t| t >= window_start).collect();
        if win.len() < 2 {
            chosen = Some(eps);
            break;
        }
        let tail_start = win[0] + 0.9 * (win[win.len() - 1] - win[0]);
        let (mut head_max, mut tail_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &t in &win {
            let v = log_envelope(eps, t);
            if t < tail_start {
                head_max = head_max.max(v);
            } else {
                tail_max = tail_max.max(v);
            }
        }
        if tail_max <= head_max + 1e-12 {
            chosen = Some(eps);
            break;
        }
    }
    let Some(eps) = chosen else {
        return Ok(DecayBoundReport { epsilon1: f64::NAN, c: f64::NAN, c0, max_violation: f64::INFINITY, passed: false });
    };
    let sup = ts.iter().chain(t_grid).filter(|t| **t >= 0.0).map(|&t| log_envelope(eps, t)).fold(f64::NEG_INFINITY, f64::max).exp();
    let c = c0 * sup;
    let mut max_violation: f64 = 0.0;
    for &t in t_grid {
        let z = dde.solve_formula(t)?;
        let bound = c * (-eps * gap * t).exp();
        max_violation = max_violation.max(z.abs() - bound);
    }
    let passed = max_violation <= 1e-8 * c.max(1.0);
    Ok(DecayBoundReport { epsilon1: eps, c, c0, max_violation, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn delayed_exp_examples() {
        assert_eq!(delayed_exp(1.0, 1.0, -2.0), 0.0);
        assert_eq!(delayed_exp(1.0, 1.0, -0.5), 1.0);
        assert!((delayed_exp(1.0, 1.0, 0.5) - 1.5).abs() < 1e-15);
        assert!((delayed_exp(1.0, 1.0, 1.5) - 2.625).abs() < 1e-15);
        let z = delayed_exp(Complex64::new(0.0, 1.0), 1.0, 0.5);
        assert!((z - Complex64::new(1.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn delayed_exp_saturates_with_flag() {
        let pe = DelayedExpParams::new(50.0, 0.01).unwrap();
        let (v, flag) = pe.eval_flagged(400.0);
        assert!(flag && v.is_finite());
        assert!(!DelayedExpParams::new(1.0, 1.0).unwrap().eval_flagged(3.0).1);
    }

    #[test]
    fn delayed_exp_segment_identity() {
        for &(kb, r) in &[(1.0, 1.0), (0.7, 0.5), (-0.8, 1.3)] {
            for i in 0..30 {
                let t = 0.137 * i as f64;
                let integral = adaptive_simpson(&|s| delayed_exp(kb, r, s), -r, t - r, 1e-13).unwrap();
                assert!((delayed_exp(kb, r, t) - 1.0 - kb * integral).abs() < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn formula_without_coupling_is_pure_decay() {
        let dde = LinearDde::new(0.8, 0.0, 1.0, History::constant(1.0)).unwrap();
        for t in [0.0, 0.3, 1.0, 2.7, 6.0] {
            assert!((dde.solve_formula(t).unwrap() - (-0.8 * t).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn formula_without_decay_is_delayed_exp() {
        let dde = LinearDde::new(0.0, 0.6, 0.9, History::constant(1.0)).unwrap();
        for t in [0.0, 0.4, 1.0, 2.5, 5.1] {
            assert!((dde.solve_formula(t).unwrap() - delayed_exp(0.6, 0.9, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn formula_matches_rk4() {
        let dde = LinearDde::new(1.0, 0.5, 1.0, History::affine(1.0, 1.0)).unwrap();
        let s = dde.integrate(6.0, 1e-3).unwrap();
        for i in (0..s.len()).step_by(250) {
            assert!((dde.solve_formula(s.t[i]).unwrap() - s.y[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn formula_with_finite_difference_slope() {
        let exact = LinearDde::new(0.7, 0.3, 0.8, History::with_derivative(|s: f64| s.cos(), |s: f64| -s.sin())).unwrap();
        let fd = LinearDde::new(0.7, 0.3, 0.8, History::from_fn(|s: f64| s.cos())).unwrap();
        for t in [0.5, 1.7, 3.3] {
            assert!((exact.solve_formula(t).unwrap() - fd.solve_formula(t).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_undelayed_decay() {
        let s = integrate_dde_steps(|_, y: &f64, _: &f64| -2.0 * y, |_| 1.0, 0.5, 3.0, 0.01).unwrap();
        let last = *s.y.last().unwrap();
        assert!((last - (-6.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_reproduces_delayed_exp() {
        let r = 0.8;
        let s = integrate_dde_steps(|_, _: &f64, yd: &f64| 1.3 * yd, |_| 1.0, r, 5.0, r / 1000.0).unwrap();
        for (t, y) in s.t.iter().zip(&s.y) {
            assert!((y - delayed_exp(1.3, r, *t)).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_fourth_order() {
        let dde = LinearDde::new(1.0, -0.7, 1.0, History::from_fn(|s: f64| (2.0 * s).sin() + 1.0)).unwrap();
        let err = |dt: f64| {
            let s = dde.integrate(4.0, dt).unwrap();
            let reference = dde.integrate(4.0, dt / 16.0).unwrap();
            s.y.iter().enumerate().map(|(i, y)| (y - reference.y[16 * i]).abs()).fold(0.0, f64::max)
        };
        let ratio = err(0.05) / err(0.025);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_rejects_non_dividing_step() {
        let res = integrate_dde_steps(|_, y: &f64, _: &f64| -*y, |_| 1.0, 1.0, 2.0, 0.3);
        assert!(matches!(res, Err(Error::Config { .. })));
    }

    #[test]
    fn rk4_complex_and_vector_states() {
        let k = Complex64::new(-0.3, 0.8);
        let s = integrate_dde_steps(move |_, _: &Complex64, yd: &Complex64| k * yd, |_| Complex64::new(1.0, 0.0), 1.0, 4.0, 1e-3).unwrap();
        for (t, y) in s.t.iter().zip(&s.y).step_by(97) {
            assert!((y - delayed_exp(k, 1.0, *t)).norm() < 1e-8);
        }
        let v = integrate_dde_steps(
            |_, y: &Vec<f64>, yd: &Vec<f64>| vec![-y[0] + 0.5 * yd[0], -2.0 * y[1]],
            |_| vec![1.0, 1.0],
            1.0,
            2.0,
            1e-3,
        )
        .unwrap();
        let last = v.y.last().unwrap();
        assert!((last[1] - (-4.0f64).exp()).abs() < 1e-10);
        let dde = LinearDde::new(1.0, 0.5, 1.0, History::constant(1.0)).unwrap();
        assert!((last[0] - dde.solve_formula(2.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn farfield_examples() {
        let mp = ModelParams::new(1.0, 1.0, E * E, 1.0, 0.5).unwrap();
        let zero = farfield_ode(&mp, &History::constant(0.0), 5.0, &FarfieldOptions::default()).unwrap();
        assert!(zero.y.iter().all(|z| *z == 0.0));
        let too_big = History::constant(0.5 * mp.v_plus());
        assert!(matches!(farfield_ode(&mp, &too_big, 5.0, &FarfieldOptions::default()), Err(Error::Precondition(_))));
        let s = farfield_ode(&mp, &History::constant(0.05 * mp.v_plus()), 30.0, &FarfieldOptions::default()).unwrap();
        let late = s.y.last().unwrap().abs();
        assert!(late < 1e-6 * 0.05 * mp.v_plus());
    }

    #[test]
    fn farfield_without_delay_linearized() {
        let mp = ModelParams::new(1.0, 1.0, E * E, 1.0, 0.0).unwrap();
        let z0 = 1e-6;
        let s = farfield_ode(&mp, &History::constant(z0), 3.0, &FarfieldOptions::default()).unwrap();
        let rate = mp.birth_prime_at_v_plus() - 1.0;
        for (t, z) in s.t.iter().zip(&s.y).step_by(100) {
            assert!((z - z0 * (rate * t).exp()).abs() < 1e-3 * z0);
        }
    }

    #[test]
    fn decay_bound_examples() {
        let grid: Vec<f64> = (0..=60).map(|i| 0.5 * i as f64).collect();
        let equal = LinearDde::new(1.0, 1.0, 1.0, History::constant(1.0)).unwrap();
        let rep = decay_bound_check(&equal, &grid).unwrap();
        assert!(rep.passed);
        let pure = LinearDde::new(1.5, 0.0, 1.0, History::constant(1.0)).unwrap();
        let rep = decay_bound_check(&pure, &grid).unwrap();
        assert!(rep.passed && rep.epsilon1 == 0.99);
        let mixed = LinearDde::new(2.0, 1.0, 1.0, History::constant(1.0)).unwrap();
        let rep = decay_bound_check(&mixed, &grid).unwrap();
        assert!(rep.passed && rep.epsilon1 > 0.0 && rep.epsilon1 < 1.0);
        // the fitted slope of log|z| is at least as steep as the bound's
        let (za, zb) = (mixed.solve_formula(20.0).unwrap(), mixed.solve_formula(30.0).unwrap());
        assert!((zb.abs().ln() - za.abs().ln()) / 10.0 <= -rep.epsilon1 * 1.0 + 1e-2);
        assert!(decay_bound_check(&LinearDde::new(1.0, 2.0, 1.0, History::constant(1.0)).unwrap(), &grid).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(10))]
        #[test]
        fn formula_oracle_equivalence(k1 in 0.0f64..2.0, k2 in -1.0f64..1.5, r in 0.3f64..1.5, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let dde = LinearDde::new(k1, k2, r, History::with_derivative(move |s| a + b * s.sin(), move |s| b * s.cos())).unwrap();
            let dt = r / 400.0;
            let s = dde.integrate(4.0 * r, dt).unwrap();
            for i in (0..s.len()).step_by(97) {
                proptest::prop_assert!((dde.solve_formula(s.t[i]).unwrap() - s.y[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn delayed_exp_monotone_continuous(kb in 0.01f64..3.0, r in 0.1f64..2.0) {
            let mut last = delayed_exp(kb, r, -r);
            for i in 1..400 {
                let t = -r + i as f64 * 0.02;
                let v = delayed_exp(kb, r, t);
                proptest::prop_assert!(v >= last);
                last = v;
            }
            for j in 0..5 {
                let t = j as f64 * r;
                let jump = delayed_exp(kb, r, t) - delayed_exp(kb, r, t - 1e-10);
                proptest::prop_assert!(jump.abs() < 1e-6 * delayed_exp(kb, r, t).max(1.0));
            }
        }
    }
}
