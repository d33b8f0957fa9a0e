//! Travelling-wave profiles: solutions of
//! `c φ' − D φ'' + δ φ = b(φ(ξ − cr))`, `φ(−∞) = 0`, `φ(+∞) = v+`.
//!
//! The discretized profile equation is solved directly by damped Newton,
//! continued in the delay from `r = 0` with `c / c*(r)` held fixed. The
//! stencils are those of the `pde` module, so a profile computed on the
//! solver's grid is a discrete steady state of the perturbation equation.

use serde::{Deserialize, Serialize};

use crate::charspec::{classify_regime, lambda_pair, min_speed, RegimeLabel, WaveSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pde::{AdvectionScheme, Grid1D};

/// LU factorization with partial pivoting of a matrix with `kl` sub- and
/// `ku` super-diagonals. Rows are stored over absolute columns
/// `[i − kl, i + kl + ku]` to leave room for pivoting fill.
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    rows: Vec<Vec<f64>>,
    piv: Vec<usize>,
}

impl BandLu {
    fn width(kl: usize, ku: usize) -> usize {
        2 * kl + ku + 1
    }

    fn idx(&self, row: usize, col: usize) -> Option<usize> {
        let start = row as isize - self.kl as isize;
        let off = col as isize - start;
        (off >= 0 && (off as usize) < Self::width(self.kl, self.ku)).then_some(off as usize)
    }

    /// Empty `n × n` band matrix.
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self { n, kl, ku, rows: vec![vec![0.0; Self::width(kl, ku)]; n], piv: Vec::new() }
    }

    /// Adds `v` to entry `(i, j)`; `j` must lie within the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "entry ({i}, {j}) outside band");
        let k = self.idx(i, j).expect("entry outside band storage");
        self.rows[i][k] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.idx(i, j).map_or(0.0, |k| self.rows[i][k])
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j).expect("entry outside band storage");
        self.rows[i][k] = v;
    }

    /// Factorizes in place.
    pub fn factor(mut self) -> Result<Self> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        self.piv = (0..n).collect();
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::numerical(format!("singular band matrix at column {k}"), best));
            }
            let hi = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=hi {
                    let (a, b) = (self.get(k, j), self.get(p, j));
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
                self.piv[k] = p;
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last {
                let f = self.get(i, k) / pivot;
                if f == 0.0 {
                    continue;
                }
                self.set(i, k, f);
                for j in k + 1..=hi {
                    let v = self.get(i, j) - f * self.get(k, j);
                    self.set(i, j, v);
                }
            }
        }
        Ok(self)
    }

    /// Solves `A x = b` with the factorization.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut x = b.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let last = (k + kl).min(n - 1);
            for i in k + 1..=last {
                x[i] -= self.get(i, k) * x[k];
            }
        }
        for k in (0..n).rev() {
            let hi = (k + kl + ku).min(n - 1);
            let mut s = x[k];
            for j in k + 1..=hi {
                s -= self.get(k, j) * x[j];
            }
            x[k] = s / self.get(k, k);
        }
        x
    }
}

/// Newton and continuation controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Max-norm residual accepted at the target delay.
    pub tol: f64,
    pub max_newton: usize,
    /// Smallest continuation step in `r` before giving up.
    pub min_step: f64,
    /// Initial continuation step in `r`.
    pub initial_step: f64,
    /// The solve window starts where the tail `e^{λξ}` has dropped by `e^{-tail_depth}`
    /// below the pin; further left the tail is filled in analytically.
    pub tail_depth: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_newton: 60, min_step: 1e-4, initial_step: 0.1, tail_depth: 30.0 }
    }
}

/// A computed profile on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveProfile {
    pub grid: Grid1D,
    pub phi: Vec<f64>,
    pub c: f64,
    pub r: f64,
    pub v_plus: f64,
    /// Exponent of the left tail `φ ~ φ(−L) e^{λ(ξ + L)}` used beyond the grid.
    pub lambda_tail: f64,
    pub residual: f64,
    pub crossings: usize,
}

impl WaveProfile {
    /// Profile value anywhere on the line: linear interpolation on the grid,
    /// exponential tail on the left, `v+` on the right.
    pub fn eval(&self, xi: f64) -> f64 {
        let g = &self.grid;
        let left = -g.half_width;
        if xi <= left {
            return self.phi[0] * (self.lambda_tail * (xi - left)).exp();
        }
        if xi >= g.half_width {
            return self.v_plus;
        }
        let pos = (xi - left) / g.dx();
        let i = (pos.floor() as usize).min(g.n - 2);
        let th = pos - i as f64;
        (1.0 - th) * self.phi[i] + th * self.phi[i + 1]
    }
}

/// Delayed-read weights: `φ(ξ_i − s) = Σ w φ_j`, with indices left of the
/// grid folded onto `φ_0` through the tail exponential.
struct ShiftStencil {
    cells: usize,
    frac: f64,
    dx: f64,
}

impl ShiftStencil {
    fn new(shift: f64, dx: f64) -> Self {
        let q = shift / dx;
        let mut cells = q.floor();
        let mut frac = q - cells;
        if frac > 1.0 - 1e-9 {
            cells += 1.0;
            frac = 0.0;
        } else if frac < 1e-9 {
            frac = 0.0;
        }
        Self { cells: cells as usize, frac, dx }
    }

    /// `(column, weight)` pairs for row `i`.
    fn weights(&self, i: usize, lambda_tail: f64) -> [(usize, f64); 2] {
        let term = |j: isize, w: f64| -> (usize, f64) {
            if j >= 0 {
                (j as usize, w)
            } else {
                (0, w * (lambda_tail * j as f64 * self.dx).exp())
            }
        };
        let j = i as isize - self.cells as isize;
        [term(j, 1.0 - self.frac), term(j - 1, self.frac)]
    }
}

struct Discretization<'a> {
    mp: &'a ModelParams,
    c: f64,
    dx: f64,
    n: usize,
    scheme: AdvectionScheme,
    stencil: ShiftStencil,
    lambda_tail: f64,
    pin: (usize, f64),
    v_plus: f64,
}

impl<'a> Discretization<'a> {
    /// Equations on the `n` grid points starting at `x_start`.
    fn new(mp: &'a ModelParams, c: f64, dx: f64, x_start: f64, n: usize, lambda_tail: f64) -> Self {
        let scheme = if c.abs() * dx <= 2.0 * mp.diffusion { AdvectionScheme::Central } else { AdvectionScheme::Upwind };
        let pos = -x_start / dx;
        let j = (pos.floor() as usize).min(n - 2);
        Self { mp, c, dx, n, scheme, stencil: ShiftStencil::new(c * mp.r, dx), lambda_tail, pin: (j, pos - j as f64), v_plus: mp.v_plus() }
    }

    /// Coefficients of `φ_{i−1}, φ_i, φ_{i+1}` in `c φ' − D φ''`.
    fn linear_weights(&self) -> (f64, f64, f64) {
        let (d, c, dx) = (self.mp.diffusion, self.c, self.dx);
        let diff = d / (dx * dx);
        match self.scheme {
            AdvectionScheme::Central => (-c / (2.0 * dx) - diff, 2.0 * diff, c / (2.0 * dx) - diff),
            AdvectionScheme::Upwind => {
                let (up, down) = (c.max(0.0) / dx, (-c).max(0.0) / dx);
                (-up - diff, 2.0 * diff + up + down, -down - diff)
            }
        }
    }

    fn delayed(&self, phi: &[f64], i: usize) -> f64 {
        self.stencil.weights(i, self.lambda_tail).iter().map(|(j, w)| w * phi[*j]).sum()
    }

    /// Residual of the interior rows `1..n−1` (index 0 and n−1 unused).
    fn interior_residual(&self, phi: &[f64]) -> Vec<f64> {
        let (wl, wc, wr) = self.linear_weights();
        let delta = self.mp.delta;
        let mut out = vec![0.0; self.n];
        for i in 1..self.n - 1 {
            out[i] = wl * phi[i - 1] + (wc + delta) * phi[i] + wr * phi[i + 1] - self.mp.birth_unchecked(self.delayed(phi, i));
        }
        out
    }

    /// Unknowns `(φ_0..φ_{n−1}, ε)`; rows: `φ_0 − ε`, interior equations,
    /// `φ_{n−1} − v+`, and the pin `φ(0) − v+/2`.
    fn residual(&self, phi: &[f64], eps: f64) -> (Vec<f64>, f64) {
        let mut f = self.interior_residual(phi);
        f[0] = phi[0] - eps;
        f[self.n - 1] = phi[self.n - 1] - self.v_plus;
        let (j, th) = self.pin;
        let pin = (1.0 - th) * phi[j] + th * phi[j + 1] - 0.5 * self.v_plus;
        (f, pin)
    }

    fn jacobian(&self, phi: &[f64]) -> Result<BandLu> {
        let n = self.n;
        let kl = self.stencil.cells + 2;
        let mut a = BandLu::zeros(n, kl, 1);
        let (wl, wc, wr) = self.linear_weights();
        a.add(0, 0, 1.0);
        a.add(n - 1, n - 1, 1.0);
        for i in 1..n - 1 {
            a.add(i, i - 1, wl);
            a.add(i, i, wc + self.mp.delta);
            a.add(i, i + 1, wr);
            let bp = self.mp.birth_prime_unchecked(self.delayed(phi, i));
            for (j, w) in self.stencil.weights(i, self.lambda_tail) {
                if w != 0.0 {
                    a.add(i, j, -bp * w);
                }
            }
        }
        a.factor()
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton on the bordered system; returns the final residual.
fn newton(disc: &Discretization, phi: &mut Vec<f64>, opts: &ProfileOptions, tol: f64) -> Result<f64> {
    let n = disc.n;
    let mut eps = phi[0];
    let norm = |phi: &[f64], eps: f64| {
        let (f, p) = disc.residual(phi, eps);
        sup(&f).max(p.abs())
    };
    let mut res = norm(phi, eps);
    for _ in 0..opts.max_newton {
        if res <= tol {
            return Ok(res);
        }
        let (f, pin) = disc.residual(phi, eps);
        let lu = disc.jacobian(phi)?;
        // J = [A −e0; pᵀ 0]: solve A y = f, A z = e0, then the border
        let y = lu.solve(&f);
        let mut e0 = vec![0.0; n];
        e0[0] = 1.0;
        let z = lu.solve(&e0);
        let (j, th) = disc.pin;
        let py = (1.0 - th) * y[j] + th * y[j + 1];
        let pz = (1.0 - th) * z[j] + th * z[j + 1];
        if pz == 0.0 || !pz.is_finite() {
            return Err(Error::numerical("pin row is degenerate", pz));
        }
        let d_eps = (pin - py) / pz;
        // Newton step: δφ = y + z δε (the −e0 column moves to the right side)
        let step: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + b * d_eps).collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = phi.iter().zip(&step).map(|(p, s)| p - t * s).collect();
            let e_trial = eps - t * d_eps;
            let r = norm(&trial, e_trial);
            if r.is_finite() && (r < (1.0 - 1e-4 * t) * res || r <= tol) {
                *phi = trial;
                eps = e_trial;
                res = r;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res <= tol {
        Ok(res)
    } else {
        Err(Error::Convergence { message: "profile Newton iteration stalled".into(), residual: res })
    }
}

/// Tail exponent: the slower root `λ1` above `c*`, `λ*` at `c*`.
fn tail_exponent(mp: &ModelParams, c: f64) -> Result<f64> {
    let (c_star, l_star) = min_speed(mp)?;
    if c <= c_star * (1.0 + 1e-9) {
        Ok(l_star)
    } else {
        Ok(lambda_pair(mp, c)?.0)
    }
}

/// Computes the profile of speed `ws.c` on `grid`.
pub fn compute_profile(ws: &WaveSpec, mp: &ModelParams, grid: &Grid1D, opts: &ProfileOptions) -> Result<WaveProfile> {
    if mp.ratio() <= 1.0 {
        return Err(Error::Regime("no front without a positive equilibrium".into()));
    }
    if mp.regime().in_scope() && classify_regime(mp, ws.c)? == RegimeLabel::NoWave {
        return Err(Error::Regime(format!("no travelling wave of speed {} at r = {}", ws.c, mp.r)));
    }
    let (c_star, _) = min_speed(mp)?;
    let factor = ws.c / c_star;
    let speed_at = |m: &ModelParams| -> Result<f64> {
        let (cs, _) = min_speed(m)?;
        Ok(if ws.critical { cs } else { factor * cs })
    };
    let vp = mp.v_plus();
    let start = mp.with_delay(0.0)?;
    let c0 = speed_at(&start)?;
    let l0 = tail_exponent(&start, c0)?;
    let lambda_tail = tail_exponent(mp, ws.c)?;
    // a free left end over hundreds of e-folds is hopelessly ill-conditioned
    let dx = grid.dx();
    let depth = opts.tail_depth / lambda_tail.min(l0);
    let i0 = (((grid.half_width - depth) / dx).floor().max(0.0) as usize).min(grid.n / 2);
    let x_start = grid.x(i0);
    let n_sub = grid.n - i0;
    if x_start >= -2.0 * dx || n_sub < 5 {
        return Err(Error::config("L", "grid does not contain the pin point xi = 0"));
    }
    let mut phi: Vec<f64> = (0..n_sub).map(|i| vp / (1.0 + (-l0 * (x_start + i as f64 * dx)).exp())).collect();
    let loose = opts.tol.max(1e-8);
    let solve_at = |r: f64, phi: &mut Vec<f64>, tol: f64| -> Result<f64> {
        let m = mp.with_delay(r)?;
        let c = if r == mp.r { ws.c } else { speed_at(&m)? };
        let disc = Discretization::new(&m, c, dx, x_start, n_sub, tail_exponent(&m, c)?);
        newton(&disc, phi, opts, tol)
    };
    let mut r_done = 0.0;
    if mp.r == 0.0 {
        solve_at(0.0, &mut phi, opts.tol)?;
    } else {
        solve_at(0.0, &mut phi, loose)?;
        let mut h = opts.initial_step.min(mp.r);
        while r_done < mp.r {
            let r_next = (r_done + h).min(mp.r);
            let tol = if r_next == mp.r { opts.tol } else { loose };
            let mut trial = phi.clone();
            match solve_at(r_next, &mut trial, tol) {
                Ok(_) => {
                    phi = trial;
                    r_done = r_next;
                    h *= 1.5;
                }
                Err(e) => {
                    h *= 0.5;
                    if h < opts.min_step {
                        return Err(match e {
                            Error::Convergence { residual, .. } => {
                                Error::Convergence { message: format!("continuation in r stalled at r = {r_done}"), residual }
                            }
                            other => other,
                        });
                    }
                }
            }
        }
    }
    let mut full = Vec::with_capacity(grid.n);
    full.extend((0..i0).map(|i| phi[0] * (lambda_tail * (grid.x(i) - x_start)).exp()));
    full.extend_from_slice(&phi);
    let mut wp = WaveProfile { grid: *grid, phi: full, c: ws.c, r: mp.r, v_plus: vp, lambda_tail, residual: 0.0, crossings: 0 };
    wp.residual = profile_residual(&wp, mp);
    wp.crossings = count_crossings(&wp).0;
    if wp.phi[0].abs() > 1e-6 {
        return Err(Error::Convergence {
            message: format!("profile has not decayed at the left end (phi(-L) = {:e}); enlarge L", wp.phi[0]),
            residual: wp.residual,
        });
    }
    Ok(wp)
}

/// Max-norm residual of the discretized profile equation over the interior.
pub fn profile_residual(wp: &WaveProfile, mp: &ModelParams) -> f64 {
    let g = &wp.grid;
    let disc = Discretization::new(mp, wp.c, g.dx(), -g.half_width, g.n, wp.lambda_tail);
    sup(&disc.interior_residual(&wp.phi))
}

/// Shape of a computed front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileLabel {
    Monotone,
    Oscillatory,
    Ambiguous,
}

/// Relative noise floor on `|φ − v+|` for crossing counts.
pub const CROSSING_FLOOR: f64 = 1e-6;

/// Sign changes of `φ − v+` on `ξ ≥ 0` above the noise floor, and the
/// largest excursion after the first crossing.
fn count_crossings(wp: &WaveProfile) -> (usize, f64) {
    let floor = CROSSING_FLOOR * wp.v_plus;
    let mut last_sign = 0i8;
    let mut count = 0;
    let mut amplitude: f64 = 0.0;
    for (i, &v) in wp.phi.iter().enumerate() {
        if wp.grid.x(i) < 0.0 {
            continue;
        }
        let dev = v - wp.v_plus;
        if count > 0 {
            amplitude = amplitude.max(dev.abs());
        }
        if dev.abs() <= floor {
            continue;
        }
        let s = if dev > 0.0 { 1 } else { -1 };
        if last_sign != 0 && s != last_sign {
            count += 1;
            amplitude = amplitude.max(dev.abs());
        }
        last_sign = s;
    }
    (count, amplitude)
}

/// Monotone, oscillatory, or too close to call.
pub fn classify_profile(wp: &WaveProfile) -> ProfileLabel {
    let floor = CROSSING_FLOOR * wp.v_plus;
    let (crossings, amplitude) = count_crossings(wp);
    if crossings >= 2 && amplitude > 10.0 * floor {
        return ProfileLabel::Oscillatory;
    }
    if crossings >= 1 {
        return ProfileLabel::Ambiguous;
    }
    let monotone = wp.phi.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    if monotone {
        ProfileLabel::Monotone
    } else {
        ProfileLabel::Ambiguous
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::DelayField;
    use std::f64::consts::E;

    #[test]
    fn band_lu_solves_with_pivoting() {
        let n = 40;
        let (kl, ku) = (3, 1);
        let mut a = BandLu::zeros(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                // weak diagonal forces row exchanges
                let v = if i == j { 0.1 } else { 1.0 + ((i * 31 + j * 17) % 7) as f64 };
                a.add(i, j, v);
                dense[i][j] = v;
            }
        }
        let lu = a.factor().unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = dense.iter().map(|row| row.iter().zip(&x_true).map(|(a, x)| a * x).sum()).collect();
        let x = lu.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    fn profile_for(mp: &ModelParams, factor: f64, l: f64, n: usize) -> WaveProfile {
        let ws = WaveSpec::from_factor(mp, factor).unwrap();
        compute_profile(&ws, mp, &Grid1D::new(l, n).unwrap(), &ProfileOptions::default()).unwrap()
    }

    #[test]
    fn kpp_front_without_delay_is_monotone() {
        let mp = ModelParams::new(1.0, 1.0, 2.0, 1.0, 0.0).unwrap();
        let wp = profile_for(&mp, 1.0, 40.0, 801);
        assert!(wp.residual < 1e-6);
        assert_eq!(wp.crossings, 0);
        assert_eq!(classify_profile(&wp), ProfileLabel::Monotone);
        assert!((wp.eval(0.0) - 0.5 * wp.v_plus).abs() < 1e-9);
    }

    #[test]
    fn equilibria_have_zero_residual() {
        let mp = ModelParams::reference();
        let g = Grid1D::new(10.0, 101).unwrap();
        for level in [0.0, mp.v_plus()] {
            let wp = WaveProfile {
                grid: g,
                phi: vec![level; g.n],
                c: 1.0,
                r: mp.r,
                v_plus: mp.v_plus(),
                lambda_tail: 0.0,
                residual: 0.0,
                crossings: 0,
            };
            assert!(profile_residual(&wp, &mp) < 1e-14);
        }
    }

    #[test]
    fn constructed_shapes_classify() {
        let g = Grid1D::new(20.0, 401).unwrap();
        let mk = |f: &dyn Fn(f64) -> f64| WaveProfile {
            grid: g,
            phi: g.points().iter().map(|&x| f(x)).collect(),
            c: 1.0,
            r: 0.0,
            v_plus: 1.0,
            lambda_tail: 1.0,
            residual: 0.0,
            crossings: 0,
        };
        let tanh = mk(&|x: f64| 0.5 * (1.0 + x.tanh()));
        assert_eq!(classify_profile(&tanh), ProfileLabel::Monotone);
        let ringing = mk(&|x: f64| if x > 0.0 { 1.0 + (-x).exp() * x.sin() } else { 0.5 * (1.0 + x.tanh()) });
        assert_eq!(classify_profile(&ringing), ProfileLabel::Oscillatory);
        let single = mk(&|x: f64| if x > 0.0 { 1.0 + 0.1 * x * (-x).exp() } else { 0.5 * (1.0 + x.tanh()) });
        // one overshoot that never crosses back is not monotone either
        assert_eq!(classify_profile(&single), ProfileLabel::Ambiguous);
    }

    #[test]
    fn oscillatory_front_in_strong_regime() {
        let mp = ModelParams::new(1.0, 1.0, E.powi(3), 1.0, 1.0).unwrap();
        let wp = profile_for(&mp, 1.1, 60.0, 1201);
        assert!(wp.residual < 1e-6);
        assert!(wp.crossings >= 2);
        assert_eq!(classify_profile(&wp), ProfileLabel::Oscillatory);
    }

    #[test]
    fn moderate_regime_fast_wave_oscillates() {
        let mp = ModelParams::new(1.0, 1.0, E * E, 1.0, 1.0).unwrap();
        let (c_up, _) = crate::charspec::upper_speed(&mp).unwrap().unwrap();
        let (c_star, _) = min_speed(&mp).unwrap();
        let factor = (1.3 * c_up / c_star).max(1.3);
        let wp = profile_for(&mp, factor, 60.0, 1201);
        assert_eq!(classify_profile(&wp), ProfileLabel::Oscillatory);
    }

    #[test]
    fn left_tail_slope_between_roots() {
        let mp = ModelParams::new(1.0, 1.0, E * E, 1.0, 0.3).unwrap();
        let wp = profile_for(&mp, 1.3, 40.0, 801);
        let ws = WaveSpec::from_factor(&mp, 1.3).unwrap();
        let (l1, l2) = lambda_pair(&mp, ws.c).unwrap();
        let (a, b) = (wp.eval(-30.0), wp.eval(-20.0));
        let slope = (b.ln() - a.ln()) / 10.0;
        assert!(slope > l1 - 1e-3 && slope < l2, "{slope} not in [{l1}, {l2}]");
    }

    #[test]
    fn profile_is_a_steady_state_of_the_perturbation_solver() {
        let mp = ModelParams::new(1.0, 1.0, E * E, 1.0, 0.5).unwrap();
        let ws = WaveSpec::from_factor(&mp, 1.2).unwrap();
        let g = Grid1D::new(40.0, 801).unwrap();
        let wp = compute_profile(&ws, &mp, &g, &ProfileOptions::default()).unwrap();
        let prof = |x: f64| wp.eval(x);
        let mut f = DelayField::perturbation(&ws, &mp, &prof, g, &|_, _| 0.0, None).unwrap();
        f.advance_to(5.0).unwrap();
        assert!(f.sup_norm() <= 10.0 * wp.residual.max(1e-14) * 5.0 + 1e-12, "{}", f.sup_norm());
    }

    #[test]
    fn no_wave_beyond_hopf_delay() {
        let mp = ModelParams::new(1.0, 1.0, E.powi(3), 1.0, 2.0).unwrap();
        let ws = WaveSpec::critical(&mp).unwrap();
        let res = compute_profile(&ws, &mp, &Grid1D::new(20.0, 201).unwrap(), &ProfileOptions::default());
        assert!(matches!(res, Err(Error::Regime(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn classification_of_constructed_fronts(k in 2.0f64..5.0, amp in 0.05f64..0.5, decay in 0.2f64..0.6, freq in 2.0f64..5.0) {
            let g = Grid1D::new(30.0, 601).unwrap();
            let mk = |f: &dyn Fn(f64) -> f64| WaveProfile {
                grid: g,
                phi: g.points().iter().map(|&x| f(x)).collect(),
                c: 1.0,
                r: 0.0,
                v_plus: 1.0,
                lambda_tail: 1.0,
                residual: 0.0,
                crossings: 0,
            };
            let logistic = mk(&|x: f64| 1.0 / (1.0 + (-k * x).exp()));
            proptest::prop_assert_eq!(classify_profile(&logistic), ProfileLabel::Monotone);
            let ringing = mk(&|x: f64| {
                let base = 1.0 / (1.0 + (-k * x).exp());
                if x > 0.0 { base + amp * (-decay * x).exp() * (freq * x).sin() } else { base }
            });
            proptest::prop_assert_eq!(classify_profile(&ringing), ProfileLabel::Oscillatory);
        }
    }
}
