//! Characteristic (dispersion) analysis of the front equation.
//!
//! Near `v− = 0` a front decays like `e^{λξ}` where `λ` solves
//! `cλ − Dλ² + δ = p e^{−λcr}`. The minimal speed `c*` is the tangency of the
//! two sides; above it the equation has two real roots `λ1 < λ2`. Near `v+`
//! the exponent solves `−cλ − Dλ² + δ = b'(v+) e^{λcr}`, and the loss of real
//! roots there marks oscillating fronts. Delay thresholds come from the
//! scalar equation `v' + δv = b'(v+) v(t − r)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamRegime};
use crate::roots::{bisect, expand_until};

/// Relative residual accepted from the characteristic root finders.
pub const ROOT_TOL: f64 = 1e-10;
/// Absolute tolerance for regime-boundary comparisons.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Exponent clamp (natural-log scale) for weight evaluation.
pub const WEIGHT_EXP_CLAMP: f64 = 700.0;

/// Gap `g(λ) = cλ − Dλ² + δ − p e^{−λcr}`; positive between `λ1` and `λ2`.
pub fn gap(mp: &ModelParams, c: f64, lambda: f64) -> f64 {
    c * lambda - mp.diffusion * lambda * lambda + mp.delta - mp.p * (-lambda * c * mp.r).exp()
}

/// `∂g/∂λ`.
pub fn gap_slope(mp: &ModelParams, c: f64, lambda: f64) -> f64 {
    c - 2.0 * mp.diffusion * lambda + c * mp.r * mp.p * (-lambda * c * mp.r).exp()
}

fn tangency_residuals(mp: &ModelParams, c: f64, lambda: f64) -> (f64, f64) {
    let e = mp.p * (-lambda * c * mp.r).exp();
    let s1 = mp.delta + e + (c * lambda).abs() + mp.diffusion * lambda * lambda;
    let s2 = c.abs() + 2.0 * mp.diffusion * lambda.abs() + c.abs() * mp.r * e;
    (gap(mp, c, lambda) / s1, gap_slope(mp, c, lambda) / s2)
}

/// Maximiser of the concave gap function for fixed `c`.
fn gap_argmax(mp: &ModelParams, c: f64) -> Result<f64> {
    let hi = expand_until(1.0, 2.0, 200, |l| gap_slope(mp, c, l) < 0.0)
        .ok_or_else(|| Error::numerical("gap slope never turns negative", f64::NAN))?;
    bisect(|l| gap_slope(mp, c, l), 0.0, hi)
}

/// Minimal wave speed and its tangency exponent.
pub fn min_speed(mp: &ModelParams) -> Result<(f64, f64)> {
    if mp.ratio() <= 1.0 {
        return Err(Error::Regime("minimal speed needs p/delta > 1".into()));
    }
    let c0 = 2.0 * (mp.diffusion * (mp.p - mp.delta)).sqrt();
    let l0 = ((mp.p - mp.delta) / mp.diffusion).sqrt();
    if mp.r == 0.0 {
        return Ok((c0, l0));
    }
    if let Some(pair) = newton_tangency(mp, c0, l0) {
        return Ok(pair);
    }
    // The closed-form start can sit far from the delayed tangency; fall back to
    // the nested bracket (c* is where the maximum of g over λ reaches zero).
    let peak = |c: f64| -> f64 {
        match gap_argmax(mp, c) {
            Ok(l) => gap(mp, c, l),
            Err(_) => f64::NAN,
        }
    };
    let c_hi = expand_until(c0.max(1e-3), 2.0, 200, |c| peak(c) > 0.0)
        .ok_or_else(|| Error::numerical("no speed with a real decay exponent", f64::NAN))?;
    let c = bisect(peak, 0.0, c_hi)?;
    let l = gap_argmax(mp, c)?;
    match newton_tangency(mp, c, l) {
        Some(pair) => Ok(pair),
        None => {
            let (r1, r2) = tangency_residuals(mp, c, l);
            if r1.abs() <= ROOT_TOL && r2.abs() <= ROOT_TOL {
                Ok((c, l))
            } else {
                Err(Error::numerical("tangency Newton did not converge", r1.abs().max(r2.abs())))
            }
        }
    }
}

/// Damped 2×2 Newton on both tangency equations; `None` when it stalls.
fn newton_tangency(mp: &ModelParams, mut c: f64, mut l: f64) -> Option<(f64, f64)> {
    let (d, r, p) = (mp.diffusion, mp.r, mp.p);
    let norm = |c: f64, l: f64| {
        let (a, b) = tangency_residuals(mp, c, l);
        a.abs().max(b.abs())
    };
    let mut res = norm(c, l);
    for _ in 0..100 {
        if res <= 1e-14 {
            break;
        }
        let e = p * (-l * c * r).exp();
        let f1 = gap(mp, c, l);
        let f2 = gap_slope(mp, c, l);
        let j11 = l + l * r * e;
        let j12 = c - 2.0 * d * l + c * r * e;
        let j21 = 1.0 + r * e * (1.0 - c * l * r);
        let j22 = -2.0 * d - c * c * r * r * e;
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let dc = (f1 * j22 - f2 * j12) / det;
        let dl = (j11 * f2 - j21 * f1) / det;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (cn, ln) = (c - step * dc, l - step * dl);
            if cn > 0.0 && ln > 0.0 {
                let rn = norm(cn, ln);
                if rn < res || rn <= 1e-14 {
                    c = cn;
                    l = ln;
                    res = rn;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (res <= ROOT_TOL).then_some((c, l))
}

/// The two real roots `λ1 < λ2` of the characteristic equation at speed `c > c*`.
pub fn lambda_pair(mp: &ModelParams, c: f64) -> Result<(f64, f64)> {
    let (c_star, _) = min_speed(mp)?;
    if c <= c_star {
        return Err(Error::Precondition(format!("speed {c} does not exceed c* = {c_star}")));
    }
    let l_max = gap_argmax(mp, c)?;
    if gap(mp, c, l_max) <= 0.0 {
        return Err(Error::numerical("gap maximum is not positive", gap(mp, c, l_max)));
    }
    let l1 = bisect(|l| gap(mp, c, l), 0.0, l_max)?;
    let hi = expand_until(2.0 * l_max + 1.0, 2.0, 200, |l| gap(mp, c, l) < 0.0)
        .ok_or_else(|| Error::numerical("no upper bracket for lambda2", f64::NAN))?;
    let l2 = bisect(|l| gap(mp, c, l), l_max, hi)?;
    Ok((l1, l2))
}

/// Delay thresholds: `r̲` (onset of oscillation of the delayed linear equation,
/// absent when `p/δ ≤ e`) and the Hopf delay `r̄` (infinite unless `p/δ > e²`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayThresholds {
    pub r_under: Option<f64>,
    pub r_bar: f64,
}

pub fn delay_thresholds(mp: &ModelParams) -> Result<DelayThresholds> {
    let l = mp.log_ratio();
    let d = mp.delta;
    let r_under = if l > 1.0 {
        let f = |r: f64| d * (l - 1.0) * r * (d * r + 1.0).exp() - 1.0;
        let hi = expand_until(1.0 / d, 2.0, 200, |r| f(r) > 0.0).ok_or_else(|| Error::numerical("no bracket for r_under", f64::NAN))?;
        Some(bisect(f, 0.0, hi)?)
    } else {
        None
    };
    let r_bar = if l > 2.0 {
        let s = ((l - 2.0) * l).sqrt();
        (PI - s.atan()) / (d * s)
    } else {
        f64::INFINITY
    };
    Ok(DelayThresholds { r_under, r_bar })
}

/// `h(λ) = δ − cλ − Dλ² − b'(v+) e^{λcr}`; its positive zeros are the
/// monotone decay exponents of a front towards `v+`.
pub fn upper_char(mp: &ModelParams, c: f64, lambda: f64) -> f64 {
    mp.delta - c * lambda - mp.diffusion * lambda * lambda - mp.birth_prime_at_v_plus() * (lambda * c * mp.r).exp()
}

fn upper_char_slope(mp: &ModelParams, c: f64, lambda: f64) -> f64 {
    -c - 2.0 * mp.diffusion * lambda - mp.birth_prime_at_v_plus() * c * mp.r * (lambda * c * mp.r).exp()
}

/// Interior minimiser of `h` on `λ > 0`, if any.
fn upper_char_argmin(mp: &ModelParams, c: f64) -> Result<Option<f64>> {
    let k = -mp.birth_prime_at_v_plus();
    let cr = c * mp.r;
    if k <= 0.0 || cr <= 0.0 {
        return Ok(None);
    }
    let turn = ((2.0 * mp.diffusion / (k * cr * cr)).ln() / cr).max(0.0);
    if upper_char_slope(mp, c, turn) >= 0.0 {
        return Ok(None);
    }
    let hi = expand_until(turn + 1.0, 2.0, 200, |l| upper_char_slope(mp, c, l) > 0.0)
        .ok_or_else(|| Error::numerical("no bracket for the minimum of h", f64::NAN))?;
    Ok(Some(bisect(|l| upper_char_slope(mp, c, l), turn, hi)?))
}

/// Smallest positive real exponent at `v+` for speed `c`, or `None` when the
/// front oscillates around `v+` at this speed.
pub fn upper_root(mp: &ModelParams, c: f64) -> Result<Option<f64>> {
    if mp.ratio() <= 1.0 {
        return Err(Error::Regime("upper characteristic needs p/delta > 1".into()));
    }
    let bp = mp.birth_prime_at_v_plus();
    let d = mp.diffusion;
    let k = -bp;
    if mp.r == 0.0 || k <= 0.0 || c == 0.0 {
        if k < 0.0 && mp.r > 0.0 {
            return Err(Error::Regime("upper characteristic is only analysed for p/delta >= e".into()));
        }
        // quadratic: Dλ² + cλ − (δ − b') = 0
        let q = mp.delta - bp;
        return Ok(Some((-c + (c * c + 4.0 * d * q).sqrt()) / (2.0 * d)));
    }
    let Some(l_min) = upper_char_argmin(mp, c)? else {
        return Ok(None);
    };
    if upper_char(mp, c, l_min) > 0.0 {
        return Ok(None);
    }
    Ok(Some(bisect(|l| upper_char(mp, c, l), 0.0, l_min)?))
}

fn upper_has_root(mp: &ModelParams, c: f64) -> bool {
    match upper_char_argmin(mp, c) {
        Ok(Some(l)) => upper_char(mp, c, l) <= 0.0,
        _ => false,
    }
}

/// Tangency speed `c^*` above which fronts oscillate around `v+`, with its
/// exponent. `None` when real roots exist for every speed (`r ≤ r̲`).
pub fn upper_speed(mp: &ModelParams) -> Result<Option<(f64, f64)>> {
    mp.require_in_scope()?;
    let th = delay_thresholds(mp)?;
    let r_under = th.r_under.unwrap_or(0.0);
    if mp.r <= r_under {
        return Ok(None);
    }
    let (c_star, _) = min_speed(mp)?;
    let mut c_lo = c_star;
    let mut found = upper_has_root(mp, c_lo);
    for _ in 0..200 {
        if found {
            break;
        }
        c_lo *= 0.5;
        found = upper_has_root(mp, c_lo);
    }
    if !found {
        return Err(Error::numerical("no speed with a real exponent at v+", f64::NAN));
    }
    let Some(c_hi) = expand_until(2.0 * c_lo, 2.0, 400, |c| !upper_has_root(mp, c)) else {
        return Ok(None);
    };
    let sign = |c: f64| if upper_has_root(mp, c) { -1.0 } else { 1.0 };
    let c = bisect(sign, c_lo, c_hi)?;
    let l = upper_char_argmin(mp, c)?.ok_or_else(|| Error::numerical("tangency exponent vanished", f64::NAN))?;
    let (c, l) = polish_upper(mp, c, l);
    let scale = mp.delta + (c * l).abs() + mp.diffusion * l * l + (-mp.birth_prime_at_v_plus()) * (l * c * mp.r).exp();
    let res = upper_char(mp, c, l).abs() / scale;
    if res > ROOT_TOL {
        return Err(Error::numerical("upper tangency residual too large", res));
    }
    Ok(Some((c, l)))
}

/// Newton on `h = 0, h' = 0`; returns the input when a step does not improve.
fn polish_upper(mp: &ModelParams, c0: f64, l0: f64) -> (f64, f64) {
    let (d, r) = (mp.diffusion, mp.r);
    let k = -mp.birth_prime_at_v_plus();
    let (mut c, mut l) = (c0, l0);
    let norm = |c: f64, l: f64| upper_char(mp, c, l).abs() + upper_char_slope(mp, c, l).abs();
    for _ in 0..20 {
        let e = k * (l * c * r).exp();
        let f1 = upper_char(mp, c, l);
        let f2 = upper_char_slope(mp, c, l);
        // ∂h/∂c, ∂h/∂λ, ∂h'/∂c, ∂h'/∂λ
        let j11 = -l + e * l * r;
        let j12 = f2;
        let j21 = -1.0 + e * r + e * c * r * l * r;
        let j22 = -2.0 * d + e * c * c * r * r;
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let dc = (f1 * j22 - f2 * j12) / det;
        let dl = (j11 * f2 - j21 * f1) / det;
        let (cn, ln) = (c - dc, l - dl);
        if !(cn > 0.0 && ln > 0.0) || norm(cn, ln) >= norm(c, l) {
            break;
        }
        c = cn;
        l = ln;
    }
    (c, l)
}

/// Delay at which the minimal speed meets the upper tangency speed, searched
/// on `[r̲, 10 r̲]`; `None` when there is no sign change there.
pub fn intersection_delay(mp: &ModelParams) -> Result<Option<f64>> {
    mp.require_in_scope()?;
    let Some(r_under) = delay_thresholds(mp)?.r_under else {
        return Ok(None);
    };
    let diff = |r: f64| -> Result<f64> {
        let m = mp.with_delay(r)?;
        let (c_star, _) = min_speed(&m)?;
        Ok(match upper_speed(&m)? {
            Some((c_up, _)) => c_star - c_up,
            None => -c_star,
        })
    };
    let lo = r_under * (1.0 + 1e-6);
    let hi = 10.0 * r_under;
    let (d_lo, d_hi) = (diff(lo)?, diff(hi)?);
    if d_lo.signum() == d_hi.signum() {
        return Ok(None);
    }
    let mut failure = None;
    let root = bisect(
        |r| match diff(r) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        lo,
        hi,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    root.map(Some)
}

/// Front shape predicted by the characteristic analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeLabel {
    Monotone,
    Oscillatory,
    NoWave,
}

/// Predicts whether the front of speed `c` is monotone, oscillatory, or absent.
pub fn classify_regime(mp: &ModelParams, c: f64) -> Result<RegimeLabel> {
    let regime = mp.require_in_scope()?;
    let th = delay_thresholds(mp)?;
    let r_under = th.r_under.unwrap_or(0.0);
    let r = mp.r;
    if regime == ParamRegime::Strong && r >= th.r_bar - BOUNDARY_TOL {
        return Ok(RegimeLabel::NoWave);
    }
    let (c_star, _) = min_speed(mp)?;
    if c < c_star - BOUNDARY_TOL {
        return Ok(RegimeLabel::NoWave);
    }
    if r <= r_under + BOUNDARY_TOL {
        return Ok(RegimeLabel::Monotone);
    }
    if regime == ParamRegime::Strong {
        return Ok(RegimeLabel::Oscillatory);
    }
    let r0 = intersection_delay(mp)?;
    if let Some(r0) = r0 {
        if r <= r0 + BOUNDARY_TOL {
            match upper_speed(mp)? {
                None => return Ok(RegimeLabel::Monotone),
                Some((c_up, _)) if c <= c_up + BOUNDARY_TOL => return Ok(RegimeLabel::Monotone),
                _ => {}
            }
        }
    }
    Ok(RegimeLabel::Oscillatory)
}

/// All characteristic quantities for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub c_star: f64,
    pub lambda_star: f64,
    pub r_under: Option<f64>,
    pub r_bar: f64,
    /// `+∞` when no upper tangency exists.
    pub c_upper: f64,
    pub lambda_upper: Option<f64>,
    pub r0: Option<f64>,
    pub regime: ParamRegime,
}

impl SpectralProfile {
    pub fn compute(mp: &ModelParams) -> Result<Self> {
        let regime = mp.require_in_scope()?;
        let (c_star, lambda_star) = min_speed(mp)?;
        let th = delay_thresholds(mp)?;
        let upper = upper_speed(mp)?;
        let r0 = if regime == ParamRegime::Moderate { intersection_delay(mp)? } else { None };
        Ok(Self {
            c_star,
            lambda_star,
            r_under: th.r_under,
            r_bar: th.r_bar,
            c_upper: upper.map_or(f64::INFINITY, |u| u.0),
            lambda_upper: upper.map(|u| u.1),
            r0,
            regime,
        })
    }

    pub const CSV_HEADER: &'static str = "c_star,lambda_star,r_under,r_bar,c_upper,lambda_upper,r0,regime";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:?}",
            fmt_f64(self.c_star),
            fmt_f64(self.lambda_star),
            opt(self.r_under),
            fmt_f64(self.r_bar),
            fmt_f64(self.c_upper),
            opt(self.lambda_upper),
            opt(self.r0),
            self.regime
        )
    }
}

/// Full double precision (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A chosen speed together with the exponent of its weight `e^{−2λξ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveSpec {
    pub c: f64,
    pub lambda: f64,
    pub critical: bool,
}

/// Weight value, flagged when the exponent had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weight {
    pub value: f64,
    pub clamped: bool,
}

impl WaveSpec {
    /// The critical wave `c = c*`, `λ = λ*`.
    pub fn critical(mp: &ModelParams) -> Result<Self> {
        let (c, lambda) = min_speed(mp)?;
        Ok(Self { c, lambda, critical: true })
    }

    /// Wave of speed `c`; `lambda` overrides the default midpoint of `(λ1, λ2)`.
    pub fn new(mp: &ModelParams, c: f64, lambda: Option<f64>) -> Result<Self> {
        let (c_star, lambda_star) = min_speed(mp)?;
        if (c - c_star).abs() <= BOUNDARY_TOL * c_star.max(1.0) {
            return Ok(Self { c: c_star, lambda: lambda_star, critical: true });
        }
        if c < c_star {
            return Err(Error::Precondition(format!("c below critical speed ({c} < {c_star})")));
        }
        let (l1, l2) = lambda_pair(mp, c)?;
        let lambda = match lambda {
            None => 0.5 * (l1 + l2),
            Some(l) if l > l1 && l < l2 => l,
            Some(l) => return Err(Error::Precondition(format!("lambda {l} outside ({l1}, {l2})"))),
        };
        Ok(Self { c, lambda, critical: false })
    }

    /// Speed as a multiple of `c*`; a factor of exactly 1 gives the critical wave.
    pub fn from_factor(mp: &ModelParams, factor: f64) -> Result<Self> {
        if factor == 1.0 {
            return Self::critical(mp);
        }
        let (c_star, _) = min_speed(mp)?;
        Self::new(mp, factor * c_star, None)
    }

    /// `a0 = c − 2Dλ`.
    pub fn a0(&self, mp: &ModelParams) -> f64 {
        self.c - 2.0 * mp.diffusion * self.lambda
    }

    /// `a1 = cλ + δ − Dλ²`.
    pub fn a1(&self, mp: &ModelParams) -> f64 {
        self.c * self.lambda + mp.delta - mp.diffusion * self.lambda * self.lambda
    }

    /// Delay coupling of the comparison equation, `p e^{−λcr}`.
    pub fn k2(&self, mp: &ModelParams) -> f64 {
        mp.p * (-self.lambda * self.c * mp.r).exp()
    }

    /// `μ0 = a1 − p e^{−λcr}`: zero at `c*`, positive above.
    pub fn mu0(&self, mp: &ModelParams) -> f64 {
        gap(mp, self.c, self.lambda)
    }

    /// Upper bound `min{δ, μ0}` on the exponential convergence rate.
    pub fn mu_bound(&self, mp: &ModelParams) -> f64 {
        mp.delta.min(self.mu0(mp))
    }

    pub fn weight(&self, xi: f64) -> Weight {
        let x = -2.0 * self.lambda * xi;
        if x.abs() > WEIGHT_EXP_CLAMP {
            Weight { value: x.clamp(-WEIGHT_EXP_CLAMP, WEIGHT_EXP_CLAMP).exp(), clamped: true }
        } else {
            Weight { value: x.exp(), clamped: false }
        }
    }
}
