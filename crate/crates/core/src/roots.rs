//! Scalar bracketing helpers shared by the characteristic solvers.

use crate::error::{Error, Result};

/// Bisection on a bracket `[lo, hi]` whose end values have opposite signs.
/// Runs until the bracket stops shrinking in floating point.
pub(crate) fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if !(f_lo.signum() != f_hi.signum()) || !f_lo.is_finite() || !f_hi.is_finite() {
        return Err(Error::numerical(format!("no sign change on [{lo}, {hi}]"), f_lo.abs().min(f_hi.abs())));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Grows `hi` geometrically from `start` until `pred(hi)` holds.
pub(crate) fn expand_until<P>(start: f64, factor: f64, max_steps: usize, mut pred: P) -> Option<f64>
where
    P: FnMut(f64) -> bool,
{
    let mut x = start;
    for _ in 0..max_steps {
        if pred(x) {
            return Some(x);
        }
        x *= factor;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_sqrt2() {
        let x = bisect(|x| x * x - 2.0, 0.0, 2.0).unwrap();
        assert!((x - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bisect_rejects_bad_bracket() {
        assert!(bisect(|x| x * x + 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn expand_until_doubles() {
        assert_eq!(expand_until(1.0, 2.0, 10, |x| x > 5.0), Some(8.0));
        assert_eq!(expand_until(1.0, 2.0, 2, |x| x > 5.0), None);
    }
}
