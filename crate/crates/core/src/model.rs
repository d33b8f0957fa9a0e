//! Model parameters, Nicholson's birth/death pair and the constant equilibria.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where `p/δ` sits relative to the thresholds `e` and `e²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRegime {
    /// `p/δ ≤ 1`: no positive equilibrium.
    Extinction,
    /// `1 < p/δ ≤ e`: monotone birth on `[0, v+]`; outside the oscillatory scope.
    Monotone,
    /// `e < p/δ ≤ e²`: waves exist for every delay.
    Moderate,
    /// `p/δ > e²`: waves exist only below the Hopf delay.
    Strong,
}

impl ParamRegime {
    pub fn in_scope(self) -> bool {
        matches!(self, ParamRegime::Moderate | ParamRegime::Strong)
    }
}

/// The five physical constants of the delayed reaction-diffusion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Diffusion rate.
    pub diffusion: f64,
    /// Death coefficient δ.
    pub delta: f64,
    /// Maximal birth rate.
    pub p: f64,
    /// Crowding constant.
    pub a: f64,
    /// Maturation delay.
    pub r: f64,
}

/// Constant states `v− = 0` and `v+ = ln(p/δ)/a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibria {
    pub v_minus: f64,
    pub v_plus: f64,
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::config(name, format!("{name} must be finite")));
    }
    if value <= 0.0 {
        return Err(Error::config(name, format!("{name} must be positive")));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(diffusion: f64, delta: f64, p: f64, a: f64, r: f64) -> Result<Self> {
        check_positive("D", diffusion)?;
        check_positive("delta", delta)?;
        check_positive("p", p)?;
        check_positive("a", a)?;
        if !r.is_finite() || r < 0.0 {
            return Err(Error::config("r", "r must be non-negative and finite"));
        }
        Ok(Self { diffusion, delta, p, a, r })
    }

    /// The default laboratory parameters: `D = δ = a = 1`, `p = e²`, `r = 1`.
    pub fn reference() -> Self {
        Self { diffusion: 1.0, delta: 1.0, p: E * E, a: 1.0, r: 1.0 }
    }

    /// Same constants with a different delay.
    pub fn with_delay(&self, r: f64) -> Result<Self> {
        Self::new(self.diffusion, self.delta, self.p, self.a, r)
    }

    pub fn ratio(&self) -> f64 {
        self.p / self.delta
    }

    /// `ln(p/δ)`.
    pub fn log_ratio(&self) -> f64 {
        (self.p / self.delta).ln()
    }

    pub fn regime(&self) -> ParamRegime {
        let l = self.log_ratio();
        if l <= 0.0 {
            ParamRegime::Extinction
        } else if l <= 1.0 {
            ParamRegime::Monotone
        } else if l <= 2.0 {
            ParamRegime::Moderate
        } else {
            ParamRegime::Strong
        }
    }

    /// Fails with a regime error unless `p/δ > e`.
    pub fn require_in_scope(&self) -> Result<ParamRegime> {
        let regime = self.regime();
        if regime.in_scope() {
            Ok(regime)
        } else {
            Err(Error::Regime(format!("p/delta = {:.6} is not above e; oscillatory fronts are out of scope", self.ratio())))
        }
    }

    /// Birth rate `p v e^{-a v}`; rejects negative populations.
    pub fn birth(&self, v: f64) -> Result<f64> {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("population must be non-negative, got {v}")));
        }
        Ok(self.birth_unchecked(v))
    }

    /// `b'(v) = p (1 - a v) e^{-a v}`; rejects negative populations.
    pub fn birth_prime(&self, v: f64) -> Result<f64> {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("population must be non-negative, got {v}")));
        }
        Ok(self.birth_prime_unchecked(v))
    }

    /// Birth rate without the domain check, for solver inner loops where
    /// round-off may leave a population marginally negative.
    #[inline]
    pub fn birth_unchecked(&self, v: f64) -> f64 {
        self.p * v * (-self.a * v).exp()
    }

    #[inline]
    pub fn birth_prime_unchecked(&self, v: f64) -> f64 {
        self.p * (1.0 - self.a * v) * (-self.a * v).exp()
    }

    /// Secant slope `(b(φ + ε) − b(φ)) / ε`, equal to `b'(φ)` at `ε = 0`.
    /// Evaluated through `expm1` so tiny increments keep full precision.
    #[inline]
    pub fn birth_secant(&self, phi: f64, eps: f64) -> f64 {
        let a = self.a;
        let base = self.p * (-a * phi).exp();
        if eps == 0.0 {
            return base * (1.0 - a * phi);
        }
        base * ((-a * eps).exp() + phi * (-a * eps).exp_m1() / eps)
    }

    pub fn death(&self, v: f64) -> f64 {
        self.delta * v
    }

    pub fn equilibria(&self) -> Result<Equilibria> {
        if self.ratio() <= 1.0 {
            return Err(Error::Regime(format!("p/delta = {} does not exceed 1; no positive equilibrium", self.ratio())));
        }
        Ok(Equilibria { v_minus: 0.0, v_plus: self.log_ratio() / self.a })
    }

    /// `v+`, assuming `p/δ > 1` has already been checked.
    pub fn v_plus(&self) -> f64 {
        self.log_ratio() / self.a
    }

    /// `b'(v+) = δ (1 - ln(p/δ))`.
    pub fn birth_prime_at_v_plus(&self) -> f64 {
        self.delta * (1.0 - self.log_ratio())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(delta: f64, p: f64, a: f64) -> ModelParams {
        ModelParams::new(1.0, delta, p, a, 0.5).unwrap()
    }

    #[test]
    fn birth_examples() {
        let mp = params(1.0, E * E, 1.0);
        assert_eq!(mp.birth(0.0).unwrap(), 0.0);
        let vp = mp.equilibria().unwrap().v_plus;
        assert!((vp - 2.0).abs() < 1e-15);
        assert!((mp.birth(vp).unwrap() - 2.0).abs() < 1e-14);
        let mp = params(1.0, 3.0, 2.0);
        let peak = mp.birth(0.5).unwrap();
        assert!((peak - 3.0 / 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!(mp.birth(0.49).unwrap() < peak && mp.birth(0.51).unwrap() < peak);
    }

    #[test]
    fn birth_prime_examples() {
        let mp = params(1.0, E * E, 1.0);
        assert_eq!(mp.birth_prime(0.0).unwrap(), mp.p);
        assert!(mp.birth_prime(1.0).unwrap().abs() < 1e-15);
        let vp = mp.v_plus();
        assert!((mp.birth_prime(vp).unwrap() + 1.0).abs() < 1e-14);
        assert!((mp.birth_prime_at_v_plus() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn negative_population_rejected() {
        let mp = ModelParams::reference();
        assert!(matches!(mp.birth(-1e-3), Err(Error::Domain(_))));
        assert!(matches!(mp.birth_prime(-1.0), Err(Error::Domain(_))));
        assert!(matches!(mp.birth(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn equilibria_examples() {
        assert!((params(1.0, E * E, 1.0).equilibria().unwrap().v_plus - 2.0).abs() < 1e-15);
        assert!((params(1.0, E, 2.0).equilibria().unwrap().v_plus - 0.5).abs() < 1e-15);
        assert!((params(2.0, 2.0 * E.powi(3), 1.0).equilibria().unwrap().v_plus - 3.0).abs() < 1e-14);
        assert!(matches!(params(1.0, 0.9, 1.0).equilibria(), Err(Error::Regime(_))));
        assert!(matches!(params(1.0, 1.0, 1.0).equilibria(), Err(Error::Regime(_))));
    }

    #[test]
    fn constructor_validation() {
        assert!(ModelParams::new(0.0, 1.0, 2.0, 1.0, 0.0).is_err());
        let err = ModelParams::new(1.0, -1.0, 2.0, 1.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("delta must be positive"));
        assert!(ModelParams::new(1.0, 1.0, f64::INFINITY, 1.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 2.0, 1.0, -0.1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 2.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn regime_labels() {
        assert_eq!(params(1.0, 0.5, 1.0).regime(), ParamRegime::Extinction);
        assert_eq!(params(1.0, 2.0, 1.0).regime(), ParamRegime::Monotone);
        assert_eq!(params(1.0, E * E, 1.0).regime(), ParamRegime::Moderate);
        assert_eq!(params(1.0, E.powi(3), 1.0).regime(), ParamRegime::Strong);
        assert!(params(1.0, 2.0, 1.0).require_in_scope().is_err());
    }

    proptest::proptest! {
        #[test]
        fn birth_prime_bounded_by_p(v in 0.0f64..50.0, p in 0.1f64..100.0, a in 0.05f64..5.0) {
            let mp = ModelParams::new(1.0, 0.05, p, a, 0.0).unwrap();
            let d = mp.birth_prime(v).unwrap();
            proptest::prop_assert!(d.abs() <= mp.birth_prime(0.0).unwrap() * (1.0 + 1e-15));
        }

        #[test]
        fn fixed_point_identity(delta in 0.1f64..5.0, l in 0.01f64..6.0, a in 0.1f64..4.0) {
            let mp = ModelParams::new(1.0, delta, delta * l.exp(), a, 0.0).unwrap();
            let vp = mp.equilibria().unwrap().v_plus;
            let gap = mp.birth(vp).unwrap() - mp.death(vp);
            proptest::prop_assert!(gap.abs() <= 1e-12 * (1.0 + mp.death(vp)));
        }

        #[test]
        fn secant_matches_difference(phi in 0.0f64..5.0, eps in -0.5f64..0.5) {
            let mp = ModelParams::new(1.0, 1.0, 7.0, 1.3, 0.0).unwrap();
            let s = mp.birth_secant(phi, eps);
            if eps.abs() > 1e-3 {
                let direct = (mp.birth_unchecked(phi + eps) - mp.birth_unchecked(phi)) / eps;
                proptest::prop_assert!((s - direct).abs() < 1e-9);
            }
            if phi + eps >= 0.0 {
                proptest::prop_assert!(s.abs() <= mp.p * (1.0 + 1e-12));
            }
            proptest::prop_assert!((mp.birth_secant(phi, 0.0) - mp.birth_prime_unchecked(phi)).abs() < 1e-12);
        }

        #[test]
        fn birth_is_unimodal(a in 0.1f64..4.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let mp = ModelParams::new(1.0, 1.0, 3.0, a, 0.0).unwrap();
            let peak = 1.0 / a;
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            // both below the peak: increasing; both above: decreasing
            proptest::prop_assert!(mp.birth(lo * peak).unwrap() <= mp.birth(hi * peak).unwrap() + 1e-15);
            proptest::prop_assert!(mp.birth(peak + lo * 10.0).unwrap() + 1e-15 >= mp.birth(peak + hi * 10.0).unwrap());
        }
    }
}
