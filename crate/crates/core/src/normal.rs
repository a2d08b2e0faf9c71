//! Standard normal distribution functions.

use statrs::function::erf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("probability {0} outside the open interval (0, 1)")]
pub struct DomainError(pub f64);

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn pdf(t: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Φ(t), evaluated through erfc so both tails keep relative precision.
#[inline]
pub fn cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// Upper tail 1 − Φ(t).
#[inline]
pub fn sf(t: f64) -> f64 {
    cdf(-t)
}

pub fn inverse_cdf(p: f64) -> Result<f64, DomainError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DomainError(p));
    }
    let mut t = -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p);
    // One Newton step against the more accurate forward function.
    let d = pdf(t);
    if d > 0.0 {
        let step = if p < 0.5 { (cdf(t) - p) / d } else { ((1.0 - p) - sf(t)) / d };
        if step.is_finite() {
            t -= step;
        }
    }
    Ok(t)
}

/// Two-sided p-value of a standard normal score.
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * sf(z.abs())).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from 30-digit mpmath evaluations.
    const CDF_REF: [(f64, f64); 6] = [
        (0.0, 0.5),
        (1.0, 0.841_344_746_068_542_9),
        (1.96, 0.975_002_104_851_779_6),
        (-2.5, 0.006_209_665_325_776_132),
        (-6.0, 9.865_876_450_376_982e-10),
        (3.3, 0.999_516_575_857_616_2),
    ];

    #[test]
    fn cdf_matches_reference() {
        for (t, want) in CDF_REF {
            assert!((cdf(t) - want).abs() < 1e-10, "cdf({t}) = {} want {want}", cdf(t));
        }
    }

    #[test]
    fn pdf_at_zero() {
        assert!((pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
    }

    #[test]
    fn inverse_round_trips() {
        let mut t = -6.0;
        while t <= 6.0 {
            let back = inverse_cdf(cdf(t)).unwrap();
            assert!((back - t).abs() < 1e-8, "t={t} back={back}");
            t += 0.05;
        }
    }

    #[test]
    fn inverse_domain() {
        assert_eq!(inverse_cdf(0.0), Err(DomainError(0.0)));
        assert_eq!(inverse_cdf(1.0), Err(DomainError(1.0)));
        assert!(inverse_cdf(f64::NAN).is_err());
        assert!(inverse_cdf(0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_sided() {
        assert!((two_sided_p(1.96) - 0.05).abs() < 1e-4);
        assert_eq!(two_sided_p(0.0), 1.0);
    }
}
