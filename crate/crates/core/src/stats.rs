//! Distribution helpers used by the log-Gaussian head, the synthetic
//! generator and the oracles.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{MqError, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function, `q` in the open unit interval.
pub fn normal_ppf(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MqError::arg(format!("quantile level {q} outside (0, 1)")));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(q))
}

/// Quantile of a Student-t with `dof` degrees of freedom (unit scale).
pub fn student_t_ppf(q: f64, dof: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MqError::arg(format!("quantile level {q} outside (0, 1)")));
    }
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| MqError::arg(e.to_string()))?;
    Ok(t.inverse_cdf(q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect_ppf(q: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ppf_matches_bisection_oracle() {
        let levels = [1e-6 + 1e-12, 1e-4, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.9999, 1.0 - 1e-6 - 1e-12];
        for q in levels {
            let p = normal_ppf(q).unwrap();
            let b = bisect_ppf(q);
            assert!((p - b).abs() < 1e-9, "q={q}: {p} vs {b}");
        }
        assert_eq!(normal_ppf(0.5).unwrap(), 0.0);
    }

    #[test]
    fn ppf_rejects_closed_endpoints() {
        assert!(normal_ppf(0.0).is_err());
        assert!(normal_ppf(1.0).is_err());
        assert!(normal_ppf(f64::NAN).is_err());
    }

    #[test]
    fn student_t_median_and_symmetry() {
        assert!(student_t_ppf(0.5, 3.0).unwrap().abs() < 1e-12);
        let a = student_t_ppf(0.9, 3.0).unwrap();
        let b = student_t_ppf(0.1, 3.0).unwrap();
        assert!((a + b).abs() < 1e-9);
        // t_3 upper decile
        assert!((a - 1.637_744_353_696_21).abs() < 1e-8);
    }
}
