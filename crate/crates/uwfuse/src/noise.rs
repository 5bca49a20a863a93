//! Gaussian and Student-t noise models: effective variances under the
//! Laplace approximation, negative log-likelihoods, and score (influence)
//! functions.
//!
//! The Student-t log-density near its mode matches a Gaussian whose
//! variance is scaled by `nu / (nu + 1)`; that effective variance is what
//! the fusion weights invert. Likelihoods are kept up to an additive
//! constant, so only differences and derivatives are meaningful.

use crate::core::{FusionConfig, NoiseKind};
use crate::error::{Error, Result};

/// Noise model for one modality's residuals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    Gaussian,
    StudentT { nu: f64 },
}

impl NoiseModel {
    /// Student-t model with `nu` degrees of freedom; `nu` must be positive.
    pub fn student_t(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::invalid_config(format!(
                "student_t degrees of freedom must be > 0, got {nu}"
            )));
        }
        Ok(NoiseModel::StudentT { nu })
    }

    /// Multiplier taking a raw variance to its effective variance:
    /// 1 for Gaussian, `nu / (nu + 1)` for Student-t.
    pub fn variance_scale(&self) -> f64 {
        match self {
            NoiseModel::Gaussian => 1.0,
            NoiseModel::StudentT { nu } => nu / (nu + 1.0),
        }
    }

    /// `log_var` shifted by `ln(nu / (nu + 1))` under Student-t, unchanged
    /// under Gaussian.
    pub fn effective_log_variance(&self, log_var: f64) -> f64 {
        match self {
            NoiseModel::Gaussian => log_var,
            NoiseModel::StudentT { nu } => log_var + (nu / (nu + 1.0)).ln(),
        }
    }

    /// Effective variance for a raw variance `sigma2 > 0`. Strictly smaller
    /// than `sigma2` under Student-t, equal under Gaussian.
    pub fn effective_variance(&self, sigma2: f64) -> Result<f64> {
        check_variance(sigma2)?;
        Ok(sigma2 * self.variance_scale())
    }

    /// Negative log-likelihood of residual `delta`, omitting constants:
    /// `delta^2 / (2 sigma2)` for Gaussian,
    /// `(nu + 1)/2 * ln(1 + delta^2 / (nu sigma2))` for Student-t.
    /// Zero at `delta = 0` and even in `delta` for both models.
    pub fn neg_log_likelihood(&self, delta: f64, sigma2: f64) -> Result<f64> {
        check_variance(sigma2)?;
        Ok(match self {
            NoiseModel::Gaussian => delta * delta / (2.0 * sigma2),
            NoiseModel::StudentT { nu } => {
                0.5 * (nu + 1.0) * (delta * delta / (nu * sigma2)).ln_1p()
            }
        })
    }

    /// Derivative of the negative log-likelihood in `delta`:
    /// `delta / sigma2` for Gaussian (unbounded),
    /// `(nu + 1) delta / (nu sigma2 + delta^2)` for Student-t (bounded,
    /// tending to zero for large residuals). Odd in `delta`.
    pub fn score(&self, delta: f64, sigma2: f64) -> Result<f64> {
        check_variance(sigma2)?;
        Ok(match self {
            NoiseModel::Gaussian => delta / sigma2,
            NoiseModel::StudentT { nu } => (nu + 1.0) * delta / (nu * sigma2 + delta * delta),
        })
    }

    /// Supremum of |score| over residuals. For Student-t this is
    /// `(nu + 1) / (2 sigma sqrt(nu))`, attained at `|delta| = sigma sqrt(nu)`;
    /// the Gaussian score is unbounded.
    pub fn score_bound(&self, sigma2: f64) -> Result<Option<f64>> {
        check_variance(sigma2)?;
        Ok(match self {
            NoiseModel::Gaussian => None,
            NoiseModel::StudentT { nu } => {
                Some((nu + 1.0) / (2.0 * sigma2.sqrt() * nu.sqrt()))
            }
        })
    }
}

impl FusionConfig {
    /// The noise model selected by this configuration.
    pub fn noise_model(&self) -> Result<NoiseModel> {
        match self.noise_model {
            NoiseKind::Gaussian => Ok(NoiseModel::Gaussian),
            NoiseKind::StudentT => NoiseModel::student_t(self.nu),
        }
    }
}

fn check_variance(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::NonPositiveVariance { value: sigma2 });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_log_variance_cases() {
        let t1 = NoiseModel::student_t(1.0).unwrap();
        // ln 2 shifted by ln(1/2) lands exactly at 0 (sigma2-tilde = 1).
        assert!((t1.effective_log_variance(2.0_f64.ln())).abs() < 1e-15);

        let g = NoiseModel::Gaussian;
        assert_eq!(g.effective_log_variance(-3.7), -3.7);

        let t8 = NoiseModel::student_t(8.0).unwrap();
        let lv = t8.effective_log_variance(0.0);
        assert!((lv - (8.0f64 / 9.0).ln()).abs() < 1e-15);
        assert!((lv - (-0.11778303565638351)).abs() < 1e-12);
        assert!((lv.exp() - 0.8888888888888888).abs() < 1e-12);
    }

    #[test]
    fn effective_variance_cases() {
        let t1 = NoiseModel::student_t(1.0).unwrap();
        assert_eq!(t1.effective_variance(2.0).unwrap(), 1.0);

        let near_gaussian = NoiseModel::student_t(1e6).unwrap();
        let v = near_gaussian.effective_variance(3.5).unwrap();
        assert!((v - 3.5).abs() / 3.5 < 1e-6);

        let t8 = NoiseModel::student_t(8.0).unwrap();
        assert!((t8.effective_variance(1.0).unwrap() - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn effective_variance_rejects_nonpositive() {
        let t = NoiseModel::student_t(4.0).unwrap();
        assert!(matches!(
            t.effective_variance(0.0),
            Err(Error::NonPositiveVariance { .. })
        ));
        assert!(matches!(
            t.effective_variance(-1.0),
            Err(Error::NonPositiveVariance { .. })
        ));
    }

    #[test]
    fn nll_cases() {
        let g = NoiseModel::Gaussian;
        let t1 = NoiseModel::student_t(1.0).unwrap();
        assert_eq!(g.neg_log_likelihood(0.0, 2.5).unwrap(), 0.0);
        assert_eq!(t1.neg_log_likelihood(0.0, 2.5).unwrap(), 0.0);
        assert_eq!(g.neg_log_likelihood(1.0, 1.0).unwrap(), 0.5);
        assert!((t1.neg_log_likelihood(1.0, 1.0).unwrap() - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_is_even() {
        let t = NoiseModel::student_t(3.0).unwrap();
        for d in [0.1, 1.0, 4.5] {
            let a = t.neg_log_likelihood(d, 0.7).unwrap();
            let b = t.neg_log_likelihood(-d, 0.7).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn score_cases() {
        let t4 = NoiseModel::student_t(4.0).unwrap();
        assert_eq!(t4.score(0.0, 1.0).unwrap(), 0.0);

        let t1 = NoiseModel::student_t(1.0).unwrap();
        assert!((t1.score(10.0, 1.0).unwrap() - 20.0 / 101.0).abs() < 1e-15);

        let g = NoiseModel::Gaussian;
        assert_eq!(g.score(10.0, 1.0).unwrap(), 10.0);
    }

    #[test]
    fn score_is_odd() {
        let t = NoiseModel::student_t(6.0).unwrap();
        for d in [0.3, 2.0, 17.0] {
            assert_eq!(t.score(d, 1.3).unwrap(), -t.score(-d, 1.3).unwrap());
        }
    }

    #[test]
    fn score_matches_finite_difference_of_nll() {
        let sigma2: f64 = 1.7;
        let sigma = sigma2.sqrt();
        for model in [NoiseModel::Gaussian, NoiseModel::student_t(2.5).unwrap()] {
            let h = 1e-6;
            let mut d = -5.0 * sigma;
            while d <= 5.0 * sigma {
                let num = (model.neg_log_likelihood(d + h, sigma2).unwrap()
                    - model.neg_log_likelihood(d - h, sigma2).unwrap())
                    / (2.0 * h);
                let ana = model.score(d, sigma2).unwrap();
                let scale = ana.abs().max(1e-3);
                assert!(
                    (num - ana).abs() / scale < 1e-6,
                    "model {model:?} delta {d}: fd {num} vs score {ana}"
                );
                d += 0.25 * sigma;
            }
        }
    }

    #[test]
    fn student_score_peak_on_grid() {
        let sigma2: f64 = 2.0;
        let sigma = sigma2.sqrt();
        for nu in [0.5, 1.0, 4.0, 8.0] {
            let model = NoiseModel::student_t(nu).unwrap();
            let bound = model.score_bound(sigma2).unwrap().unwrap();
            // Grid includes the analytic argmax |delta| = sigma sqrt(nu).
            let peak_at = sigma * nu.sqrt();
            let mut max_seen = 0.0f64;
            for k in -2000..=2000 {
                let d = peak_at * (k as f64) / 400.0;
                max_seen = max_seen.max(model.score(d, sigma2).unwrap().abs());
            }
            assert!((max_seen - bound).abs() < 1e-9, "nu {nu}");
            // Far tail vanishes.
            assert!(model.score(1e8 * sigma, sigma2).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_score_grows_monotonically() {
        let g = NoiseModel::Gaussian;
        let mut last = 0.0;
        for k in 1..=1000 {
            let s = g.score(k as f64 * 10.0, 1.0).unwrap();
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn effective_variance_monotone_in_nu() {
        let sigma2 = 3.0;
        let mut last = 0.0;
        for nu in [0.5, 1.0, 2.0, 4.0, 8.0, 32.0, 1e4, 1e8] {
            let v = NoiseModel::student_t(nu)
                .unwrap()
                .effective_variance(sigma2)
                .unwrap();
            assert!(v > last && v < sigma2, "nu {nu} gave {v}");
            last = v;
        }
        assert!((last - sigma2).abs() / sigma2 < 1e-7);
    }

    #[test]
    fn laplace_factor_is_exact() {
        for nu in [0.5, 1.0, 2.0, 4.0, 8.0, 32.0] {
            let model = NoiseModel::student_t(nu).unwrap();
            for exp10 in -4..=4 {
                let sigma2 = 10.0_f64.powi(exp10);
                let ratio = model.effective_variance(sigma2).unwrap() / sigma2;
                let exact = nu / (nu + 1.0);
                assert!((ratio - exact).abs() / exact <= 1e-14);
            }
        }
    }

    #[test]
    fn config_builds_model() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.noise_model().unwrap(), NoiseModel::StudentT { nu: 8.0 });
        let g = FusionConfig {
            noise_model: NoiseKind::Gaussian,
            ..FusionConfig::default()
        };
        assert_eq!(g.noise_model().unwrap(), NoiseModel::Gaussian);
    }

    #[test]
    fn rejects_bad_nu() {
        assert!(NoiseModel::student_t(0.0).is_err());
        assert!(NoiseModel::student_t(-2.0).is_err());
        assert!(NoiseModel::student_t(f64::NAN).is_err());
    }
}
