//! Value-level inverse-variance weighting and static precision-weighted
//! fusion across modalities.
//!
//! Every weight is `w = 1 / (effective_variance + epsilon)`; the fused mean
//! is the precision-weighted average of the modality means and the fused
//! variance is the reciprocal of the total precision. The same update can
//! be written as a scalar Kalman gain, see [`kalman_fuse_pair`].

use crate::core::{FusedTrajectory, FusionConfig, Grid, UncertainEstimate};
use crate::error::{Error, Result};

/// Per-value inverse-variance weights, one plane per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub planes: Vec<Grid>,
}

impl FusionWeights {
    /// Weights for a set of modality estimates sharing one shape.
    pub fn compute(ests: &[UncertainEstimate], cfg: &FusionConfig) -> Result<Self> {
        if ests.is_empty() {
            return Err(Error::EmptyInput {
                what: "modality estimates",
            });
        }
        cfg.validate()?;
        let model = cfg.noise_model()?;
        let shape = ests[0].shape();
        let mut planes = Vec::with_capacity(ests.len());
        for est in ests {
            if est.shape() != shape {
                return Err(Error::ShapeMismatch {
                    what: "modality estimates",
                    expected: format!("{shape:?}"),
                    actual: format!("{:?}", est.shape()),
                });
            }
            let mut plane = est.log_variance.clone();
            for v in plane.values_mut() {
                let effective = model.effective_variance(v.exp())?;
                *v = 1.0 / (effective + cfg.epsilon);
            }
            plane.check_finite("fusion weights")?;
            planes.push(plane);
        }
        Ok(FusionWeights { planes })
    }

    /// Weights rescaled to sum to one across modalities at each value.
    pub fn normalized(&self) -> Vec<Grid> {
        let mut out = self.planes.clone();
        let n = out.first().map_or(0, Grid::len);
        for k in 0..n {
            let total: f64 = out.iter().map(|g| g.values()[k]).sum();
            for g in out.iter_mut() {
                g.values_mut()[k] /= total;
            }
        }
        out
    }
}

/// Inverse-variance weights for a single modality:
/// `w = 1 / (effective_variance(exp(log_var)) + epsilon)`.
pub fn inverse_variance_weights(
    est: &UncertainEstimate,
    cfg: &FusionConfig,
) -> Result<FusionWeights> {
    FusionWeights::compute(std::slice::from_ref(est), cfg)
}

/// Precision-weighted fusion of two or more modality estimates. The fused
/// mean is a convex combination of the inputs at every value, and the fused
/// variance `1 / sum(w)` is below every contributing
/// `effective_variance + epsilon`.
pub fn fuse_static(ests: &[UncertainEstimate], cfg: &FusionConfig) -> Result<FusedTrajectory> {
    let weights = FusionWeights::compute(ests, cfg)?;
    let (batch, time, dim) = ests[0].shape();
    let mut fused_mean = Grid::zeros(batch, time, dim);
    let mut fused_variance = Grid::zeros(batch, time, dim);
    for k in 0..fused_mean.len() {
        let mut num = 0.0;
        let mut total = 0.0;
        for (est, plane) in ests.iter().zip(&weights.planes) {
            let w = plane.values()[k];
            num += w * est.mean.values()[k];
            total += w;
        }
        fused_mean.values_mut()[k] = num / total;
        fused_variance.values_mut()[k] = 1.0 / total;
    }
    Ok(FusedTrajectory {
        fused_mean,
        fused_variance,
        weights_per_modality: weights.planes,
    })
}

/// Scalar Kalman update fusing a prior with one observation:
/// gain `K = prior_var / (prior_var + obs_var)`, posterior mean
/// `prior + K (obs - prior)`, posterior variance
/// `1 / (1/prior_var + 1/obs_var)`.
pub fn kalman_fuse_pair(
    prior_mean: f64,
    prior_var: f64,
    obs_mean: f64,
    obs_var: f64,
) -> Result<(f64, f64)> {
    for v in [prior_var, obs_var] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveVariance { value: v });
        }
    }
    let gain = prior_var / (prior_var + obs_var);
    let mean = prior_mean + gain * (obs_mean - prior_mean);
    let var = 1.0 / (1.0 / prior_var + 1.0 / obs_var);
    Ok((mean, var))
}
