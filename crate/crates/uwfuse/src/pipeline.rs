//! The composed inference pipeline: shared linear heads on each modality,
//! static precision-weighted fusion per time step, an optional sequential
//! smoothing pass, iterative refinement, and a scalar classifier producing
//! per-segment anomaly probabilities.

use crate::core::{
    layer_normalize, EmbeddingSequence, FusedTrajectory, FusionConfig, Grid, ScoreSeries,
    UncertainEstimate, DEFAULT_LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::losses::{segment_probabilities, LinearHeads};
use crate::refine::{refine_trace, AffineEstimator};
use crate::temporal::smooth_trajectory;

/// Which trajectory feeds refinement and classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Use the per-step fused trajectory directly. This is the
    /// differentiable path.
    PerStep,
    /// Run the sequential update over the fused steps first.
    Smoothed,
}

impl TemporalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(TemporalMode::PerStep),
            "smoothed" => Ok(TemporalMode::Smoothed),
            _ => Err(Error::format(format!(
                "unknown temporal mode {s:?} (expected per-step or smoothed)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TemporalMode::PerStep => "per-step",
            TemporalMode::Smoothed => "smoothed",
        }
    }
}

/// A configured pipeline over one or more modality inputs.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub heads: LinearHeads,
    pub estimator: AffineEstimator,
    pub config: FusionConfig,
    pub temporal: TemporalMode,
    /// Layer-normalize the inputs before the heads.
    pub normalize: bool,
}

/// Every intermediate a forward pass produces, kept for inspection,
/// reporting, and backpropagation.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// The sequences actually fed to the heads (post-normalization).
    pub head_inputs: Vec<Grid>,
    pub estimates: Vec<UncertainEstimate>,
    /// Per-step cross-modal fusion result.
    pub step_fused: FusedTrajectory,
    /// Sequentially smoothed trajectory, present in `Smoothed` mode.
    pub smoothed: Option<FusedTrajectory>,
    /// Refinement iterates x^0 .. x^N over the selected trajectory.
    pub refine_states: Vec<Grid>,
    pub residual_norms: Vec<f64>,
    /// Final trajectory: refined mean with the selected variance/weights.
    pub refined: FusedTrajectory,
    /// Classifier logits, one per (b, t), b-major.
    pub logits: Vec<f64>,
    /// Segment-mean probabilities per video.
    pub segment_probs: Vec<Vec<f64>>,
}

impl Pipeline {
    pub fn new(
        heads: LinearHeads,
        estimator: AffineEstimator,
        config: FusionConfig,
    ) -> Result<Self> {
        config.validate()?;
        heads.validate()?;
        if heads.dim() != estimator.dim() {
            return Err(Error::ShapeMismatch {
                what: "pipeline",
                expected: format!("estimator dim {}", heads.dim()),
                actual: format!("dim {}", estimator.dim()),
            });
        }
        Ok(Pipeline {
            heads,
            estimator,
            config,
            temporal: TemporalMode::Smoothed,
            normalize: false,
        })
    }

    pub fn with_temporal(mut self, temporal: TemporalMode) -> Self {
        self.temporal = temporal;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// Runs the full forward pass over one or more modality inputs sharing
    /// a (batch, time, dim) shape.
    pub fn run(&self, inputs: &[&EmbeddingSequence]) -> Result<PipelineOutput> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput {
                what: "modality inputs",
            });
        }
        self.config.validate()?;
        let shape = inputs[0].shape();
        for seq in inputs {
            if seq.shape() != shape {
                return Err(Error::ShapeMismatch {
                    what: "modality inputs",
                    expected: format!("{shape:?}"),
                    actual: format!("{:?}", seq.shape()),
                });
            }
        }
        let (batch, time, dim) = shape;
        if batch == 0 || time == 0 || dim == 0 {
            return Err(Error::EmptyInput {
                what: "modality inputs",
            });
        }

        let mut head_inputs = Vec::with_capacity(inputs.len());
        let mut estimates = Vec::with_capacity(inputs.len());
        for seq in inputs {
            let prepared = if self.normalize {
                layer_normalize(seq, DEFAULT_LAYER_NORM_EPS)?
            } else {
                (*seq).clone()
            };
            let est = crate::losses::predict_heads(&prepared, &self.heads)?;
            head_inputs.push(prepared.values);
            estimates.push(est);
        }

        let step_fused = crate::fusion::fuse_static(&estimates, &self.config)?;
        let smoothed = match self.temporal {
            TemporalMode::PerStep => None,
            TemporalMode::Smoothed => Some(smooth_trajectory(&step_fused, &self.config)?),
        };
        let base = smoothed.as_ref().unwrap_or(&step_fused);

        let lambdas = vec![self.config.refine_lambda; self.config.refine_steps];
        let trace = refine_trace(
            &base.fused_mean,
            &self.estimator,
            &lambdas,
            Some(&base.fused_variance),
        )?;
        let final_state = trace.states.last().unwrap().clone();

        let mut logits = vec![0.0; batch * time];
        for b in 0..batch {
            for t in 0..time {
                let x = final_state.slice(b, t);
                logits[b * time + t] = self
                    .heads
                    .classifier_weight
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.heads.classifier_bias;
            }
        }
        let segment_probs = segment_probabilities(&logits, batch, time, self.config.segment_len);

        let refined = FusedTrajectory {
            fused_mean: final_state,
            fused_variance: base.fused_variance.clone(),
            weights_per_modality: base.weights_per_modality.clone(),
        };
        Ok(PipelineOutput {
            head_inputs,
            estimates,
            step_fused,
            smoothed,
            refine_states: trace.states,
            residual_norms: trace.residual_norms,
            refined,
            logits,
            segment_probs,
        })
    }

    /// All trainable parameters, heads first then estimator, in the order
    /// `PipelineGradients::flatten` uses.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.heads.flatten();
        out.extend_from_slice(self.estimator.weight());
        out.extend_from_slice(self.estimator.bias());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let dim = self.heads.dim();
        let head_count = crate::losses::param_count(dim);
        let total = head_count + dim * dim + dim;
        if flat.len() != total {
            return Err(Error::ShapeMismatch {
                what: "pipeline parameters",
                expected: format!("{total} values"),
                actual: format!("{}", flat.len()),
            });
        }
        self.heads = LinearHeads::unflatten(dim, &flat[..head_count])?;
        let est_w = &flat[head_count..head_count + dim * dim];
        let est_b = &flat[head_count + dim * dim..];
        self.estimator = crate::refine::make_affine_estimator(est_w.to_vec(), est_b.to_vec())?;
        Ok(())
    }

    /// Packages segment probabilities into per-video score series with the
    /// video label broadcast to every segment.
    pub fn score_series(
        &self,
        out: &PipelineOutput,
        labels: &[u8],
        video_ids: Option<&[String]>,
    ) -> Result<Vec<ScoreSeries>> {
        let batch = out.segment_probs.len();
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                what: "video labels",
                expected: format!("{batch} labels"),
                actual: format!("{}", labels.len()),
            });
        }
        let mut series = Vec::with_capacity(batch);
        for (b, probs) in out.segment_probs.iter().enumerate() {
            let video_id = video_ids
                .and_then(|ids| ids.get(b).cloned())
                .unwrap_or_else(|| format!("video{b:04}"));
            let s = ScoreSeries {
                video_id,
                probabilities: probs.clone(),
                labels: vec![labels[b]; probs.len()],
                video_anomalous: labels[b] == 1,
            };
            s.validate()?;
            series.push(s);
        }
        Ok(series)
    }
}
