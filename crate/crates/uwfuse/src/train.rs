//! Desk-scale trainer: plain gradient descent with a fixed step size over
//! the analytic gradients of the total loss, plus the complementary-signal
//! demonstration that fusing both modalities beats either alone.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::core::FusionConfig;
use crate::error::{Error, Result};
use crate::fixture::{complementary_fixture, ComplementarySpec, FixtureData};
use crate::losses::{loss_gradients, LinearHeads, LossBreakdown};
use crate::metrics::roc_auc;
use crate::pipeline::{Pipeline, TemporalMode};
use crate::refine::AffineEstimator;
use crate::EmbeddingSequence;

/// Gradient-descent settings. The gradient is rescaled to `clip_norm`
/// whenever its L2 norm exceeds it, which keeps saturated
/// cross-entropy segments from blowing up a step.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 0.05,
            epochs: 200,
            clip_norm: 10.0,
        }
    }
}

/// Loss recorded per epoch (before that epoch's update), with the final
/// post-training loss appended.
#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub epochs: Vec<LossBreakdown>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |l| l.total)
    }

    /// Learning-curve CSV: epoch, total, classification, kl, regularization.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut run = || -> std::io::Result<()> {
            writeln!(w, "epoch,total,classification,kl,regularization")?;
            for (epoch, loss) in self.epochs.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    epoch,
                    loss.total,
                    loss.classification,
                    loss.kl.iter().sum::<f64>(),
                    loss.regularization
                )?;
            }
            w.flush()
        };
        run().map_err(|e| Error::io(path, e))
    }
}

/// Runs fixed-step gradient descent in place. Fails with `Divergence` at
/// the first epoch whose loss is non-finite.
pub fn train(
    pipeline: &mut Pipeline,
    inputs: &[&EmbeddingSequence],
    labels: &[u8],
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if opts.epochs == 0 {
        return Err(Error::invalid_config("epochs must be >= 1".to_string()));
    }
    // Exploded parameters surface as non-finite losses or overflowed
    // variances; both read as divergence at that step.
    let as_divergence = |err: Error, step: usize| match err {
        Error::NonFiniteValue { .. } | Error::NonPositiveVariance { .. } => {
            Error::Divergence { step }
        }
        other => other,
    };
    let mut epochs = Vec::with_capacity(opts.epochs + 1);
    for epoch in 0..opts.epochs {
        let (loss, grads) =
            loss_gradients(pipeline, inputs, labels).map_err(|e| as_divergence(e, epoch))?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        epochs.push(loss);
        let mut flat = grads.flatten();
        let grad_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if opts.clip_norm > 0.0 && grad_norm > opts.clip_norm {
            for g in flat.iter_mut() {
                *g *= opts.clip_norm / grad_norm;
            }
        }
        let mut theta = pipeline.params();
        for (p, g) in theta.iter_mut().zip(&flat) {
            *p -= opts.learning_rate * g;
        }
        pipeline
            .set_params(&theta)
            .map_err(|_| Error::Divergence { step: epoch })?;
    }
    let final_loss = crate::losses::pipeline_loss(pipeline, inputs, labels)
        .map_err(|e| as_divergence(e, opts.epochs))?;
    if !final_loss.total.is_finite() {
        return Err(Error::Divergence { step: opts.epochs });
    }
    epochs.push(final_loss);
    Ok(TrainHistory { epochs })
}

/// Segment-level AUC of a pipeline over a labeled dataset.
pub fn evaluate_auc(
    pipeline: &Pipeline,
    inputs: &[&EmbeddingSequence],
    labels: &[u8],
) -> Result<f64> {
    let out = pipeline.run(inputs)?;
    let mut probs = Vec::new();
    let mut seg_labels = Vec::new();
    for (b, segs) in out.segment_probs.iter().enumerate() {
        for &p in segs {
            probs.push(p);
            seg_labels.push(labels[b]);
        }
    }
    roc_auc(&probs, &seg_labels)
}

/// Held-out AUCs of the fused pipeline and both single-modality baselines,
/// each trained from the same deterministic initialization.
#[derive(Clone, Debug)]
pub struct DemoOutcome {
    pub fused_auc: f64,
    pub image_auc: f64,
    pub event_auc: f64,
    pub fused_history: TrainHistory,
}

fn fresh_pipeline(dim: usize, config: &FusionConfig) -> Result<Pipeline> {
    Ok(
        Pipeline::new(LinearHeads::identity(dim), AffineEstimator::zero(dim), config.clone())?
            .with_temporal(TemporalMode::PerStep),
    )
}

/// Trains fused, image-only, and event-only models on one draw of the
/// complementary-signal fixture and scores them on a held-out draw.
pub fn complementary_demo(
    spec: &ComplementarySpec,
    test_seed: u64,
    opts: &TrainOptions,
    config: &FusionConfig,
) -> Result<DemoOutcome> {
    let train_data = complementary_fixture(spec)?;
    let test_spec = ComplementarySpec {
        seed: test_seed,
        ..spec.clone()
    };
    let test_data = complementary_fixture(&test_spec)?;
    let run =
        |inputs_train: &[&EmbeddingSequence], inputs_test: &[&EmbeddingSequence]| -> Result<(f64, TrainHistory)> {
            let mut pipeline = fresh_pipeline(spec.dim, config)?;
            let history = train(&mut pipeline, inputs_train, &train_data.labels, opts)?;
            let auc = evaluate_auc(&pipeline, inputs_test, &test_data.labels)?;
            Ok((auc, history))
        };
    let (fused_auc, fused_history) = run(
        &[&train_data.image, &train_data.event],
        &[&test_data.image, &test_data.event],
    )?;
    let (image_auc, _) = run(&[&train_data.image], &[&test_data.image])?;
    let (event_auc, _) = run(&[&train_data.event], &[&test_data.event])?;
    Ok(DemoOutcome {
        fused_auc,
        image_auc,
        event_auc,
        fused_history,
    })
}

/// Convenience accessor pairing the demo data with its inputs.
pub fn fixture_inputs(data: &FixtureData) -> [&EmbeddingSequence; 2] {
    [&data.image, &data.event]
}
