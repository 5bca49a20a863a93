//! Deterministic synthetic fixtures: a complementary-signal dataset where
//! each modality carries the anomaly cue for a different class of videos,
//! and a hand-constructed masking pipeline whose uncertainty weights react
//! predictably to zeroed features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::core::{EmbeddingSequence, FusionConfig, Grid, Modality};
use crate::error::Result;
use crate::losses::LinearHeads;
use crate::pipeline::{Pipeline, TemporalMode};
use crate::refine::AffineEstimator;

/// Which modality carries a video's anomaly signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    ImageSignal,
    EventSignal,
}

/// A paired image/event dataset with video-level labels.
#[derive(Clone, Debug)]
pub struct FixtureData {
    pub image: EmbeddingSequence,
    pub event: EmbeddingSequence,
    pub labels: Vec<u8>,
    pub kinds: Vec<Option<AnomalyKind>>,
    pub video_ids: Vec<String>,
}

/// Generator parameters for the complementary-signal dataset: half of the
/// anomalous videos perturb a subspace of the image features, the other
/// half a subspace of the event features, over independent noise.
#[derive(Clone, Debug)]
pub struct ComplementarySpec {
    pub videos: usize,
    pub time: usize,
    pub dim: usize,
    pub anomaly_fraction: f64,
    pub signal: f64,
    pub noise: f64,
    pub image_signal_dims: Vec<usize>,
    pub event_signal_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for ComplementarySpec {
    fn default() -> Self {
        ComplementarySpec {
            videos: 24,
            time: 32,
            dim: 8,
            anomaly_fraction: 0.5,
            signal: 2.0,
            noise: 0.5,
            image_signal_dims: vec![0, 1],
            event_signal_dims: vec![2, 3],
            seed: 0,
        }
    }
}

/// Builds the complementary-signal dataset. A single-modality model can
/// separate only the anomaly class whose cue lives in its stream; the
/// fused pipeline sees both.
pub fn complementary_fixture(spec: &ComplementarySpec) -> Result<FixtureData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (videos, time, dim) = (spec.videos, spec.time, spec.dim);
    let anomalous = (videos as f64 * spec.anomaly_fraction).round() as usize;
    let mut image = Grid::zeros(videos, time, dim);
    let mut event = Grid::zeros(videos, time, dim);
    let mut labels = vec![0u8; videos];
    let mut kinds = vec![None; videos];
    for b in 0..videos {
        if b < anomalous {
            labels[b] = 1;
            kinds[b] = Some(if b % 2 == 0 {
                AnomalyKind::ImageSignal
            } else {
                AnomalyKind::EventSignal
            });
        }
        for t in 0..time {
            for i in 0..dim {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ne: f64 = StandardNormal.sample(&mut rng);
                *image.at_mut(b, t, i) = spec.noise * nx;
                *event.at_mut(b, t, i) = spec.noise * ne;
            }
        }
        match kinds[b] {
            Some(AnomalyKind::ImageSignal) => {
                for t in 0..time {
                    for &i in &spec.image_signal_dims {
                        *image.at_mut(b, t, i) += spec.signal;
                    }
                }
            }
            Some(AnomalyKind::EventSignal) => {
                for t in 0..time {
                    for &i in &spec.event_signal_dims {
                        *event.at_mut(b, t, i) += spec.signal;
                    }
                }
            }
            None => {}
        }
    }
    let video_ids = (0..videos).map(|b| format!("v{b:04}")).collect();
    Ok(FixtureData {
        image: EmbeddingSequence::new(image, Modality::Image)?,
        event: EmbeddingSequence::new(event, Modality::Event)?,
        labels,
        kinds,
        video_ids,
    })
}

/// The hand-constructed masking pipeline plus its dataset.
pub struct MaskingFixture {
    pub pipeline: Pipeline,
    pub data: FixtureData,
}

/// Number of image dimensions that carry the anomaly signal in the masking
/// fixture (the leading dimensions).
pub const MASKING_SIGNAL_DIMS: usize = 8;
pub const MASKING_DIM: usize = 40;

/// Builds a pipeline whose variance head maps typical (positive) inputs to
/// low log-variance and zeros to log-variance 0, so masking a modality
/// provably lowers that modality's precision. The anomaly signal lives in
/// the leading image dimensions; per-video offsets keep the classes
/// slightly overlapped so detection quality responds to masking.
pub fn masking_fixture(seed: u64) -> Result<MaskingFixture> {
    let videos = 24;
    let time = 32;
    let dim = MASKING_DIM;
    let signal_dims = MASKING_SIGNAL_DIMS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Grid::zeros(videos, time, dim);
    let mut event = Grid::zeros(videos, time, dim);
    let mut labels = vec![0u8; videos];
    let mut kinds = vec![None; videos];
    for b in 0..videos {
        let anomalous = b % 2 == 0;
        if anomalous {
            labels[b] = 1;
            kinds[b] = Some(AnomalyKind::ImageSignal);
        }
        // Graded per-video strength with overlap between the classes, plus
        // a per-video offset that does not average out over time.
        let strength = if anomalous {
            0.1 + 0.9 * rng.random::<f64>()
        } else {
            0.3 * rng.random::<f64>()
        };
        let offset_noise: f64 = StandardNormal.sample(&mut rng);
        let offset = 0.1 * offset_noise;
        for t in 0..time {
            for i in 0..dim {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ne: f64 = StandardNormal.sample(&mut rng);
                *image.at_mut(b, t, i) = 1.0 + offset + 0.2 * nx;
                *event.at_mut(b, t, i) = 1.0 + offset + 0.2 * ne;
                if i < signal_dims {
                    *image.at_mut(b, t, i) += strength;
                }
            }
        }
    }

    // Mean head: identity. Variance head: log_var = -2 z per dimension, so
    // typical inputs (about 1) get high precision and masked zeros drop to
    // unit variance. Classifier reads the signal dimensions.
    let mut heads = LinearHeads::identity(dim);
    for i in 0..dim {
        heads.h_weight[i * dim + i] = -2.0;
    }
    for i in 0..signal_dims {
        heads.classifier_weight[i] = 1.0;
    }
    heads.classifier_bias = -(signal_dims as f64) * 1.55;

    let pipeline = Pipeline::new(heads, AffineEstimator::zero(dim), FusionConfig::default())?
        .with_temporal(TemporalMode::PerStep);
    let video_ids = (0..videos).map(|b| format!("v{b:04}")).collect();
    Ok(MaskingFixture {
        pipeline,
        data: FixtureData {
            image: EmbeddingSequence::new(image, Modality::Image)?,
            event: EmbeddingSequence::new(event, Modality::Event)?,
            labels,
            kinds,
            video_ids,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complementary_fixture_is_deterministic_and_balanced() {
        let spec = ComplementarySpec::default();
        let a = complementary_fixture(&spec).unwrap();
        let b = complementary_fixture(&spec).unwrap();
        assert_eq!(a.image.values, b.image.values);
        assert_eq!(a.labels, b.labels);
        let anomalous = a.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(anomalous, 12);
        let image_kind = a
            .kinds
            .iter()
            .filter(|k| matches!(k, Some(AnomalyKind::ImageSignal)))
            .count();
        assert_eq!(image_kind, 6);
    }

    #[test]
    fn complementary_signal_lands_in_the_right_modality() {
        let spec = ComplementarySpec {
            noise: 0.0,
            ..ComplementarySpec::default()
        };
        let data = complementary_fixture(&spec).unwrap();
        for (b, kind) in data.kinds.iter().enumerate() {
            match kind {
                Some(AnomalyKind::ImageSignal) => {
                    assert_eq!(data.image.values.at(b, 0, 0), spec.signal);
                    assert_eq!(data.event.values.at(b, 0, 2), 0.0);
                }
                Some(AnomalyKind::EventSignal) => {
                    assert_eq!(data.event.values.at(b, 0, 2), spec.signal);
                    assert_eq!(data.image.values.at(b, 0, 0), 0.0);
                }
                None => {
                    assert_eq!(data.image.values.at(b, 0, 0), 0.0);
                    assert_eq!(data.event.values.at(b, 0, 2), 0.0);
                }
            }
        }
    }

    #[test]
    fn masking_fixture_separates_classes_cleanly_enough() {
        let fixture = masking_fixture(7).unwrap();
        let out = fixture
            .pipeline
            .run(&[&fixture.data.image, &fixture.data.event])
            .unwrap();
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (b, segs) in out.segment_probs.iter().enumerate() {
            for &p in segs {
                probs.push(p);
                labels.push(fixture.data.labels[b]);
            }
        }
        let auc = crate::metrics::roc_auc(&probs, &labels).unwrap();
        assert!(auc > 0.8, "clean fixture AUC too low: {auc}");
        assert!(auc <= 1.0);
    }
}
