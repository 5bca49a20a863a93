//! Command-line entry point: `fuse`, `eval`, `perturb`, `events`, and
//! `train-demo` subcommands over the library pipeline.
//!
//! Every run writes a `manifest.json` beside its outputs; re-executing a
//! manifest reproduces the outputs bit-exactly for deterministic paths.
//! Exit codes: 0 success, 2 validation error, 3 degenerate-data error,
//! 1 anything else.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::core::{
    read_embedding_auto, write_emb1, FusionConfig, Modality, NoiseKind,
};
use crate::error::{Error, Result};
use crate::events::{read_frm1, synth_events, write_events, ClampMode, EventOptions};
use crate::fixture::ComplementarySpec;
use crate::losses::LinearHeads;
use crate::metrics::{read_scores_csv, write_scores_csv, EvalReport, ScoreRow};
use crate::perturb::{perturbation_sweep, DEFAULT_RHO_LEVELS};
use crate::pipeline::{Pipeline, TemporalMode};
use crate::refine::AffineEstimator;
use crate::train::{complementary_demo, evaluate_auc, train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "uwfuse",
    version,
    about = "Uncertainty-weighted image-event fusion engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse image and event embeddings into a refined trajectory and
    /// per-segment anomaly scores.
    Fuse(FuseArgs),
    /// Compute AUC/Ano-AUC/AP/Brier from a score CSV.
    Eval(EvalArgs),
    /// Run the masking perturbation sweep and emit its table.
    Perturb(PerturbArgs),
    /// Synthesize binary event maps from an FRM1 frame file.
    Events(EventsArgs),
    /// Train the linear heads with gradient descent on the
    /// complementary-signal fixture (or on provided embeddings).
    TrainDemo(TrainDemoArgs),
}

/// Fusion hyperparameter flags; flags win over `--config`, which wins over
/// the defaults.
#[derive(Args, Clone, Debug, Default)]
struct ConfigFlags {
    /// Flat key = value configuration file (TOML-compatible subset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Student-t degrees of freedom.
    #[arg(long)]
    nu: Option<f64>,
    /// Numerical stability constant added to effective variances.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of refinement iterations.
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Refinement attenuation in (0, 1).
    #[arg(long)]
    refine_lambda: Option<f64>,
    /// Cosine-alignment weight of the regularizer.
    #[arg(long)]
    reg_lambda1: Option<f64>,
    /// Norm-consistency weight of the regularizer.
    #[arg(long)]
    reg_lambda2: Option<f64>,
    /// Noise model: gaussian or student_t.
    #[arg(long)]
    noise_model: Option<String>,
    /// Time steps per scoring segment.
    #[arg(long)]
    segment_len: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<FusionConfig> {
        let mut cfg = FusionConfig::default();
        if let Some(path) = &self.config {
            apply_config_file(&mut cfg, path)?;
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.refine_steps {
            cfg.refine_steps = v;
        }
        if let Some(v) = self.refine_lambda {
            cfg.refine_lambda = v;
        }
        if let Some(v) = self.reg_lambda1 {
            cfg.reg_lambda1 = v;
        }
        if let Some(v) = self.reg_lambda2 {
            cfg.reg_lambda2 = v;
        }
        if let Some(v) = &self.noise_model {
            cfg.noise_model = NoiseKind::parse(v)?;
        }
        if let Some(v) = self.segment_len {
            cfg.segment_len = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat `key = value` configuration: comments (#), blank lines, optional
/// quotes around string values. Accepted keys are exactly the
/// `FusionConfig` fields.
fn apply_config_file(cfg: &mut FusionConfig, path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            Error::format(format!(
                "{} line {}: expected key = value",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        let bad = |what: &str| {
            Error::format(format!(
                "{} line {}: bad {what} value {value:?}",
                path.display(),
                lineno + 1
            ))
        };
        match key {
            "nu" => cfg.nu = value.parse().map_err(|_| bad("nu"))?,
            "epsilon" => cfg.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
            "refine_steps" => {
                cfg.refine_steps = value.parse().map_err(|_| bad("refine_steps"))?;
            }
            "refine_lambda" => {
                cfg.refine_lambda = value.parse().map_err(|_| bad("refine_lambda"))?;
            }
            "reg_lambda1" => cfg.reg_lambda1 = value.parse().map_err(|_| bad("reg_lambda1"))?,
            "reg_lambda2" => cfg.reg_lambda2 = value.parse().map_err(|_| bad("reg_lambda2"))?,
            "noise_model" => cfg.noise_model = NoiseKind::parse(value)?,
            "segment_len" => cfg.segment_len = value.parse().map_err(|_| bad("segment_len"))?,
            _ => {
                return Err(Error::format(format!(
                    "{} line {}: unknown key {key:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
struct FuseArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Image embeddings (EMB1 or JSON lines).
    #[arg(long)]
    image: PathBuf,
    /// Event embeddings (EMB1 or JSON lines).
    #[arg(long)]
    event: PathBuf,
    /// Video labels as a JSON array of {video_id, label} records.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Linear head parameters (JSON); identity mean head, unit variance,
    /// and a uniform-average classifier when omitted.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Affine estimator parameters (EMB1 container); zero when omitted.
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory fed to refinement: smoothed or per-step.
    #[arg(long, default_value = "smoothed")]
    temporal: String,
    /// Layer-normalize inputs before the heads.
    #[arg(long)]
    layer_norm: bool,
}

#[derive(Args, Clone, Debug)]
struct EvalArgs {
    /// Score CSV (video_id,segment_index,score,label,video_is_anomalous).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Args, Clone, Debug)]
struct PerturbArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    event: PathBuf,
    /// Video labels (required: the sweep reports detection metrics).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    heads: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated masking ratios.
    #[arg(long, value_delimiter = ',')]
    rho_levels: Option<Vec<f64>>,
    /// Comma-separated mask targets (image, event).
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    #[arg(long, default_value = "per-step")]
    temporal: String,
    #[arg(long)]
    layer_norm: bool,
}

#[derive(Args, Clone, Debug)]
struct EventsArgs {
    /// Grayscale frames (FRM1).
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Firing threshold on absolute intensity change (0-1 scale).
    #[arg(long)]
    threshold: Option<f64>,
    /// Per-pixel per-segment cap on fired events.
    #[arg(long)]
    clamp: Option<usize>,
    /// count_cap or intensity_clamp.
    #[arg(long)]
    clamp_mode: Option<String>,
    #[arg(long)]
    segment_len: Option<usize>,
}

#[derive(Args, Clone, Debug)]
struct TrainDemoArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Train on provided embeddings instead of the synthetic fixture.
    #[arg(long, requires = "event", requires = "labels")]
    image: Option<PathBuf>,
    #[arg(long)]
    event: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Synthetic fixture: number of videos.
    #[arg(long, default_value_t = 24)]
    videos: usize,
    /// Synthetic fixture: time steps per video.
    #[arg(long, default_value_t = 32)]
    time: usize,
    /// Synthetic fixture: feature dimension.
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

/// Everything needed to reproduce a run, serialized beside its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: FusionConfig,
    pub seed: u64,
    pub repeat: usize,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_norm: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_levels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_options: Option<EventOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_videos: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_time: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_dim: Option<usize>,
}

impl RunManifest {
    fn base(subcommand: &str, config: FusionConfig, seed: u64, out_dir: PathBuf) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seed,
            repeat: 1,
            out_dir,
            image: None,
            event: None,
            labels: None,
            heads: None,
            estimator: None,
            scores: None,
            frames: None,
            temporal: None,
            layer_norm: None,
            rho_levels: None,
            targets: None,
            event_options: None,
            learning_rate: None,
            epochs: None,
            fixture_videos: None,
            fixture_time: None,
            fixture_dim: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Re-executes a previously written manifest; `out_dir` overrides the
/// recorded output directory when given.
pub fn run_from_manifest(path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::read(path)?;
    if let Some(dir) = out_dir {
        manifest.out_dir = dir.to_path_buf();
    }
    execute(&manifest)
}

/// Label records: a JSON array of `{ "video_id": ..., "label": 0|1 }` in
/// batch order.
#[derive(Serialize, Deserialize)]
struct LabelRecord {
    video_id: String,
    label: u8,
}

pub fn read_labels_json(path: &Path) -> Result<(Vec<String>, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<LabelRecord> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(Error::EmptyInput { what: "labels" });
    }
    if records.iter().any(|r| r.label > 1) {
        return Err(Error::format("labels must be 0 or 1"));
    }
    Ok(records
        .into_iter()
        .map(|r| (r.video_id, r.label))
        .unzip())
}

pub fn write_labels_json(path: &Path, ids: &[String], labels: &[u8]) -> Result<()> {
    let records: Vec<LabelRecord> = ids
        .iter()
        .zip(labels)
        .map(|(video_id, &label)| LabelRecord {
            video_id: video_id.clone(),
            label,
        })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &records)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Identity mean head, unit variance, and a uniform-average classifier.
fn default_heads(dim: usize) -> LinearHeads {
    let mut heads = LinearHeads::identity(dim);
    for w in heads.classifier_weight.iter_mut() {
        *w = 1.0 / dim as f64;
    }
    heads
}

fn load_pipeline(manifest: &RunManifest, dim: usize) -> Result<Pipeline> {
    let heads = match &manifest.heads {
        Some(path) => LinearHeads::read_json(path)?,
        None => default_heads(dim),
    };
    let estimator = match &manifest.estimator {
        Some(path) => AffineEstimator::read_emb1(path)?,
        None => AffineEstimator::zero(dim),
    };
    let temporal = match manifest.temporal.as_deref() {
        Some(s) => TemporalMode::parse(s)?,
        None => TemporalMode::Smoothed,
    };
    Ok(Pipeline::new(heads, estimator, manifest.config.clone())?
        .with_temporal(temporal)
        .with_normalize(manifest.layer_norm.unwrap_or(false)))
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn execute(manifest: &RunManifest) -> Result<()> {
    ensure_out_dir(&manifest.out_dir)?;
    match manifest.subcommand.as_str() {
        "fuse" => exec_fuse(manifest),
        "eval" => exec_eval(manifest),
        "perturb" => exec_perturb(manifest),
        "events" => exec_events(manifest),
        "train-demo" => exec_train_demo(manifest),
        other => Err(Error::format(format!("unknown subcommand {other:?}"))),
    }?;
    manifest.write(&manifest.out_dir.join("manifest.json"))
}

fn load_pair(
    manifest: &RunManifest,
) -> Result<(crate::EmbeddingSequence, crate::EmbeddingSequence)> {
    let image_path = manifest
        .image
        .as_ref()
        .ok_or_else(|| Error::format("missing image input"))?;
    let event_path = manifest
        .event
        .as_ref()
        .ok_or_else(|| Error::format("missing event input"))?;
    let image = read_embedding_auto(image_path, Modality::Image)?;
    let event = read_embedding_auto(event_path, Modality::Event)?;
    if image.shape() != event.shape() {
        return Err(Error::ShapeMismatch {
            what: "modality inputs",
            expected: format!("{:?}", image.shape()),
            actual: format!("{:?}", event.shape()),
        });
    }
    Ok((image, event))
}

fn load_optional_labels(
    manifest: &RunManifest,
    batch: usize,
) -> Result<(Vec<String>, Vec<u8>)> {
    match &manifest.labels {
        Some(path) => {
            let (ids, labels) = read_labels_json(path)?;
            if labels.len() != batch {
                return Err(Error::ShapeMismatch {
                    what: "video labels",
                    expected: format!("{batch} labels"),
                    actual: format!("{}", labels.len()),
                });
            }
            Ok((ids, labels))
        }
        None => Ok((
            (0..batch).map(|b| format!("video{b:04}")).collect(),
            vec![0; batch],
        )),
    }
}

fn exec_fuse(manifest: &RunManifest) -> Result<()> {
    let (image, event) = load_pair(manifest)?;
    let (batch, _, dim) = image.shape();
    let pipeline = load_pipeline(manifest, dim)?;
    let out = pipeline.run(&[&image, &event])?;
    let (ids, labels) = load_optional_labels(manifest, batch)?;

    write_emb1(
        &manifest.out_dir.join("trajectory.emb1"),
        &out.refined.fused_mean,
    )?;
    write_emb1(
        &manifest.out_dir.join("variance.emb1"),
        &out.refined.fused_variance,
    )?;
    let mut rows = Vec::new();
    for (b, probs) in out.segment_probs.iter().enumerate() {
        for (s, &p) in probs.iter().enumerate() {
            rows.push(ScoreRow {
                video_id: ids[b].clone(),
                segment_index: s,
                score: p,
                label: labels[b],
                video_is_anomalous: labels[b] == 1,
            });
        }
    }
    write_scores_csv(&manifest.out_dir.join("scores.csv"), &rows)
}

fn exec_eval(manifest: &RunManifest) -> Result<()> {
    let scores_path = manifest
        .scores
        .as_ref()
        .ok_or_else(|| Error::format("missing scores input"))?;
    let rows = read_scores_csv(scores_path)?;
    let probs: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let flags: Vec<bool> = rows.iter().map(|r| r.video_is_anomalous).collect();
    let report = EvalReport::compute(&probs, &labels, &flags, None)?;
    report.write_json(&manifest.out_dir.join("report.json"))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?
    );
    Ok(())
}

fn exec_perturb(manifest: &RunManifest) -> Result<()> {
    let (image, event) = load_pair(manifest)?;
    let (batch, _, dim) = image.shape();
    if manifest.labels.is_none() {
        return Err(Error::format("perturb requires --labels"));
    }
    let (_, labels) = load_optional_labels(manifest, batch)?;
    let pipeline = load_pipeline(manifest, dim)?;
    let rho_levels = manifest
        .rho_levels
        .clone()
        .unwrap_or_else(|| DEFAULT_RHO_LEVELS.to_vec());
    let targets: Vec<Modality> = match &manifest.targets {
        Some(names) => names
            .iter()
            .map(|n| Modality::parse(n))
            .collect::<Result<_>>()?,
        None => vec![Modality::Event, Modality::Image],
    };
    let table = perturbation_sweep(
        &pipeline,
        &image,
        &event,
        &labels,
        &rho_levels,
        &targets,
        manifest.seed,
    )?;
    table.write_csv(&manifest.out_dir.join("sweep.csv"))?;
    table.write_json(&manifest.out_dir.join("sweep.json"))
}

fn exec_events(manifest: &RunManifest) -> Result<()> {
    let frames_path = manifest
        .frames
        .as_ref()
        .ok_or_else(|| Error::format("missing frames input"))?;
    let frames = read_frm1(frames_path)?;
    let opts = manifest.event_options.clone().unwrap_or_default();
    let segments = synth_events(&frames, &opts)?;
    write_events(
        &manifest.out_dir.join("events.bin"),
        &manifest.out_dir.join("events.json"),
        &segments,
        &opts,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct DemoRun {
    seed: u64,
    fused_auc: f64,
    image_auc: f64,
    event_auc: f64,
}

#[derive(Serialize)]
struct DemoReport {
    runs: Vec<DemoRun>,
    fused_auc_mean: f64,
    fused_auc_std: f64,
    image_auc_mean: f64,
    event_auc_mean: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn exec_train_demo(manifest: &RunManifest) -> Result<()> {
    let opts = TrainOptions {
        learning_rate: manifest.learning_rate.unwrap_or(0.05),
        epochs: manifest.epochs.unwrap_or(200),
        ..TrainOptions::default()
    };
    if manifest.image.is_some() {
        // Provided-data mode: train the fused model on the given pair and
        // report its AUC on the same data.
        let (image, event) = load_pair(manifest)?;
        let (batch, _, dim) = image.shape();
        let (_, labels) = load_optional_labels(manifest, batch)?;
        let mut pipeline =
            Pipeline::new(default_heads(dim), AffineEstimator::zero(dim), manifest.config.clone())?
                .with_temporal(TemporalMode::PerStep);
        pipeline.heads = LinearHeads::identity(dim);
        let history = train(&mut pipeline, &[&image, &event], &labels, &opts)?;
        history.write_csv(&manifest.out_dir.join("curve.csv"))?;
        pipeline.heads.write_json(&manifest.out_dir.join("heads.json"))?;
        pipeline
            .estimator
            .write_emb1(&manifest.out_dir.join("estimator.emb1"))?;
        let auc = evaluate_auc(&pipeline, &[&image, &event], &labels)?;
        let report = DemoReport {
            runs: vec![DemoRun {
                seed: manifest.seed,
                fused_auc: auc,
                image_auc: f64::NAN,
                event_auc: f64::NAN,
            }],
            fused_auc_mean: auc,
            fused_auc_std: 0.0,
            image_auc_mean: f64::NAN,
            event_auc_mean: f64::NAN,
        };
        let file = File::create(manifest.out_dir.join("result.json"))
            .map_err(|e| Error::io(&manifest.out_dir, e))?;
        return serde_json::to_writer_pretty(BufWriter::new(file), &report)
            .map_err(|e| Error::format(e.to_string()));
    }

    // Synthetic mode: train/test draws of the complementary fixture per
    // repeat, reporting mean and standard deviation over repeats.
    let mut runs = Vec::new();
    let mut curve: Option<crate::train::TrainHistory> = None;
    for k in 0..manifest.repeat.max(1) {
        let seed = manifest.seed + k as u64;
        let spec = ComplementarySpec {
            videos: manifest.fixture_videos.unwrap_or(24),
            time: manifest.fixture_time.unwrap_or(32),
            dim: manifest.fixture_dim.unwrap_or(8),
            seed,
            ..ComplementarySpec::default()
        };
        let outcome = complementary_demo(&spec, seed + 1_000_000, &opts, &manifest.config)?;
        runs.push(DemoRun {
            seed,
            fused_auc: outcome.fused_auc,
            image_auc: outcome.image_auc,
            event_auc: outcome.event_auc,
        });
        if curve.is_none() {
            curve = Some(outcome.fused_history);
        }
    }
    if let Some(history) = &curve {
        history.write_csv(&manifest.out_dir.join("curve.csv"))?;
    }
    let fused: Vec<f64> = runs.iter().map(|r| r.fused_auc).collect();
    let image: Vec<f64> = runs.iter().map(|r| r.image_auc).collect();
    let event: Vec<f64> = runs.iter().map(|r| r.event_auc).collect();
    let (fused_mean, fused_std) = mean_std(&fused);
    let report = DemoReport {
        runs,
        fused_auc_mean: fused_mean,
        fused_auc_std: fused_std,
        image_auc_mean: mean_std(&image).0,
        event_auc_mean: mean_std(&event).0,
    };
    println!(
        "fused AUC {:.4} +/- {:.4} (image {:.4}, event {:.4})",
        report.fused_auc_mean,
        report.fused_auc_std,
        report.image_auc_mean,
        report.event_auc_mean
    );
    let path = manifest.out_dir.join("result.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &report)
        .map_err(|e| Error::format(e.to_string()))
}

fn manifest_from_cli(cli: Cli) -> Result<RunManifest> {
    Ok(match cli.command {
        Command::Fuse(args) => {
            let mut m = RunManifest::base("fuse", args.config.resolve()?, args.seed, args.out);
            m.image = Some(args.image);
            m.event = Some(args.event);
            m.labels = args.labels;
            m.heads = args.heads;
            m.estimator = args.estimator;
            m.temporal = Some(args.temporal);
            m.layer_norm = Some(args.layer_norm);
            m
        }
        Command::Eval(args) => {
            let mut m =
                RunManifest::base("eval", FusionConfig::default(), args.seed, args.out);
            m.scores = Some(args.scores);
            m.repeat = args.repeat;
            m
        }
        Command::Perturb(args) => {
            let mut m =
                RunManifest::base("perturb", args.config.resolve()?, args.seed, args.out);
            m.image = Some(args.image);
            m.event = Some(args.event);
            m.labels = Some(args.labels);
            m.heads = args.heads;
            m.estimator = args.estimator;
            m.temporal = Some(args.temporal);
            m.layer_norm = Some(args.layer_norm);
            m.rho_levels = args.rho_levels;
            m.targets = args.targets;
            m
        }
        Command::Events(args) => {
            let mut m =
                RunManifest::base("events", FusionConfig::default(), 0, args.out);
            let mut opts = EventOptions::default();
            if let Some(v) = args.threshold {
                opts.threshold = v;
            }
            if let Some(v) = args.clamp {
                opts.clamp = v;
            }
            if let Some(v) = &args.clamp_mode {
                opts.clamp_mode = match v.as_str() {
                    "count_cap" => ClampMode::CountCap,
                    "intensity_clamp" => ClampMode::IntensityClamp,
                    _ => {
                        return Err(Error::format(format!(
                            "unknown clamp mode {v:?} (expected count_cap or intensity_clamp)"
                        )))
                    }
                };
            }
            if let Some(v) = args.segment_len {
                opts.segment_len = v;
            }
            m.frames = Some(args.frames);
            m.event_options = Some(opts);
            m
        }
        Command::TrainDemo(args) => {
            let mut m = RunManifest::base(
                "train-demo",
                args.config.resolve()?,
                args.seed,
                args.out,
            );
            m.image = args.image;
            m.event = args.event;
            m.labels = args.labels;
            m.repeat = args.repeat;
            m.learning_rate = Some(args.learning_rate);
            m.epochs = Some(args.epochs);
            m.fixture_videos = Some(args.videos);
            m.fixture_time = Some(args.time);
            m.fixture_dim = Some(args.dim);
            m
        }
    })
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let manifest = match manifest_from_cli(cli) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(&manifest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
