//! Experiment orchestration behind the command-line tool: data generation,
//! training, inference, evaluation, compute sweeps and gradient checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evalproto::{corpus_eval, default_thresholds, frame_to_seconds, AnnotationSet, EvalReport};
use crate::gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
use crate::io::{
    list_videos, load_checkpoint, loss_curve_csv, read_annotations, read_features, read_predictions,
    save_checkpoint, write_annotations, write_atomic, write_features, write_json, write_predictions,
    InferenceRecord,
};
use crate::model::Model;
use crate::scheduler::{run_dynamic_inference, static_inference, verify_exit_state, ExitPolicy};
use crate::seqfeat::FrameFeatureSequence;
use crate::synth::{generate_synthetic, FamilyMix, SyntheticSpec};
use crate::trainer::{fit, EpochLoss, TrainConfig, TrainingExample};

/// File locations; relative paths resolve against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_features: PathBuf,
    pub train_annotations: PathBuf,
    pub test_features: PathBuf,
    pub test_annotations: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub predictions: PathBuf,
    pub inference: PathBuf,
    pub report: PathBuf,
    pub sweep: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train_features: "train/features".into(),
            train_annotations: "train/annotations.json".into(),
            test_features: "test/features".into(),
            test_annotations: "test/annotations.json".into(),
            checkpoint: "model.ckpt".into(),
            loss_curve: "loss.csv".into(),
            predictions: "predictions.json".into(),
            inference: "inference".into(),
            report: "eval.csv".into(),
            sweep: "sweep.csv".into(),
        }
    }
}

/// Synthetic corpus settings shared by the train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub channels: usize,
    pub families: FamilyMix,
    pub boundaries_per_video: usize,
    pub noise_std: f64,
    pub fps: f64,
    pub jittered_raters: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_videos: 200,
            test_videos: 50,
            frames: 100,
            channels: 32,
            families: FamilyMix::Mixed,
            boundaries_per_video: 3,
            noise_std: 0.02,
            fps: 10.0,
            jittered_raters: 2,
        }
    }
}

impl DataConfig {
    /// Spec of one split. Train uses `seed`, test `seed + 1`.
    pub fn split(&self, test: bool, seed: u64, model: &ModelConfig) -> SyntheticSpec {
        SyntheticSpec {
            n_videos: if test { self.test_videos } else { self.train_videos },
            frames: self.frames,
            channels: self.channels,
            families: self.families,
            boundaries_per_video: self.boundaries_per_video,
            noise_std: self.noise_std,
            min_gap: model.window_len(),
            edge_margin: model.half_width,
            fps: self.fps,
            jittered_raters: self.jittered_raters,
            seed: seed + test as u64,
            id_prefix: if test { "test" } else { "train" }.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Exit radii applied to every detector.
    pub grid: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { grid: vec![0, 2, 4, 8] }
    }
}

/// Complete settings of one experiment; one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation, initialization and batch order.
    pub seed: u64,
    /// Worker threads for per-video inference.
    pub threads: usize,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig {
                epochs: 15,
                learning_rate: 0.03,
                batch_size: 4,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `dotted.name = value` overrides. Values parse as JSON when
    /// possible (`3`, `0.5`, `[0,1]`, `true`) and as strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| Error::Config(format!("unknown setting {key}")))?,
                    Value::Array(items) => {
                        let i: usize = part
                            .parse()
                            .map_err(|_| Error::Config(format!("{key}: {part} is not an index")))?;
                        items
                            .get_mut(i)
                            .ok_or_else(|| Error::Config(format!("{key}: index {i} out of range")))?
                    }
                    _ => return Err(Error::Config(format!("{key}: {part} is not a field"))),
                };
            }
            *slot = value;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.data.channels != self.model.input_dim {
            return Err(Error::Config(format!(
                "data has {} channels but the model expects {}",
                self.data.channels, self.model.input_dim
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn resolve(&self, out_dir: &Path, p: &Path) -> PathBuf {
        out_dir.join(p)
    }
}

/// Runs `f` over `items` on a pool of `threads` workers, preserving order.
fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Nearest frame index of a timestamp under the frame-centre convention.
pub fn seconds_to_frame(s: f64, fps: f64) -> usize {
    (s * fps - 0.5).round().max(0.0) as usize
}

// ---------------------------------------------------------------------------
// commands

pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    for test in [false, true] {
        let spec = cfg.data.split(test, cfg.seed, &cfg.model);
        let ds = generate_synthetic(&spec)?;
        let (feat_dir, ann) = if test {
            (&cfg.paths.test_features, &cfg.paths.test_annotations)
        } else {
            (&cfg.paths.train_features, &cfg.paths.train_annotations)
        };
        let feat_dir = cfg.resolve(out_dir, feat_dir);
        for v in &ds.videos {
            write_features(&feat_dir, &v.video_id, &v.features, v.fps)?;
        }
        write_annotations(&cfg.resolve(out_dir, ann), &ds.annotations)?;
    }
    Ok(())
}

/// Features of every video in `dir`, in id order, checked against `annotations`.
fn load_split(dir: &Path, annotations: &BTreeMap<String, AnnotationSet>) -> Result<Vec<(String, FrameFeatureSequence, f64)>> {
    let mut out = Vec::new();
    for id in list_videos(dir)? {
        let (x, meta) = read_features(dir, &id)?;
        if !annotations.contains_key(&id) {
            return Err(Error::Input(format!("no annotation for video {id}")));
        }
        out.push((id, FrameFeatureSequence::from_raw(x)?, meta.fps));
    }
    Ok(out)
}

/// Training examples from feature files, boundaries taken from rater 0.
pub fn load_training_set(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<TrainingExample>> {
    let annotations = read_annotations(&cfg.resolve(out_dir, &cfg.paths.train_annotations))?;
    let split = load_split(&cfg.resolve(out_dir, &cfg.paths.train_features), &annotations)?;
    Ok(split
        .into_iter()
        .map(|(id, seq, fps)| TrainingExample {
            boundaries: annotations[&id].raters[0]
                .iter()
                .map(|&s| seconds_to_frame(s, fps))
                .collect(),
            features: seq.data().clone(),
        })
        .collect())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    let data = load_training_set(cfg, out_dir)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let curve = fit(&data, &mut model, &cfg.train_config())?;
    save_checkpoint(&cfg.resolve(out_dir, &cfg.paths.checkpoint), &model)?;
    write_atomic(&cfg.resolve(out_dir, &cfg.paths.loss_curve), loss_curve_csv(&curve).as_bytes())?;
    Ok(curve)
}

fn load_model(cfg: &RunConfig, out_dir: &Path) -> Result<Model> {
    let mut model = load_checkpoint(&cfg.resolve(out_dir, &cfg.paths.checkpoint))?;
    // scheduler settings come from the run configuration, weights from the file
    if model.config.detectors.len() != cfg.model.detectors.len() {
        return Err(Error::Config("checkpoint and config disagree on the number of detectors".into()));
    }
    for (d, c) in model.config.detectors.iter_mut().zip(&cfg.model.detectors) {
        d.exit_threshold = c.exit_threshold;
        d.exit_radius = c.exit_radius;
    }
    Ok(model)
}

/// Per-video results of running the exit scheduler over a split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceSummary {
    pub videos: usize,
    pub frames: usize,
    pub mean_macs_per_frame: f64,
    pub static_macs_per_frame: u64,
    pub invariant_violations: usize,
}

fn infer_split(
    model: &Model,
    policy: &ExitPolicy,
    split: &[(String, FrameFeatureSequence, f64)],
    threads: usize,
) -> Result<Vec<InferenceRecord>> {
    par_map(threads, split, |(id, seq, fps)| {
        let out = run_dynamic_inference(seq, model, policy)
            .map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::numeric(format!("video {id}: {stage}"), detail),
                other => other,
            })?;
        let violations = verify_exit_state(&out.state, &out.ledger, model);
        if !violations.is_empty() {
            return Err(Error::numeric(
                format!("video {id}: exit bookkeeping"),
                violations.join("; "),
            ));
        }
        Ok(InferenceRecord {
            video_id: id.clone(),
            boundaries_seconds: out.boundaries.iter().map(|&t| frame_to_seconds(t, *fps)).collect(),
            boundaries_frames: out.boundaries,
            exit_stage: out.state.exit_stage,
            frames_processed: out.ledger.frames_processed.clone(),
            macs_per_stage: out.ledger.per_stage(),
            macs_total: out.ledger.total(),
        })
    })
}

fn summarize(model: &Model, records: &[InferenceRecord]) -> InferenceSummary {
    let frames: usize = records.iter().map(|r| r.exit_stage.len()).sum();
    let macs: u64 = records.iter().map(|r| r.macs_total).sum();
    InferenceSummary {
        videos: records.len(),
        frames,
        mean_macs_per_frame: if frames == 0 { 0.0 } else { macs as f64 / frames as f64 },
        static_macs_per_frame: model.static_macs_per_frame(),
        invariant_violations: 0,
    }
}

fn predictions_of(records: &[InferenceRecord]) -> BTreeMap<String, Vec<f64>> {
    records
        .iter()
        .map(|r| (r.video_id.clone(), r.boundaries_seconds.clone()))
        .collect()
}

fn load_test_split(cfg: &RunConfig, out_dir: &Path) -> Result<(Vec<(String, FrameFeatureSequence, f64)>, BTreeMap<String, AnnotationSet>)> {
    let annotations = read_annotations(&cfg.resolve(out_dir, &cfg.paths.test_annotations))?;
    let split = load_split(&cfg.resolve(out_dir, &cfg.paths.test_features), &annotations)?;
    Ok((split, annotations))
}

pub fn cmd_infer(cfg: &RunConfig, out_dir: &Path) -> Result<InferenceSummary> {
    cfg.validate()?;
    let model = load_model(cfg, out_dir)?;
    let (split, _) = load_test_split(cfg, out_dir)?;
    let records = infer_split(&model, &ExitPolicy::from_model(&model), &split, cfg.threads)?;
    let dir = cfg.resolve(out_dir, &cfg.paths.inference);
    for r in &records {
        write_json(&dir.join(format!("{}.json", r.video_id)), r)?;
    }
    let summary = summarize(&model, &records);
    write_json(&dir.join("summary.json"), &summary)?;
    write_predictions(&cfg.resolve(out_dir, &cfg.paths.predictions), &predictions_of(&records))?;
    Ok(summary)
}

pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    let predictions = read_predictions(&cfg.resolve(out_dir, &cfg.paths.predictions))?;
    let annotations = read_annotations(&cfg.resolve(out_dir, &cfg.paths.test_annotations))?;
    let report = corpus_eval(&predictions, &annotations, &default_thresholds())?;
    write_atomic(&cfg.resolve(out_dir, &cfg.paths.report), report.to_csv().as_bytes())?;
    Ok(report)
}

/// One row of the compute/accuracy sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub radius: usize,
    pub mean_macs_per_frame: f64,
    pub f1: Vec<f64>,
}

/// Static full-depth reference for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReference {
    pub static_macs_per_frame: u64,
    pub static_f1: Vec<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("t_mu,mean_macs_per_frame");
    for t in default_thresholds() {
        let _ = write!(s, ",f1@{t:.2}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:.3}", r.radius, r.mean_macs_per_frame);
        for f in &r.f1 {
            let _ = write!(s, ",{f:.6}");
        }
        s.push('\n');
    }
    s
}

/// Sweeps the exit radius of every detector over `grid` on a loaded model.
pub fn sweep_model(
    model: &Model,
    split: &[(String, FrameFeatureSequence, f64)],
    annotations: &BTreeMap<String, AnnotationSet>,
    grid: &[usize],
    threads: usize,
) -> Result<(Vec<SweepRow>, SweepReference)> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let thresholds = default_thresholds();
    let mut rows = Vec::with_capacity(grid.len());
    for &radius in grid {
        let policy = ExitPolicy::from_model(model).with_radius(radius);
        let records = infer_split(model, &policy, split, threads)?;
        let report = corpus_eval(&predictions_of(&records), annotations, &thresholds)?;
        rows.push(SweepRow {
            radius,
            mean_macs_per_frame: summarize(model, &records).mean_macs_per_frame,
            f1: report.rows.iter().map(|r| r.f1).collect(),
        });
    }
    let static_preds = par_map(threads, split, |(id, seq, fps)| {
        let b = static_inference(seq, model)?;
        Ok((id.clone(), b.iter().map(|&t| frame_to_seconds(t, *fps)).collect::<Vec<f64>>()))
    })?
    .into_iter()
    .collect();
    let report = corpus_eval(&static_preds, annotations, &thresholds)?;
    let reference = SweepReference {
        static_macs_per_frame: model.static_macs_per_frame(),
        static_f1: report.rows.iter().map(|r| r.f1).collect(),
    };
    Ok((rows, reference))
}

pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<(Vec<SweepRow>, SweepReference)> {
    cfg.validate()?;
    if cfg.sweep.grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let model = load_model(cfg, out_dir)?;
    let (split, annotations) = load_test_split(cfg, out_dir)?;
    let (rows, reference) = sweep_model(&model, &split, &annotations, &cfg.sweep.grid, cfg.threads)?;
    let path = cfg.resolve(out_dir, &cfg.paths.sweep);
    write_atomic(&path, sweep_csv(&rows).as_bytes())?;
    write_json(&path.with_extension("reference.json"), &reference)?;
    Ok((rows, reference))
}

/// Finite-difference check of the miniature model; fails on any block.
pub fn cmd_gradcheck(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<GradCheckReport> {
    let report = run_gradcheck(&GradCheckConfig {
        seed: cfg.seed,
        ..GradCheckConfig::default()
    })?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("gradcheck.csv"), report.to_string().as_bytes())?;
    }
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|b| b.name.as_str()).collect();
        return Err(Error::numeric("gradient check", format!("failing blocks: {}", names.join(", "))));
    }
    Ok(report)
}
