//! Composable run stages sharing one output directory:
//! `collect` → `train` → `eval` → `explain` → `report`.
//!
//! Each stage writes `<out>/<stage>/config.toml` (the exact run config) and
//! `<out>/<stage>/stage.json` (a [`StageManifest`] with the config hash and
//! output file digests) so that the next stage can find and verify it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bid_tensor::checkpoint::{self, hex_digest, CheckpointError};
use bid_tensor::{ParamStore, TensorError};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, ConfigError, RunConfig};
use crate::dataops::{self, DataError, Dataset};
use crate::evaluation::{self, ExpertAgent, MetricsError, MetricsReport, ModelAgent};
use crate::explain::{self, Target};
use crate::model::{frame_tensor, BidModel};
use crate::training::{self, LogRecord, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{what} not found at {path}: {hint}")]
    Missing { what: String, path: String, hint: String },
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Usage-type failures (bad configuration) versus runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), reason: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Upstream stage name → that stage's config hash.
    pub inputs: BTreeMap<String, String>,
    /// File name relative to the stage directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn stage_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

struct StageWriter {
    dir: PathBuf,
    manifest: StageManifest,
}

impl StageWriter {
    fn new(out: &Path, stage: &str, cfg: &RunConfig) -> Result<Self, PipelineError> {
        let dir = stage_dir(out, stage);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let mut w = StageWriter {
            dir,
            manifest: StageManifest { stage: stage.into(), config_hash: cfg.hash(), seed: cfg.seed, inputs: BTreeMap::new(), outputs: BTreeMap::new() },
        };
        w.write("config.toml", cfg.to_toml().as_bytes())?;
        Ok(w)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
        let path = self.dir.join(rel);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p).map_err(|e| io(p, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        self.manifest.outputs.insert(rel.into(), hex_digest(bytes));
        Ok(path)
    }

    fn record(&mut self, rel: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        self.manifest.outputs.insert(rel.into(), hex_digest(&bytes));
        Ok(())
    }

    fn finish(self) -> Result<StageManifest, PipelineError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        let path = self.dir.join("stage.json");
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(self.manifest)
    }
}

/// Reads an upstream stage manifest or explains which stage to run first.
pub fn require_stage(out: &Path, stage: &str, hint: &str) -> Result<StageManifest, PipelineError> {
    let path = stage_dir(out, stage).join("stage.json");
    let text = std::fs::read_to_string(&path).map_err(|_| PipelineError::Missing {
        what: format!("{stage} output"),
        path: path.display().to_string(),
        hint: hint.into(),
    })?;
    serde_json::from_str(&text).map_err(|e| io(&path, e))
}

/// The run config stored with a stage.
pub fn stage_config(out: &Path, stage: &str) -> Result<RunConfig, PipelineError> {
    Ok(load_config(Some(&stage_dir(out, stage).join("config.toml")), &[])?)
}

pub fn run_collect(cfg: &RunConfig, out: &Path) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    let mut w = StageWriter::new(out, "collect", cfg)?;
    let ds = dataops::collect_episodes(cfg, cfg.seed)?;
    let root = w.dir.join("dataset");
    dataops::write_dataset(&ds, &root)?;
    w.record("dataset/manifest.json")?;
    w.finish()
}

pub fn load_dataset(out: &Path) -> Result<Dataset, PipelineError> {
    require_stage(out, "collect", "run `bid collect` first")?;
    Ok(dataops::read_dataset(&stage_dir(out, "collect").join("dataset"))?)
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    stage_dir(out, "train").join("checkpoint.bidckpt")
}

fn model_json(model: &BidModel) -> serde_json::Value {
    serde_json::to_value(&model.cfg).expect("model config serializes")
}

pub fn run_train(cfg: &RunConfig, out: &Path, on_log: &mut dyn FnMut(&LogRecord)) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    let upstream = require_stage(out, "collect", "dataset missing: run `bid collect` first")?;
    let ds = load_dataset(out)?;
    if ds.width() != cfg.model.input_width || ds.height() != cfg.model.input_height {
        return Err(PipelineError::Invalid(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            ds.width(),
            ds.height(),
            cfg.model.input_width,
            cfg.model.input_height
        )));
    }
    let model = BidModel::new(cfg.model.clone())?;
    let mut w = StageWriter::new(out, "train", cfg)?;
    w.manifest.inputs.insert("collect".into(), upstream.config_hash);
    let meta = |epoch: usize| serde_json::json!({ "run_config_hash": cfg.hash(), "epoch": epoch });
    let outcome = match training::train(&model, &ds, cfg, None, on_log) {
        Ok(o) => o,
        Err(TrainError::NonFinite { epoch, update, diagnostic }) => {
            let path = w.dir.join("diagnostic.bidckpt");
            checkpoint::save(&path, &diagnostic, &model_json(&model), meta(epoch))?;
            return Err(TrainError::NonFinite { epoch, update, diagnostic }.into());
        }
        Err(e) => return Err(e.into()),
    };
    w.write("train_log.jsonl", training::write_train_log(&outcome.log).as_bytes())?;
    for (epoch, p) in &outcome.snapshots {
        let rel = format!("checkpoints/epoch_{epoch:04}.bidckpt");
        w.write(&rel, &checkpoint::encode(p, &model_json(&model), meta(*epoch)))?;
    }
    let epochs = outcome.log.len();
    w.write("checkpoint.bidckpt", &checkpoint::encode(&outcome.params, &model_json(&model), meta(epochs)))?;
    w.finish()
}

/// Loads the trained checkpoint (or `explicit`); the stored architecture must equal the config's.
pub fn load_model(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> Result<(BidModel, ParamStore<f32>), PipelineError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            require_stage(out, "train", "no checkpoint: run `bid train` first")?;
            checkpoint_path(out)
        }
    };
    let (params, manifest) = checkpoint::load(&path)?;
    let model = BidModel::new(cfg.model.clone())?;
    if manifest.config_hash != checkpoint::config_hash(&model_json(&model)) {
        return Err(PipelineError::Invalid("checkpoint architecture differs from the configured model".into()));
    }
    Ok((model, params))
}

/// Benchmarks the trained model (or the scripted expert when `expert` is set).
pub fn run_eval(cfg: &RunConfig, out: &Path, expert: bool) -> Result<(StageManifest, MetricsReport), PipelineError> {
    cfg.validate()?;
    let mut inputs = BTreeMap::new();
    let (report, logs) = if expert {
        evaluation::benchmark(&mut ExpertAgent::default(), cfg)?
    } else {
        let up = require_stage(out, "train", "no checkpoint: run `bid train` first")?;
        inputs.insert("train".to_string(), up.config_hash);
        let (model, params) = load_model(cfg, out, None)?;
        evaluation::benchmark(&mut ModelAgent::new(model, params), cfg)?
    };
    let mut w = StageWriter::new(out, "eval", cfg)?;
    w.manifest.inputs = inputs;
    let episodes: String = logs.iter().map(|l| serde_json::to_string(l).expect("log serializes") + "\n").collect();
    w.write("episodes.jsonl", episodes.as_bytes())?;
    w.write("report.json", (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    w.write("report.md", report.to_markdown().as_bytes())?;
    Ok((w.finish()?, report))
}

/// Grad-CAM overlay for one recorded tick of a dataset episode.
pub fn run_explain(cfg: &RunConfig, out: &Path, ckpt: Option<&Path>, episode: &str, tick: u64, target: Target) -> Result<StageManifest, PipelineError> {
    cfg.validate()?;
    let (model, params) = load_model(cfg, out, ckpt)?;
    let ds = load_dataset(out)?;
    let ei = ds.episodes.iter().position(|e| e.meta.id == episode).ok_or_else(|| PipelineError::Invalid(format!("no episode `{episode}` in the dataset")))?;
    let ri = ds.episodes[ei].records.iter().position(|r| r.tick == tick).ok_or_else(|| PipelineError::Invalid(format!("episode `{episode}` has no tick {tick}")))?;
    let (fr, pr) = ds.frame_pair((ei, ri));
    let (w_px, h_px) = (ds.width(), ds.height());
    let frame = frame_tensor(fr, w_px, h_px);
    let prev = frame_tensor(pr, w_px, h_px);
    let command = ds.episodes[ei].records[ri].command;
    let action = model.act(&params, &frame, &prev, command)?;
    let heat = explain::grad_cam(&model, &params, &frame, &prev, command, target, cfg.explain.layer)?;
    let img = explain::overlay(&heat, fr, w_px, h_px, cfg.explain.alpha);
    let img = explain::annotate(&img, command, action[0] as f64, action[1] as f64);
    let mut w = StageWriter::new(out, "explain", cfg)?;
    let stem = format!("{episode}_t{tick:06}_{}", if target == Target::Steer { "steer" } else { "accel" });
    w.write(&format!("{stem}.png"), &explain::encode_png(&img))?;
    w.write(&format!("{stem}.json"), (serde_json::to_string_pretty(&heat).expect("heatmap serializes") + "\n").as_bytes())?;
    w.finish()
}

/// Renders the evaluation tables and, when a training log exists, the curve plot.
pub fn run_report(cfg: &RunConfig, out: &Path) -> Result<StageManifest, PipelineError> {
    let up = require_stage(out, "eval", "no evaluation results: run `bid eval` first")?;
    let path = stage_dir(out, "eval").join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| io(&path, e))?;
    let mut w = StageWriter::new(out, "report", cfg)?;
    w.manifest.inputs.insert("eval".into(), up.config_hash);
    let mut md = report.to_markdown();
    let log_path = stage_dir(out, "train").join("train_log.jsonl");
    if let Ok(text) = std::fs::read_to_string(&log_path) {
        let log: Vec<LogRecord> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        if !log.is_empty() {
            w.write("training_curve.png", &plot_training_curve(&log))?;
            md.push_str("\n## Training\n\n| Epoch | LR | Train loss | Held-out MAE steer | Held-out MAE accel |\n|---|---|---|---|---|\n");
            for r in &log {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                md.push_str(&format!("| {} | {:.2e} | {:.4} | {} | {} |\n", r.epoch + 1, r.lr, r.train_loss, f(r.heldout_mae_steer), f(r.heldout_mae_accel)));
            }
            md.push_str("\n![training curve](training_curve.png)\n");
        }
    }
    w.write("report.md", md.as_bytes())?;
    w.finish()
}

/// Line plot of train loss (red), held-out steer MAE (blue) and accel MAE (green) per epoch.
pub fn plot_training_curve(log: &[LogRecord]) -> Vec<u8> {
    let (w, h, m) = (360usize, 220usize, 20usize);
    let mut img = explain::Image { width: w, height: h, rgb: vec![255; w * h * 3] };
    let put = |img: &mut explain::Image, x: usize, y: usize, c: [u8; 3]| {
        if x < w && y < h {
            img.rgb[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&c);
        }
    };
    for x in m..w - m {
        put(&mut img, x, h - m, [0, 0, 0]);
    }
    for y in m..=h - m {
        put(&mut img, m, y, [0, 0, 0]);
    }
    let series: [(Vec<(f64, f64)>, [u8; 3]); 3] = [
        (log.iter().map(|r| (r.epoch as f64, r.train_loss)).collect(), [220, 30, 30]),
        (log.iter().filter_map(|r| r.heldout_mae_steer.map(|v| (r.epoch as f64, v))).collect(), [30, 60, 220]),
        (log.iter().filter_map(|r| r.heldout_mae_accel.map(|v| (r.epoch as f64, v))).collect(), [30, 160, 40]),
    ];
    let xmax = log.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let ymax = series.iter().flat_map(|(s, _)| s.iter().map(|p| p.1)).fold(1e-9, f64::max);
    let to_px = |(x, y): (f64, f64)| (m as f64 + x / xmax * (w - 2 * m) as f64, (h - m) as f64 - y / ymax * (h - 2 * m) as f64);
    for (pts, color) in &series {
        for pair in pts.windows(2) {
            let (a, b) = (to_px(pair[0]), to_px(pair[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                put(&mut img, (a.0 + t * (b.0 - a.0)).round() as usize, (a.1 + t * (b.1 - a.1)).round() as usize, *color);
            }
        }
        for &p in pts {
            let (x, y) = to_px(p);
            for dx in 0..3 {
                for dy in 0..3 {
                    put(&mut img, (x as usize + dx).saturating_sub(1), (y as usize + dy).saturating_sub(1), *color);
                }
            }
        }
    }
    explain::encode_png(&img)
}
