//! Run configuration: one TOML tree with `sim`, `model`, `loss`, `train`,
//! `data`, `eval` and `explain` sections.
//!
//! Loading merges defaults < file < `--set key=value` overrides. Keys are
//! checked against the default tree so that a misspelled key is rejected
//! with the closest valid sibling as a suggestion.

use std::collections::BTreeMap;
use std::path::Path;

use laneworld::{Density, EventKind, Mode, RenderConfig, ScenarioConfig, Weather};
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unknown config key `{path}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey { path: String, suggestion: Option<String> },
    #[error("config key `{path}` expects {expected}, got {got}")]
    TypeMismatch { path: String, expected: String, got: String },
    #[error("bad override `{0}`: expected key.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub town: String,
    pub render: RenderConfig,
    pub density_scale: f64,
    pub blocked_speed: f64,
    pub blocked_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { town: "town01".into(), render: RenderConfig::default(), density_scale: 0.2, blocked_speed: 0.1, blocked_s: 30.0 }
    }
}

/// Weights of the two L1 terms of the imitation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_a: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_s: 0.5, lambda_a: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is halved.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many parameter updates; 0 means no cap.
    pub max_updates: usize,
    /// Per-channel colour gain jitter amplitude applied to training frames; 0 disables.
    pub color_jitter: f64,
    /// Write a checkpoint every this many epochs into the series; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 0.02,
            milestones: vec![25, 45, 70],
            batch_size: 32,
            epochs: 100,
            grad_clip: 10.0,
            log_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_updates: 0,
            color_jitter: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    Png,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training-split episodes to collect.
    pub episodes: usize,
    /// Held-out episodes (held-out weather, distinct routes) for offline MAE.
    pub held_out_episodes: usize,
    pub route_lanes: usize,
    /// First route id of the training routes; held-out episodes start after them.
    pub route_offset: u64,
    pub density: Density,
    /// Fraction of training episodes that include one scripted jaywalker.
    pub jaywalker_fraction: f64,
    pub weathers: Vec<Weather>,
    pub held_out_weathers: Vec<Weather>,
    /// Per-tick probability of starting a steering perturbation.
    pub noise_prob: f64,
    /// Perturbation length range in ticks.
    pub noise_ticks: [usize; 2],
    /// Peak steering offset of a perturbation.
    pub noise_steer: f64,
    /// Per-tick probability of starting a full-brake perturbation, which
    /// records restarts from low speed on a clear road.
    pub brake_prob: f64,
    /// Brake perturbation length range in ticks.
    pub brake_ticks: [usize; 2],
    /// Keep episodes in which the expert committed an infraction.
    pub keep_flagged: bool,
    pub format: FrameFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 200,
            held_out_episodes: 10,
            route_lanes: 2,
            route_offset: 0,
            density: Density::None,
            jaywalker_fraction: 0.0,
            weathers: Weather::TRAIN.to_vec(),
            held_out_weathers: Weather::HELD_OUT.to_vec(),
            noise_prob: 0.03,
            noise_ticks: [5, 12],
            noise_steer: 0.35,
            brake_prob: 0.01,
            brake_ticks: [5, 20],
            keep_flagged: false,
            format: FrameFormat::Png,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub routes: usize,
    pub route_lanes: usize,
    pub route_offset: u64,
    pub densities: Vec<Density>,
    pub weathers: Vec<Weather>,
    pub seeds: Vec<u64>,
    /// Multiplicative penalty per event kind, keyed by event name.
    pub penalties: BTreeMap<String, f64>,
}

/// Penalty coefficients following the driving-leaderboard convention.
/// They are a configurable convention, not measured constants.
pub fn default_penalties() -> BTreeMap<String, f64> {
    EventKind::ALL
        .iter()
        .map(|&k| {
            let c = match k {
                EventKind::RedLightViolation => 0.7,
                EventKind::CollisionPedestrian => 0.5,
                EventKind::CollisionVehicle => 0.6,
                EventKind::CollisionLayout => 0.65,
                EventKind::CollisionOther => 0.65,
                EventKind::OffLane => 0.8,
                EventKind::RouteDeviation => 0.7,
                EventKind::AgentBlocked => 0.7,
                EventKind::RouteComplete | EventKind::Timeout => 1.0,
            };
            (k.name().to_string(), c)
        })
        .collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            routes: 10,
            route_lanes: 3,
            route_offset: 100_000,
            densities: vec![Density::None, Density::Normal, Density::Crowded],
            weathers: Weather::HELD_OUT.to_vec(),
            seeds: vec![0, 1, 2],
            penalties: default_penalties(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamLayer {
    It,
    V4,
    Mt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub layer: CamLayer,
    /// Blend strength of the heat colour over the frame.
    pub alpha: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { layer: CamLayer::It, alpha: 0.6 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Scenario for one route under the simulator section of this config.
    pub fn scenario(&self, route_id: u64, route_lanes: usize, density: Density, weather: Weather, mode: Mode, jaywalkers: usize) -> ScenarioConfig {
        ScenarioConfig {
            town: self.sim.town.clone(),
            density,
            weather,
            route_id,
            route_lanes,
            jaywalkers,
            density_scale: self.sim.density_scale,
            mode,
            blocked_speed: self.sim.blocked_speed,
            blocked_s: self.sim.blocked_s,
            time_limit_s: None,
            render: self.sim.render.clone(),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        bid_tensor::checkpoint::config_hash(&self.to_json())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let file: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<string>".into(), reason: e.to_string() })?;
        merge(file, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(ConfigError::Invalid)?;
        if self.sim.render.width != self.model.input_width || self.sim.render.height != self.model.input_height {
            return bad(format!(
                "render size {}x{} differs from model input {}x{}",
                self.sim.render.width, self.sim.render.height, self.model.input_width, self.model.input_height
            ));
        }
        if self.loss.lambda_s < 0.0 || self.loss.lambda_a < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return bad("train needs batch_size >= 1, lr > 0, weight_decay >= 0, grad_clip >= 0".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(0.0..1.0).contains(&t.color_jitter) {
            return bad("beta1, beta2 and color_jitter must lie in [0, 1)".into());
        }
        let d = &self.data;
        if d.route_lanes == 0 || d.weathers.is_empty() || d.noise_ticks[0] == 0 || d.noise_ticks[0] > d.noise_ticks[1] || d.brake_ticks[0] == 0 || d.brake_ticks[0] > d.brake_ticks[1] {
            return bad("data needs route_lanes >= 1, a weather list and 1 <= ticks[0] <= ticks[1] for noise and brake perturbations".into());
        }
        if !(0.0..=1.0).contains(&d.jaywalker_fraction) || !(0.0..=1.0).contains(&d.noise_prob) || !(0.0..=1.0).contains(&d.brake_prob) {
            return bad("data fractions must lie in [0, 1]".into());
        }
        if d.held_out_episodes > 0 && d.held_out_weathers.is_empty() {
            return bad("held-out episodes need held_out_weathers".into());
        }
        let e = &self.eval;
        if e.route_lanes == 0 || e.densities.is_empty() || e.weathers.is_empty() || e.seeds.is_empty() {
            return bad("eval needs route_lanes >= 1 and non-empty densities, weathers and seeds".into());
        }
        check_penalties(&e.penalties).map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return bad("explain.alpha must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Every event kind needs a coefficient in (0, 1]; unknown names are rejected.
pub fn check_penalties(p: &BTreeMap<String, f64>) -> Result<(), String> {
    for (name, &c) in p {
        if EventKind::parse(name).is_none() {
            return Err(format!("unknown event kind `{name}` in penalties"));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(format!("penalty for {name} must lie in (0, 1], got {c}"));
        }
    }
    for k in EventKind::ALL {
        if !p.contains_key(k.name()) {
            return Err(format!("penalties missing event kind {}", k.name()));
        }
    }
    Ok(())
}

/// Loads `path` (or only defaults when `None`) and applies `key.path=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let file = match path {
        None => toml::Table::new(),
        Some(p) => {
            let shown = p.display().to_string();
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io { path: shown.clone(), reason: e.to_string() })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, reason: e.to_string() })?
        }
    };
    merge(file, overrides)
}

fn merge(file: toml::Table, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut tree = default_tree();
    overlay(&mut tree, file, "")?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::BadOverride(o.clone()));
        }
        let value = parse_value(raw.trim());
        let mut patch = toml::Table::new();
        let parts: Vec<&str> = key.split('.').collect();
        insert_path(&mut patch, &parts, value);
        overlay(&mut tree, patch, "")?;
    }
    let cfg: RunConfig = toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| ConfigError::Parse { path: "<merged>".into(), reason: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_tree() -> toml::Table {
    match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert_path(t: &mut toml::Table, parts: &[&str], v: toml::Value) {
    if parts.len() == 1 {
        t.insert(parts[0].to_string(), v);
        return;
    }
    let child = t.entry(parts[0].to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if let toml::Value::Table(c) = child {
        insert_path(c, &parts[1..], v);
    }
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "a string",
        toml::Value::Integer(_) => "an integer",
        toml::Value::Float(_) => "a float",
        toml::Value::Boolean(_) => "a boolean",
        toml::Value::Datetime(_) => "a datetime",
        toml::Value::Array(_) => "an array",
        toml::Value::Table(_) => "a table",
    }
}

fn overlay(base: &mut toml::Table, patch: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in patch {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            let suggestion = base
                .keys()
                .map(|c| (strsim::jaro_winkler(&k, c), c))
                .filter(|(s, _)| *s > 0.7)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| if prefix.is_empty() { c.clone() } else { format!("{prefix}.{c}") });
            return Err(ConfigError::UnknownKey { path, suggestion });
        };
        match (slot, v) {
            (toml::Value::Table(b), toml::Value::Table(p)) => overlay(b, p, &path)?,
            (slot @ toml::Value::Float(_), toml::Value::Integer(i)) => *slot = toml::Value::Float(i as f64),
            (slot, v) => {
                let same = std::mem::discriminant(slot) == std::mem::discriminant(&v);
                if !same {
                    return Err(ConfigError::TypeMismatch { path, expected: type_name(slot).into(), got: type_name(&v).into() });
                }
                *slot = v;
            }
        }
    }
    Ok(())
}
