//! Closed-loop benchmark and metrics: success rates, infraction counts,
//! penalty products, path accomplishment and driving score.

use std::collections::BTreeMap;

use bid_tensor::{ParamStore, Tensor};
use laneworld::{next_command, render, Action, Density, DrivingEvent, EventKind, Expert, Frame, Mode, NavCommand, ScenarioConfig, Weather, World};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model::{frame_tensor, BidModel};

/// A driving policy queried once per tick.
pub trait Agent {
    fn name(&self) -> String;
    /// Called at the start of every episode.
    fn reset(&mut self);
    fn act(&mut self, world: &World, frame: &Frame, command: NavCommand) -> Action;
}

/// The privileged scripted expert.
#[derive(Default)]
pub struct ExpertAgent(Expert);

impl Agent for ExpertAgent {
    fn name(&self) -> String {
        "expert".into()
    }

    fn reset(&mut self) {
        self.0 = Expert::new();
    }

    fn act(&mut self, world: &World, _: &Frame, _: NavCommand) -> Action {
        self.0.act(world)
    }
}

/// A trained network acting from pixels and the command only.
pub struct ModelAgent {
    pub model: BidModel,
    pub params: ParamStore<f32>,
    prev: Option<Tensor<f32>>,
}

impl ModelAgent {
    pub fn new(model: BidModel, params: ParamStore<f32>) -> Self {
        ModelAgent { model, params, prev: None }
    }
}

impl Agent for ModelAgent {
    fn name(&self) -> String {
        self.model.cfg.variant.name().into()
    }

    fn reset(&mut self) {
        self.prev = None;
    }

    fn act(&mut self, _: &World, frame: &Frame, command: NavCommand) -> Action {
        let cur: Tensor<f32> = frame_tensor(&frame.rgb, frame.width, frame.height);
        let prev = self.prev.replace(cur.clone()).unwrap_or_else(|| cur.clone());
        match self.model.act(&self.params, &cur, &prev, command) {
            Ok([s, a]) => Action::new(s as f64, a as f64).clamped(),
            // a non-finite forward pass brakes in place rather than aborting the benchmark
            Err(_) => Action::new(0.0, -1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario_id: String,
    pub route_id: u64,
    pub density: Density,
    pub weather: Weather,
    pub seed: u64,
    pub events: Vec<DrivingEvent>,
    pub route_length: f64,
    pub distance_completed: f64,
    pub completed: bool,
    pub ticks: u64,
    /// Set when the simulator could not run the episode; excluded from metrics.
    pub aborted: Option<String>,
}

impl EpisodeLog {
    pub fn completion_pct(&self) -> f64 {
        if self.route_length <= 0.0 {
            100.0
        } else {
            100.0 * (self.distance_completed / self.route_length).clamp(0.0, 1.0)
        }
    }

    pub fn infractions(&self) -> impl Iterator<Item = &DrivingEvent> {
        self.events.iter().filter(|e| e.kind.is_infraction())
    }
}

/// Runs one closed-loop episode in evaluation mode.
pub fn run_route(agent: &mut dyn Agent, scenario: &ScenarioConfig, seed: u64) -> EpisodeLog {
    let mut sc = scenario.clone();
    sc.mode = Mode::Eval;
    let scenario_id = format!("{}/{}/{}/route{}", sc.town, density_name(sc.density), sc.weather.name(), sc.route_id);
    let mut log = EpisodeLog {
        scenario_id,
        route_id: sc.route_id,
        density: sc.density,
        weather: sc.weather,
        seed,
        events: Vec::new(),
        route_length: 0.0,
        distance_completed: 0.0,
        completed: false,
        ticks: 0,
        aborted: None,
    };
    let mut w = match World::spawn(&sc, seed) {
        Ok(w) => w,
        Err(e) => {
            log.aborted = Some(e.to_string());
            return log;
        }
    };
    agent.reset();
    let cap = w.time_limit_ticks + 10;
    while !w.is_done() && w.tick < cap {
        let frame = render(&w);
        let cmd = next_command(&w).command;
        let a = agent.act(&w, &frame, cmd);
        w.step(a);
    }
    if !w.is_done() {
        log.aborted = Some("episode exceeded its tick cap".into());
    }
    log.events = w.events.clone();
    log.route_length = w.initial_length;
    log.distance_completed = w.completed.min(w.initial_length);
    log.completed = w.events.iter().any(|e| e.kind == EventKind::RouteComplete);
    log.ticks = w.tick;
    log
}

pub fn density_name(d: Density) -> &'static str {
    match d {
        Density::None => "none",
        Density::Normal => "normal",
        Density::Crowded => "crowded",
    }
}

// ---- metrics kernel ------------------------------------------------------------

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no penalty coefficient for event kind {0}")]
    UnknownKind(String),
    #[error("no episode logs to score")]
    Empty,
}

/// `(SR, SSR)` in percent. SSR counts completed runs without any infraction event.
pub fn success_rate(logs: &[EpisodeLog]) -> Result<(f64, f64), MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = logs.len() as f64;
    let done = logs.iter().filter(|l| l.completed).count() as f64;
    let strict = logs.iter().filter(|l| l.completed && l.infractions().next().is_none()).count() as f64;
    Ok((100.0 * done / n, 100.0 * strict / n))
}

/// Product over events of the coefficient of each event's kind.
pub fn infraction_penalty(events: &[DrivingEvent], coefficients: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    events.iter().try_fold(1.0, |acc, e| {
        let c = coefficients.get(e.kind.name()).ok_or_else(|| MetricsError::UnknownKind(e.kind.name().into()))?;
        Ok(acc * c)
    })
}

/// `(APA, DS)` in percent: mean completion and mean completion × penalty.
pub fn driving_score(logs: &[EpisodeLog], coefficients: &BTreeMap<String, f64>) -> Result<(f64, f64), MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = logs.len() as f64;
    let mut apa = 0.0;
    let mut ds = 0.0;
    for l in logs {
        let c = l.completion_pct();
        apa += c;
        ds += c * infraction_penalty(&l.events, coefficients)?;
    }
    Ok((apa / n, ds / n))
}

/// Count columns: benchmark style (TL, CV, RD, OL, CL) and ablation style
/// (ABD, IRL, CWO, CWP, CWV). TL and IRL both count red-light violations,
/// CV and CWV both count vehicle collisions.
pub const COUNT_COLUMNS: [&str; 10] = ["TL", "CV", "RD", "OL", "CL", "ABD", "IRL", "CWO", "CWP", "CWV"];

pub fn column_kind(col: &str) -> Option<EventKind> {
    Some(match col {
        "TL" | "IRL" => EventKind::RedLightViolation,
        "CV" | "CWV" => EventKind::CollisionVehicle,
        "RD" => EventKind::RouteDeviation,
        "OL" => EventKind::OffLane,
        "CL" => EventKind::CollisionLayout,
        "ABD" => EventKind::AgentBlocked,
        "CWO" => EventKind::CollisionOther,
        "CWP" => EventKind::CollisionPedestrian,
        _ => return None,
    })
}

pub fn infraction_counts(logs: &[EpisodeLog]) -> BTreeMap<String, u64> {
    COUNT_COLUMNS
        .iter()
        .map(|&c| {
            let k = column_kind(c).expect("known column");
            (c.to_string(), logs.iter().flat_map(|l| &l.events).filter(|e| e.kind == k).count() as u64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Metrics of one seed's pass over the route suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub routes: usize,
    pub sr: f64,
    pub ssr: f64,
    pub apa: f64,
    pub ds: f64,
    /// Mean infraction penalty over routes.
    pub ip: f64,
    pub counts: BTreeMap<String, u64>,
}

pub fn seed_metrics(seed: u64, logs: &[EpisodeLog], coefficients: &BTreeMap<String, f64>) -> Result<SeedMetrics, MetricsError> {
    let (sr, ssr) = success_rate(logs)?;
    let (apa, ds) = driving_score(logs, coefficients)?;
    let mut ip = 0.0;
    for l in logs {
        ip += infraction_penalty(&l.events, coefficients)?;
    }
    Ok(SeedMetrics { seed, routes: logs.len(), sr, ssr, apa, ds, ip: ip / logs.len() as f64, counts: infraction_counts(logs) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub density: Density,
    pub seeds: Vec<SeedMetrics>,
    pub sr: MeanStd,
    pub ssr: MeanStd,
    pub apa: MeanStd,
    pub ds: MeanStd,
    pub ip: MeanStd,
    pub counts: BTreeMap<String, MeanStd>,
    /// Episodes left out of the means because the simulator aborted them.
    pub aborted: Vec<String>,
}

impl DensityReport {
    pub fn from_seeds(density: Density, seeds: Vec<SeedMetrics>, aborted: Vec<String>) -> DensityReport {
        let col = |f: &dyn Fn(&SeedMetrics) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
        let counts = COUNT_COLUMNS.iter().map(|&c| (c.to_string(), col(&|s| s.counts[c] as f64))).collect();
        DensityReport {
            density,
            sr: col(&|s| s.sr),
            ssr: col(&|s| s.ssr),
            apa: col(&|s| s.apa),
            ds: col(&|s| s.ds),
            ip: col(&|s| s.ip),
            counts,
            seeds,
            aborted,
        }
    }

    /// Red-light counts for the none/normal densities, vehicle collisions for crowded.
    pub fn density_column(&self) -> (&'static str, MeanStd) {
        let c = if self.density == Density::Crowded { "CV" } else { "TL" };
        (c, self.counts[c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub agent: String,
    pub config_hash: String,
    pub routes: usize,
    pub penalties: BTreeMap<String, f64>,
    pub densities: Vec<DensityReport>,
}

/// Scenario of route `i` in the evaluation suite.
pub fn suite_scenario(cfg: &RunConfig, density: Density, i: usize) -> ScenarioConfig {
    let e = &cfg.eval;
    let weather = e.weathers[i % e.weathers.len()];
    cfg.scenario(e.route_offset + i as u64, e.route_lanes, density, weather, Mode::Eval, 0)
}

/// World seed for route `i` under benchmark seed `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Reduces suite logs (tagged by the seed they ran under) to a report.
pub fn build_report(agent: &str, cfg: &RunConfig, logs: &[(u64, EpisodeLog)]) -> Result<MetricsReport, MetricsError> {
    let pen = &cfg.eval.penalties;
    let mut densities = Vec::new();
    for &density in &cfg.eval.densities {
        let mut seeds = Vec::new();
        let mut aborted = Vec::new();
        for &seed in &cfg.eval.seeds {
            let mine: Vec<EpisodeLog> = logs
                .iter()
                .filter(|(s, l)| *s == seed && l.density == density)
                .filter_map(|(_, l)| match &l.aborted {
                    Some(why) => {
                        aborted.push(format!("seed {seed} {}: {why}", l.scenario_id));
                        None
                    }
                    None => Some(l.clone()),
                })
                .collect();
            if !mine.is_empty() {
                seeds.push(seed_metrics(seed, &mine, pen)?);
            }
        }
        if seeds.is_empty() {
            return Err(MetricsError::Empty);
        }
        densities.push(DensityReport::from_seeds(density, seeds, aborted));
    }
    Ok(MetricsReport { agent: agent.into(), config_hash: cfg.hash(), routes: cfg.eval.routes, penalties: pen.clone(), densities })
}

/// Runs the suite and reports mean ± std across seeds.
pub fn benchmark(agent: &mut dyn Agent, cfg: &RunConfig) -> Result<(MetricsReport, Vec<EpisodeLog>), MetricsError> {
    let mut logs = Vec::new();
    for &density in &cfg.eval.densities {
        for &seed in &cfg.eval.seeds {
            for i in 0..cfg.eval.routes {
                logs.push((seed, run_route(agent, &suite_scenario(cfg, density, i), episode_seed(seed, i))));
            }
        }
    }
    let report = build_report(&agent.name(), cfg, &logs)?;
    Ok((report, logs.into_iter().map(|(_, l)| l).collect()))
}

fn pm(m: MeanStd) -> String {
    format!("{:.1} ± {:.1}", m.mean, m.std)
}

impl MetricsReport {
    /// Markdown with a per-density benchmark table and an ablation-style
    /// infraction table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# Benchmark: {}\n\n", self.agent));
        s.push_str(&format!("config hash `{}`, {} routes per density and seed\n\n", self.config_hash, self.routes));
        s.push_str("Penalty coefficients follow the driving-leaderboard convention; they are a configurable convention, not measured constants: ");
        let pens: Vec<String> = self.penalties.iter().filter(|(_, &c)| c < 1.0).map(|(k, c)| format!("{k} {c}")).collect();
        s.push_str(&pens.join(", "));
        s.push_str(".\n\n");
        s.push_str("| Density | SR (%) | SSR (%) | TL/CV | RD | OL | CL | APA (%) | DS (%) |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for d in &self.densities {
            let (name, v) = d.density_column();
            s.push_str(&format!(
                "| {} | {} | {} | {} {} | {} | {} | {} | {} | {} |\n",
                density_name(d.density),
                pm(d.sr),
                pm(d.ssr),
                name,
                pm(v),
                pm(d.counts["RD"]),
                pm(d.counts["OL"]),
                pm(d.counts["CL"]),
                pm(d.apa),
                pm(d.ds)
            ));
        }
        s.push_str("\n| Density | ABD | IRL | CWO | CWP | CWV | IP |\n|---|---|---|---|---|---|---|\n");
        for d in &self.densities {
            let c = |k: &str| pm(d.counts[k]);
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {:.3} ± {:.3} |\n",
                density_name(d.density),
                c("ABD"),
                c("IRL"),
                c("CWO"),
                c("CWP"),
                c("CWV"),
                d.ip.mean,
                d.ip.std
            ));
        }
        let notes: Vec<&String> = self.densities.iter().flat_map(|d| &d.aborted).collect();
        if !notes.is_empty() {
            s.push_str("\nAborted episodes (excluded from the means):\n\n");
            for n in notes {
                s.push_str(&format!("- {n}\n"));
            }
        }
        s
    }
}
