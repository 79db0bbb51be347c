#![allow(dead_code)]

use bid_core::{ModelConfig, RunConfig, Variant};
use bid_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Width-reduced model on 16×16 frames.
pub fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        widths: [4, 8, 8, 8],
        bottleneck_div: 4,
        recurrence: [2, 4, 2],
        filter_k: 3,
        dorsal_width: 4,
        d_model: 8,
        heads: 2,
        vpc_layers: 1,
        dpc_layers: 1,
        mpc_layers: 1,
        ff_mult: 2,
        cpc_hidden: 8,
        variant,
        extra_heads: Vec::new(),
    }
}

/// Small end-to-end run: 32×32 frames, a handful of short episodes.
pub fn tiny_run() -> RunConfig {
    let mut c = RunConfig::default();
    c.sim.render.width = 32;
    c.sim.render.height = 32;
    c.sim.render.px_per_m = 1.5;
    c.model = tiny_model(Variant::Bid);
    c.model.input_height = 32;
    c.model.input_width = 32;
    c.data.episodes = 2;
    c.data.held_out_episodes = 1;
    c.train.epochs = 1;
    c.train.batch_size = 16;
    c.train.max_updates = 3;
    c.eval.routes = 2;
    c.eval.route_lanes = 1;
    c.eval.densities = vec![laneworld::Density::None];
    c.eval.seeds = vec![0];
    c
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn one_hot_batch(cmds: &[laneworld::NavCommand]) -> Tensor<f64> {
    Tensor::new(vec![cmds.len(), 4], cmds.iter().flat_map(|c| c.one_hot()).collect()).unwrap()
}

/// Random frames and labels in the dataset layout, without running the simulator.
pub fn synthetic_dataset(train_eps: usize, held_eps: usize, ticks: usize, size: usize, seed: u64) -> bid_core::dataops::Dataset {
    use bid_core::dataops::*;
    use laneworld::{Density, NavCommand, Weather};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    for i in 0..train_eps + held_eps {
        let split = if i < train_eps { Split::Train } else { Split::HeldOut };
        let records: Vec<Record> = (0..ticks)
            .map(|t| Record {
                tick: t as u64,
                command: NavCommand::ALL[rng.random_range(0..4)],
                steer: rng.random_range(-1.0..1.0),
                accel: rng.random_range(-1.0..1.0),
                perturbed: false,
            })
            .collect();
        let frames = (0..ticks).map(|_| (0..size * size * 3).map(|_| rng.random::<u8>()).collect()).collect();
        let meta = EpisodeMeta {
            id: format!("ep_{i:03}"),
            split,
            route_id: i as u64,
            route_lanes: 1,
            weather: Weather::Clear,
            density: Density::None,
            jaywalkers: 0,
            seed: i as u64,
            ticks,
            flagged: false,
            partial: false,
            events: Vec::new(),
            files: Default::default(),
        };
        episodes.push(Episode { meta, records, frames });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        width: size,
        height: size,
        tick_hz: TICK_HZ,
        format: bid_core::config::FrameFormat::Png,
        seed,
        config_hash: String::new(),
        episodes: episodes.iter().map(|e| e.meta.clone()).collect(),
        dropped: Vec::new(),
    };
    Dataset { manifest, episodes }
}

/// Randomized but well-formed episode logs for metric checks.
pub fn synthetic_logs(n: usize, seed: u64) -> Vec<bid_core::evaluation::EpisodeLog> {
    use laneworld::{Density, DrivingEvent, EventKind, Weather};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infractions: Vec<EventKind> = EventKind::ALL.into_iter().filter(|k| k.is_infraction()).collect();
    (0..n)
        .map(|i| {
            let length = rng.random_range(50.0..400.0);
            let completed = rng.random_bool(0.6);
            let mut ticks: Vec<u64> = (0..rng.random_range(0..5)).map(|_| rng.random_range(1..500)).collect();
            ticks.sort();
            let mut events: Vec<DrivingEvent> = ticks
                .into_iter()
                .map(|tick| DrivingEvent { tick, kind: infractions[rng.random_range(0..infractions.len())], payload: serde_json::Value::Null })
                .collect();
            let distance = if completed { length } else { length * rng.random_range(0.0..1.0) };
            let last = events.last().map_or(0, |e| e.tick) + 1;
            let end = if completed { EventKind::RouteComplete } else { EventKind::Timeout };
            events.push(DrivingEvent { tick: last, kind: end, payload: serde_json::Value::Null });
            bid_core::evaluation::EpisodeLog {
                scenario_id: format!("synthetic/{i}"),
                route_id: i as u64,
                density: Density::None,
                weather: Weather::Clear,
                seed,
                events,
                route_length: length,
                distance_completed: distance,
                completed,
                ticks: last,
                aborted: None,
            }
        })
        .collect()
}

/// Straightforward recount of every metric from raw events.
pub mod oracle {
    use bid_core::evaluation::EpisodeLog;
    use std::collections::BTreeMap;

    pub fn sr_ssr(logs: &[EpisodeLog]) -> (f64, f64) {
        let mut done = 0usize;
        let mut strict = 0usize;
        for l in logs {
            let complete = l.events.iter().any(|e| e.kind.name() == "ROUTE_COMPLETE");
            let clean = l.events.iter().all(|e| e.kind.name() == "ROUTE_COMPLETE" || e.kind.name() == "TIMEOUT");
            if complete {
                done += 1;
                if clean {
                    strict += 1;
                }
            }
        }
        let n = logs.len() as f64;
        (100.0 * done as f64 / n, 100.0 * strict as f64 / n)
    }

    pub fn penalty(l: &EpisodeLog, coeff: &BTreeMap<String, f64>) -> f64 {
        let mut p = 1.0;
        for e in &l.events {
            p *= coeff[e.kind.name()];
        }
        p
    }

    pub fn completion(l: &EpisodeLog) -> f64 {
        100.0 * (l.distance_completed / l.route_length).clamp(0.0, 1.0)
    }

    pub fn apa_ds(logs: &[EpisodeLog], coeff: &BTreeMap<String, f64>) -> (f64, f64) {
        let (mut a, mut d) = (0.0, 0.0);
        for l in logs {
            a += completion(l);
            d += completion(l) * penalty(l, coeff);
        }
        (a / logs.len() as f64, d / logs.len() as f64)
    }

    pub fn count(logs: &[EpisodeLog], column: &str) -> u64 {
        let name = match column {
            "TL" | "IRL" => "RED_LIGHT_VIOLATION",
            "CV" | "CWV" => "COLLISION_VEHICLE",
            "RD" => "ROUTE_DEVIATION",
            "OL" => "OFF_LANE",
            "CL" => "COLLISION_LAYOUT",
            "ABD" => "AGENT_BLOCKED",
            "CWO" => "COLLISION_OTHER",
            "CWP" => "COLLISION_PEDESTRIAN",
            other => panic!("unknown column {other}"),
        };
        let mut n = 0;
        for l in logs {
            for e in &l.events {
                if e.kind.name() == name {
                    n += 1;
                }
            }
        }
        n
    }
}
