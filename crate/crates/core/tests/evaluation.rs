mod common;

use bid_core::config::default_penalties;
use bid_core::evaluation::*;
use bid_core::{BidModel, RunConfig, Variant};
use common::{oracle, synthetic_logs, tiny_model};
use laneworld::{Density, DrivingEvent, EventKind, Weather};
use proptest::prelude::*;

fn ev(kind: EventKind) -> DrivingEvent {
    DrivingEvent { tick: 1, kind, payload: serde_json::Value::Null }
}

fn log(completed: bool, pct: f64, events: Vec<DrivingEvent>) -> EpisodeLog {
    let mut events = events;
    events.push(ev(if completed { EventKind::RouteComplete } else { EventKind::Timeout }));
    EpisodeLog {
        scenario_id: "t".into(),
        route_id: 0,
        density: Density::None,
        weather: Weather::Clear,
        seed: 0,
        events,
        route_length: 100.0,
        distance_completed: pct,
        completed,
        ticks: 10,
        aborted: None,
    }
}

#[test]
fn eight_of_ten_with_six_clean() {
    let mut logs = Vec::new();
    for i in 0..10 {
        let extra = if (6..8).contains(&i) { vec![ev(EventKind::OffLane)] } else { vec![] };
        logs.push(log(i < 8, if i < 8 { 100.0 } else { 40.0 }, extra));
    }
    assert_eq!(success_rate(&logs).unwrap(), (80.0, 60.0));
}

#[test]
fn all_clean_runs_score_100() {
    let logs: Vec<_> = (0..4).map(|_| log(true, 100.0, vec![])).collect();
    assert_eq!(success_rate(&logs).unwrap(), (100.0, 100.0));
    assert_eq!(driving_score(&logs, &default_penalties()).unwrap(), (100.0, 100.0));
}

#[test]
fn empty_logs_are_an_error() {
    assert_eq!(success_rate(&[]), Err(MetricsError::Empty));
    assert_eq!(driving_score(&[], &default_penalties()), Err(MetricsError::Empty));
}

#[test]
fn penalty_examples() {
    let p = default_penalties();
    assert_eq!(infraction_penalty(&[], &p).unwrap(), 1.0);
    let two = [ev(EventKind::RedLightViolation), ev(EventKind::RedLightViolation)];
    assert_eq!(infraction_penalty(&two, &p).unwrap(), 0.7 * 0.7);
    let mut missing = p.clone();
    missing.remove("OFF_LANE");
    assert_eq!(infraction_penalty(&[ev(EventKind::OffLane)], &missing), Err(MetricsError::UnknownKind("OFF_LANE".into())));
}

#[test]
fn half_route_at_half_penalty_scores_25() {
    let mut p = default_penalties();
    p.insert("COLLISION_PEDESTRIAN".into(), 0.5);
    let l = log(false, 50.0, vec![ev(EventKind::CollisionPedestrian)]);
    assert_eq!(driving_score(&[l], &p).unwrap(), (50.0, 25.0));
}

#[test]
fn counts_follow_the_column_map() {
    let logs = vec![log(true, 100.0, vec![ev(EventKind::RedLightViolation), ev(EventKind::CollisionVehicle)]), log(false, 10.0, vec![ev(EventKind::AgentBlocked)])];
    let c = infraction_counts(&logs);
    assert_eq!((c["TL"], c["IRL"], c["CV"], c["CWV"], c["ABD"], c["OL"]), (1, 1, 1, 1, 1, 0));
    assert_eq!(c.len(), COUNT_COLUMNS.len());
}

#[test]
fn one_seed_has_zero_std() {
    let cfg = RunConfig { eval: bid_core::config::EvalConfig { seeds: vec![4], densities: vec![Density::None], ..Default::default() }, ..Default::default() };
    let logs: Vec<_> = synthetic_logs(5, 1).into_iter().map(|l| (4, l)).collect();
    let r = build_report("x", &cfg, &logs).unwrap();
    let d = &r.densities[0];
    assert_eq!((d.sr.std, d.ds.std, d.apa.std), (0.0, 0.0, 0.0));
}

#[test]
fn report_matches_oracle_across_seeds() {
    let cfg = RunConfig::default();
    let mut logs = Vec::new();
    for &density in &cfg.eval.densities {
        for &seed in &cfg.eval.seeds {
            for mut l in synthetic_logs(6, seed * 10 + density as u64) {
                l.density = density;
                logs.push((seed, l));
            }
        }
    }
    let r = build_report("x", &cfg, &logs).unwrap();
    let pen = default_penalties();
    for d in &r.densities {
        let per_seed: Vec<Vec<EpisodeLog>> = cfg.eval.seeds.iter().map(|&s| logs.iter().filter(|(ls, l)| *ls == s && l.density == d.density).map(|(_, l)| l.clone()).collect()).collect();
        let srs: Vec<f64> = per_seed.iter().map(|l| oracle::sr_ssr(l).0).collect();
        let dss: Vec<f64> = per_seed.iter().map(|l| oracle::apa_ds(l, &pen).1).collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let std = |xs: &[f64]| (xs.iter().map(|x| (x - mean(xs)).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert_eq!(d.sr.mean, mean(&srs));
        assert_eq!(d.sr.std, std(&srs));
        assert_eq!(d.ds.mean, mean(&dss));
        for c in COUNT_COLUMNS {
            let cs: Vec<f64> = per_seed.iter().map(|l| oracle::count(l, c) as f64).collect();
            assert_eq!(d.counts[c].mean, mean(&cs), "{c}");
        }
    }
    let md = r.to_markdown();
    assert!(md.contains("| none |") && md.contains("| crowded |"));
    assert!(md.contains("TL ") && md.contains("CV "));
}

#[test]
fn density_column_rule() {
    let s = seed_metrics(0, &synthetic_logs(3, 2), &default_penalties()).unwrap();
    for (d, want) in [(Density::None, "TL"), (Density::Normal, "TL"), (Density::Crowded, "CV")] {
        assert_eq!(DensityReport::from_seeds(d, vec![s.clone()], vec![]).density_column().0, want);
    }
}

#[test]
fn aborted_logs_are_excluded_and_noted() {
    let cfg = RunConfig { eval: bid_core::config::EvalConfig { seeds: vec![0], densities: vec![Density::None], ..Default::default() }, ..Default::default() };
    let mut logs: Vec<_> = synthetic_logs(3, 5).into_iter().map(|l| (0, l)).collect();
    let mut bad = logs[0].1.clone();
    bad.aborted = Some("boom".into());
    bad.completed = false;
    logs.push((0, bad));
    let r = build_report("x", &cfg, &logs).unwrap();
    assert_eq!(r.densities[0].seeds[0].routes, 3);
    assert_eq!(r.densities[0].aborted.len(), 1);
    assert!(r.to_markdown().contains("Aborted episodes"));
}

#[test]
fn expert_completes_clean_routes() {
    let mut cfg = RunConfig::default();
    cfg.sim.render.width = 16;
    cfg.sim.render.height = 16;
    cfg.eval.route_lanes = 2;
    let mut agent = ExpertAgent::default();
    for i in 0..3 {
        let l = run_route(&mut agent, &suite_scenario(&cfg, Density::None, i), episode_seed(0, i));
        assert!(l.completed && l.infractions().next().is_none(), "{:?}", l.events);
        assert!(l.distance_completed <= l.route_length);
        assert_eq!(l.completion_pct(), 100.0);
    }
}

#[test]
fn untrained_agent_terminates_with_well_formed_logs() {
    let mut cfg = RunConfig::default();
    cfg.model = tiny_model(Variant::Bid);
    cfg.sim.render.width = 16;
    cfg.sim.render.height = 16;
    cfg.sim.blocked_s = 3.0;
    cfg.eval.route_lanes = 1;
    let model = BidModel::new(cfg.model.clone()).unwrap();
    let mut agent = ModelAgent::new(model.clone(), model.init(0));
    let sc = suite_scenario(&cfg, Density::None, 0);
    let a = run_route(&mut agent, &sc, 7);
    let b = run_route(&mut agent, &sc, 7);
    assert_eq!(a, b);
    assert!(a.aborted.is_none());
    assert!(a.distance_completed <= a.route_length);
    assert_eq!(a.completed, a.events.iter().any(|e| e.kind == EventKind::RouteComplete));
    assert!(a.events.windows(2).all(|w| w[0].tick <= w[1].tick));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_equal_naive_recount(n in 1usize..30, seed in 0u64..100_000) {
        let logs = synthetic_logs(n, seed);
        let pen = default_penalties();
        prop_assert_eq!(success_rate(&logs).unwrap(), oracle::sr_ssr(&logs));
        prop_assert_eq!(driving_score(&logs, &pen).unwrap(), oracle::apa_ds(&logs, &pen));
        let counts = infraction_counts(&logs);
        for c in COUNT_COLUMNS {
            prop_assert_eq!(counts[c], oracle::count(&logs, c));
        }
        for l in &logs {
            prop_assert_eq!(infraction_penalty(&l.events, &pen).unwrap(), oracle::penalty(l, &pen));
        }
    }

    #[test]
    fn ordering_invariants(n in 1usize..30, seed in 0u64..100_000) {
        let logs = synthetic_logs(n, seed);
        let (sr, ssr) = success_rate(&logs).unwrap();
        let (apa, ds) = driving_score(&logs, &default_penalties()).unwrap();
        prop_assert!(ssr <= sr);
        prop_assert!(0.0 <= ds && ds <= apa && apa <= 100.0);
    }

    #[test]
    fn penalty_is_multiplicative_over_splits(seed in 0u64..100_000, mask in any::<u64>()) {
        let logs = synthetic_logs(4, seed);
        let events: Vec<DrivingEvent> = logs.iter().flat_map(|l| l.events.clone()).collect();
        let (a, b): (Vec<_>, Vec<_>) = events.iter().cloned().enumerate().partition(|(i, _)| mask >> (i % 64) & 1 == 1);
        let a: Vec<_> = a.into_iter().map(|(_, e)| e).collect();
        let b: Vec<_> = b.into_iter().map(|(_, e)| e).collect();
        let pen = default_penalties();
        let whole: Vec<_> = a.iter().chain(&b).cloned().collect();
        let lhs = infraction_penalty(&whole, &pen).unwrap();
        let rhs = infraction_penalty(&a, &pen).unwrap() * infraction_penalty(&b, &pen).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-15);
    }

    #[test]
    fn reduction_is_order_independent(seed in 0u64..10_000) {
        let logs = synthetic_logs(8, seed);
        let mut rev = logs.clone();
        rev.reverse();
        let pen = default_penalties();
        prop_assert_eq!(success_rate(&logs).unwrap(), success_rate(&rev).unwrap());
        let (a, b) = (driving_score(&logs, &pen).unwrap(), driving_score(&rev, &pen).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        prop_assert_eq!(infraction_counts(&logs), infraction_counts(&rev));
    }
}
