mod common;

use std::collections::BTreeSet;

use bid_core::config::FrameFormat;
use bid_core::dataops::*;
use bid_core::RunConfig;
use bid_tensor::checkpoint::hex_digest;
use common::synthetic_dataset;
use laneworld::EventKind;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_collect(episodes: usize, held: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.sim.render.width = 16;
    c.sim.render.height = 16;
    c.model.input_width = 16;
    c.model.input_height = 16;
    c.data.episodes = episodes;
    c.data.held_out_episodes = held;
    c.data.route_lanes = 1;
    c
}

#[test]
fn one_clean_episode_completes() {
    let ds = collect_episodes(&small_collect(1, 0), 3).unwrap();
    assert_eq!(ds.episodes.len(), 1);
    let e = &ds.episodes[0];
    assert!(e.meta.events.iter().any(|ev| ev.kind == EventKind::RouteComplete));
    assert!(!e.meta.flagged && !e.meta.partial);
    assert_eq!(e.records.len(), e.frames.len());
    assert!(e.records.windows(2).all(|w| w[0].tick < w[1].tick));
    assert!(e.records.iter().all(|r| r.steer.abs() <= 1.0 && r.accel.abs() <= 1.0));
    assert_eq!(ds.manifest.tick_hz, 10);
}

#[test]
fn twenty_episodes_at_no_density_are_never_flagged() {
    let ds = collect_episodes(&small_collect(20, 0), 1).unwrap();
    assert_eq!(ds.episodes.len(), 20);
    assert!(ds.manifest.dropped.is_empty(), "{:?}", ds.manifest.dropped);
    assert!(ds.episodes.iter().all(|e| !e.meta.flagged));
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let cfg = small_collect(2, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(&collect_episodes(&cfg, 9).unwrap(), a.path()).unwrap();
    let mb = write_dataset(&collect_episodes(&cfg, 9).unwrap(), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(std::fs::read(a.path().join("manifest.json")).unwrap(), std::fs::read(b.path().join("manifest.json")).unwrap());
}

#[test]
fn splits_use_disjoint_routes_and_their_weathers() {
    let cfg = small_collect(3, 2);
    let ds = collect_episodes(&cfg, 4).unwrap();
    ds.check_no_leakage().unwrap();
    let train: BTreeSet<_> = ds.episodes.iter().filter(|e| e.meta.split == Split::Train).map(|e| e.meta.route_id).collect();
    let held: BTreeSet<_> = ds.episodes.iter().filter(|e| e.meta.split == Split::HeldOut).map(|e| e.meta.route_id).collect();
    assert_eq!((train.len(), held.len()), (3, 2));
    assert!(train.is_disjoint(&held));
    for e in &ds.episodes {
        let pool = if e.meta.split == Split::Train { &cfg.data.weathers } else { &cfg.data.held_out_weathers };
        assert!(pool.contains(&e.meta.weather));
    }
}

#[test]
fn png_round_trip_preserves_everything() {
    let ds = synthetic_dataset(2, 1, 5, 8, 1);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.episodes.len(), 3);
    for (a, b) in ds.episodes.iter().zip(&back.episodes) {
        assert_eq!(a.records, b.records);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.meta.split, b.meta.split);
    }
    assert!(dir.path().join("ep_000/frames/000004.png").exists());
    assert!(dir.path().join("ep_000/actions.log").exists());
}

#[test]
fn raw_round_trip() {
    let mut ds = synthetic_dataset(1, 0, 3, 8, 2);
    ds.manifest.format = FrameFormat::Raw;
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.episodes[0].frames, ds.episodes[0].frames);
    assert_eq!(std::fs::metadata(dir.path().join("ep_000/frames.raw")).unwrap().len(), 3 * 8 * 8 * 3);
}

#[test]
fn truncated_frame_is_reported_by_name() {
    let ds = synthetic_dataset(1, 0, 3, 8, 3);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let f = dir.path().join("ep_000/frames/000001.png");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DataError::Corrupt { file, .. } if file == "ep_000/frames/000001.png"), "{err}");
}

#[test]
fn missing_file_is_io_error() {
    let ds = synthetic_dataset(1, 0, 2, 8, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("ep_000/actions.log")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(DataError::Io { .. })));
}

#[test]
fn out_of_range_action_is_rejected_even_with_matching_hash() {
    let ds = synthetic_dataset(1, 0, 2, 8, 5);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let log = dir.path().join("ep_000/actions.log");
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[1]["accel"] = serde_json::json!(1.5);
    let new: String = lines.iter().map(|v| v.to_string() + "\n").collect();
    std::fs::write(&log, &new).unwrap();
    let mpath = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    m["episodes"][0]["files"]["ep_000/actions.log"] = serde_json::json!(hex_digest(new.as_bytes()));
    std::fs::write(&mpath, m.to_string()).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
}

#[test]
fn leakage_is_detected() {
    let mut ds = synthetic_dataset(1, 1, 2, 8, 6);
    ds.episodes[1].meta.route_id = ds.episodes[0].meta.route_id;
    assert!(ds.check_no_leakage().is_err());
}

#[test]
fn first_tick_is_its_own_predecessor() {
    let ds = synthetic_dataset(1, 0, 3, 8, 7);
    let (f, p) = ds.frame_pair((0, 0));
    assert_eq!(f, p);
    let (f1, p1) = ds.frame_pair((0, 2));
    assert_eq!(p1, &ds.episodes[0].frames[1][..]);
    assert_eq!(f1, &ds.episodes[0].frames[2][..]);
    let b = make_batch(&ds, &[(0, 0)], None);
    assert_eq!(b.frames.data(), b.prev.data());
}

#[test]
fn batch_tensors_match_records() {
    let ds = synthetic_dataset(1, 0, 4, 8, 8);
    let b = make_batch(&ds, &[(0, 3), (0, 1)], None);
    assert_eq!(b.frames.shape(), &[2, 3, 8, 8]);
    let r = &ds.episodes[0].records[3];
    assert_eq!(b.targets.data()[0], r.steer as f32);
    assert_eq!(b.targets.data()[1], r.accel as f32);
    assert_eq!(b.commands.data()[r.command.index()], 1.0);
    assert_eq!(b.commands.data()[..4].iter().sum::<f32>(), 1.0);
    let px = ds.episodes[0].frames[3][3 * 5 + 1];
    assert_eq!(b.frames.data()[64 + 5], px as f32 / 255.0);
}

#[test]
fn held_out_records_never_sampled_for_training() {
    let ds = synthetic_dataset(2, 2, 5, 8, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for keys in EpochSampler::new(&ds, Split::Train, 3, &mut rng).unwrap() {
        assert!(keys.iter().all(|k| ds.episodes[k.0].meta.split == Split::Train));
    }
    for _ in 0..20 {
        let b = sample_batch(&ds, 4, &mut rng).unwrap();
        assert!(b.keys.iter().all(|k| ds.episodes[k.0].meta.split == Split::Train));
    }
}

#[test]
fn sampler_errors() {
    let ds = synthetic_dataset(0, 1, 3, 8, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(EpochSampler::new(&ds, Split::Train, 2, &mut rng), Err(DataError::Empty)));
    assert!(matches!(sample_batch(&ds, 1, &mut rng), Err(DataError::Empty)));
    let ds = synthetic_dataset(1, 0, 3, 8, 10);
    assert!(sample_batch(&ds, 4, &mut rng).is_err());
    assert!(EpochSampler::new(&ds, Split::Train, 0, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epoch_covers_every_record_once(eps in 1usize..4, ticks in 1usize..9, batch in 1usize..7, seed in 0u64..1000) {
        let ds = synthetic_dataset(eps, 1, ticks, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = EpochSampler::new(&ds, Split::Train, batch, &mut rng).unwrap();
        prop_assert_eq!(s.num_batches(), (eps * ticks).div_ceil(batch));
        let mut all: Vec<_> = s.flatten().collect();
        all.sort();
        prop_assert_eq!(all, ds.keys(Split::Train));
    }

    #[test]
    fn same_seed_same_order(seed in 0u64..1000) {
        let ds = synthetic_dataset(2, 0, 6, 2, 0);
        let order = |s| EpochSampler::new(&ds, Split::Train, 4, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().collect::<Vec<_>>();
        prop_assert_eq!(order(seed), order(seed));
    }
}
