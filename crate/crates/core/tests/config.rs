use bid_core::config::{CamLayer, ConfigError};
use bid_core::{load_config, RunConfig};

#[test]
fn empty_file_gives_full_size_defaults() {
    let c = RunConfig::from_toml_str("", &[]).unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.train.lr, 2e-4);
    assert_eq!(c.train.weight_decay, 0.02);
    assert_eq!(c.train.milestones, vec![25, 45, 70]);
    assert_eq!(c.train.epochs, 100);
    assert_eq!((c.loss.lambda_s, c.loss.lambda_a), (0.5, 0.5));
    assert_eq!(c.model.recurrence[1], 4);
    assert_eq!(c.model.heads, 4);
    assert!(c.model.extra_heads.is_empty());
}

#[test]
fn override_sets_learning_rate() {
    let c = RunConfig::from_toml_str("", &["train.lr=1e-3".into()]).unwrap();
    assert_eq!(c.train.lr, 1e-3);
    let c = RunConfig::from_toml_str("", &["explain.layer=mt".into(), "seed=9".into()]).unwrap();
    assert_eq!((c.explain.layer, c.seed), (CamLayer::Mt, 9));
}

#[test]
fn misspelled_key_names_the_path_and_a_suggestion() {
    let e = RunConfig::from_toml_str("[train]\nlearning_rat = 0.1\n", &[]).unwrap_err();
    assert!(matches!(&e, ConfigError::UnknownKey { path, .. } if path == "train.learning_rat"), "{e}");
    let e = RunConfig::from_toml_str("[train]\nepochz = 3\n", &[]).unwrap_err();
    assert_eq!(e, ConfigError::UnknownKey { path: "train.epochz".into(), suggestion: Some("train.epochs".into()) });
    assert!(e.to_string().contains("did you mean `train.epochs`"));
}

#[test]
fn type_mismatch_is_reported() {
    let e = RunConfig::from_toml_str("[train]\nepochs = \"many\"\n", &[]).unwrap_err();
    assert!(matches!(&e, ConfigError::TypeMismatch { path, .. } if path == "train.epochs"), "{e}");
}

#[test]
fn bad_override_and_invalid_values() {
    assert!(matches!(RunConfig::from_toml_str("", &["train.lr".into()]), Err(ConfigError::BadOverride(_))));
    assert!(matches!(RunConfig::from_toml_str("", &["loss.lambda_s=-1".into()]), Err(ConfigError::Invalid(_))));
    assert!(matches!(RunConfig::from_toml_str("", &["data.brake_ticks=[9,3]".into()]), Err(ConfigError::Invalid(_))));
}

#[test]
fn file_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 3\n[train]\nbatch_size = 8\n").unwrap();
    let c = load_config(Some(&path), &["train.batch_size=4".into()]).unwrap();
    assert_eq!((c.seed, c.train.batch_size), (3, 4));
    std::fs::write(&path, c.to_toml()).unwrap();
    assert_eq!(load_config(Some(&path), &[]).unwrap().hash(), c.hash());
    assert!(matches!(load_config(Some(&dir.path().join("none.toml")), &[]), Err(ConfigError::Io { .. })));
}
