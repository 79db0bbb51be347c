use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[sim.render]
width = 32
height = 32
px_per_m = 1.5

[model]
input_height = 32
input_width = 32
widths = [4, 8, 8, 8]
dorsal_width = 4
d_model = 8
heads = 2
mpc_layers = 1
cpc_hidden = 8

[data]
episodes = 2
held_out_episodes = 1

[train]
epochs = 1
batch_size = 16
max_updates = 3

[eval]
routes = 1
route_lanes = 1
densities = ["none"]
seeds = [0]
"#;

fn bid(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bid")).arg("--out").arg(out).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_without_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = bid(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("run `bid collect` first"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = bid(dir.path(), &["--set", "train.epochz=3", "collect"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("did you mean `train.epochs`"), "{}", stderr(&o));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr = \"fast\"\n").unwrap();
    let o = bid(dir.path(), &["--config", cfg.to_str().unwrap(), "collect"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bid(dir.path(), &["explain", "--episode", "x", "--tick", "1", "--target", "brake"]).status.code(), Some(1));
    assert_eq!(bid(dir.path(), &["fly"]).status.code(), Some(1));
    assert_eq!(bid(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["--config", c, "collect"],
        vec!["--config", c, "train"],
        vec!["--config", c, "eval"],
        vec!["--config", c, "explain", "--episode", "train_000000", "--tick", "2", "--target", "steer"],
        vec!["--config", c, "report"],
    ] {
        let o = bid(&out, &args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    for f in ["collect/stage.json", "train/checkpoint.bidckpt", "eval/report.json", "report/report.md", "report/training_curve.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(out.join("report/report.md")).unwrap();
    assert!(report.contains("| none |"), "{report}");
    let o = bid(&out, &["--config", c, "eval", "--expert"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("100.0"));
}
