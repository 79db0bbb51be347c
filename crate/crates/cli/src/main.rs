//! `bid`: collect demonstrations, train, benchmark, explain and report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use bid_core::explain::Target;
use bid_core::pipeline::{self, PipelineError};
use bid_core::{load_config, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bid", version, about = "Brain-inspired driving agent on the lane world")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory shared by all stages.
    #[arg(long, global = true, env = "BID_OUT_DIR", default_value = "bid-run")]
    out: PathBuf,
    /// Config override `section.key=value`, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record expert demonstrations into <out>/collect.
    Collect,
    /// Train on the collected dataset into <out>/train.
    Train,
    /// Benchmark the trained checkpoint (or the expert) into <out>/eval.
    Eval {
        /// Benchmark the scripted expert instead of the checkpoint.
        #[arg(long)]
        expert: bool,
    },
    /// Grad-CAM overlay for one dataset tick into <out>/explain.
    Explain {
        /// Checkpoint to explain; defaults to <out>/train/checkpoint.bidckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episode: String,
        #[arg(long)]
        tick: u64,
        #[arg(long, value_parser = ["steer", "accel"])]
        target: String,
    },
    /// Render the evaluation tables and training curve into <out>/report.
    Report,
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Collect => {
            let m = pipeline::run_collect(&cfg, out)?;
            eprintln!("collected dataset into {} (config {})", pipeline::stage_dir(out, "collect").display(), &m.config_hash[..12]);
        }
        Command::Train => {
            pipeline::run_train(&cfg, out, &mut |r| {
                let held = match (r.heldout_mae_steer, r.heldout_mae_accel) {
                    (Some(s), Some(a)) => format!(" held-out MAE steer {s:.4} accel {a:.4}"),
                    _ => String::new(),
                };
                eprintln!("epoch {:>3} lr {:.2e} loss {:.4}{held}", r.epoch + 1, r.lr, r.train_loss);
            })?;
            eprintln!("checkpoint written to {}", pipeline::checkpoint_path(out).display());
        }
        Command::Eval { expert } => {
            let (_, report) = pipeline::run_eval(&cfg, out, *expert)?;
            println!("{}", report.to_markdown());
        }
        Command::Explain { checkpoint, episode, tick, target } => {
            let target = Target::parse(target).expect("clap restricts the target");
            pipeline::run_explain(&cfg, out, checkpoint.as_deref(), episode, *tick, target)?;
            eprintln!("overlay written to {}", pipeline::stage_dir(out, "explain").display());
        }
        Command::Report => {
            pipeline::run_report(&cfg, out)?;
            let path = pipeline::stage_dir(out, "report").join("report.md");
            println!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
