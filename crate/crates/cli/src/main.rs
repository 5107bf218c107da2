use std::path::PathBuf;
use std::process::ExitCode;

use afford_cli::config::{load_config, ConfigError, RunConfig};
use afford_cli::{run, Command};
use clap::Parser;

#[derive(Parser)]
#[command(name = "afford", about = "Dataset building, training, distillation and evaluation")]
struct Args {
    /// build-data, train-teacher, train-student, distill, eval,
    /// sweep-threshold, sweep-k, eliminate or gradcheck
    command: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Load checkpoints whose config hash differs.
    #[arg(long)]
    force: bool,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn resolve(args: &Args) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| ConfigError {
            key: s.clone(),
            message: "expected key=value".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let Some(cmd) = Command::parse(&args.command) else {
        eprintln!("error: unknown command `{}`", args.command);
        return ExitCode::from(2);
    };
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cmd, &cfg, args.force) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("run_dir={}", outcome.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
