use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepfrc_cli::{
    cmd_align, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, cmd_tune, load_checkpoint, load_grid, CliError, DataSource,
    Result, RunConfig,
};

#[derive(Parser)]
#[command(name = "deepfrc", version, about = "Joint curve registration and classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data directory written by `gen`, or a dataset sidecar / CSV file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate, export or resume from.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Gen,
    /// Train a model.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        /// Split to evaluate (default: test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Export learned warps and aligned curves.
    Align {
        #[arg(long)]
        split: Option<String>,
        /// Re-check every exported warp.
        #[arg(long)]
        validate: bool,
    },
    /// Compare gradients with finite differences on a micro problem.
    Gradcheck,
    /// Select loss weights and learning rates on a held-out fifth.
    Tune {
        /// JSON array of candidates.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let p = &mut cfg.paths;
    p.data = common.data.clone().or(p.data.take());
    p.out = common.out.clone().or(p.out.take());
    p.ckpt = common.ckpt.clone().or(p.ckpt.take());
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable output"));
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    if let Command::Tune { grid: Some(g) } = &cli.command {
        cfg.paths.grid = Some(g.clone());
    }
    eprintln!("resolved config: {}", cfg.to_json());
    match cli.command {
        Command::Gen => {
            let out = required(&cfg.paths.out, "out")?;
            for f in cmd_gen(&cfg, out)? {
                println!("{}", f.display());
            }
        }
        Command::Train => {
            let source = DataSource::open(required(&cfg.paths.data, "data")?)?;
            let res = cmd_train(&cfg, &source, cfg.paths.out.as_deref(), cfg.paths.ckpt.as_deref())?;
            if let Some(last) = res.trainer.history.last() {
                print_json(last);
            }
            if let Some(path) = res.checkpoint {
                eprintln!("checkpoint: {}", path.display());
            }
        }
        Command::Eval { split } => {
            let ckpt = load_checkpoint(required(&cfg.paths.ckpt, "ckpt")?)?;
            eprintln!(
                "checkpoint config: {}",
                serde_json::to_string(&ckpt.config).expect("config")
            );
            let source = DataSource::open(required(&cfg.paths.data, "data")?)?;
            print_json(&cmd_eval(&ckpt, &source, split.as_deref(), cfg.paths.out.as_deref())?);
        }
        Command::Align { split, validate } => {
            let ckpt = load_checkpoint(required(&cfg.paths.ckpt, "ckpt")?)?;
            eprintln!(
                "checkpoint config: {}",
                serde_json::to_string(&ckpt.config).expect("config")
            );
            let source = DataSource::open(required(&cfg.paths.data, "data")?)?;
            let out = required(&cfg.paths.out, "out")?;
            let res = cmd_align(&ckpt, &source, split.as_deref(), out, validate)?;
            println!("{}\n{}", res.warps.display(), res.aligned.display());
            if let Some(bad) = res.invalid_rows {
                if !bad.is_empty() {
                    return Err(CliError::Numerical(format!(
                        "{} warps fail validation: rows {bad:?}",
                        bad.len()
                    )));
                }
                eprintln!("all warps valid");
            }
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck(&cfg)?;
            print_json(&serde_json::json!({
                "seed": report.seed,
                "registration": report.registration,
                "classification": report.classification,
                "tolerance": report.tolerance,
                "passed": report.passed,
                "seconds": report.seconds,
            }));
            if let Some(dir) = &cfg.paths.out {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Data(e.to_string()))?;
                let text = serde_json::to_string_pretty(&report).expect("report");
                std::fs::write(dir.join("gradcheck.json"), text).map_err(|e| CliError::Data(e.to_string()))?;
            }
            if !report.passed {
                return Err(CliError::Numerical("gradient check exceeded tolerance".into()));
            }
        }
        Command::Tune { .. } => {
            let grid = match &cfg.paths.grid {
                Some(path) => load_grid(path)?,
                None if !cfg.tune_grid.is_empty() => cfg.tune_grid.clone(),
                None => cfg.default_grid(),
            };
            let source = DataSource::open(required(&cfg.paths.data, "data")?)?;
            print_json(&cmd_tune(&cfg, &source, &grid, cfg.paths.out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
