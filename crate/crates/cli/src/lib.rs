//! Subcommand implementations for the `deepfrc` binary: synthetic data
//! generation, training, evaluation, alignment export, gradient checking and
//! hyperparameter search.

pub mod config;
pub mod data;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deepfrc_core::metrics::{self, MetricsReport};
use deepfrc_core::model::ParamCheck;
use deepfrc_core::params::Group;
use deepfrc_core::srvf::class_means;
use deepfrc_core::synthgen::{generate, SynthConfig};
use deepfrc_core::trainer::{self, Candidate, TrainIo, TuneResult, Validation};
use deepfrc_core::{Checkpoint, Model, ModelSpec, Standardizer, Trainer, WarpFunction};
use serde::{Deserialize, Serialize};

pub use config::{GradcheckConfig, Paths, RunConfig};
pub use data::{DataSource, SplitData};
pub use error::{CliError, Result};

use error::io_error;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Generates the synthetic benchmark into `out`.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.synth.validate()?;
    let g = generate(&config.synth)?;
    data::write_generated(&config.synth, &g, out)
}

/// Outcome of `train`.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

/// Trains on the training split, monitoring the validation split when
/// present. With `resume`, continues from that checkpoint up to the
/// configured epoch count.
pub fn cmd_train(
    config: &RunConfig,
    source: &DataSource,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut train_cfg = config.train.clone();
    let train = source.load_train()?;
    let points = train.dataset.common_grid()?.len();
    if train_cfg.basis_k > data::basis_limit(points) {
        eprintln!(
            "note: basis size {} reduced to {} for {points} grid points",
            train_cfg.basis_k,
            data::basis_limit(points)
        );
        train_cfg.basis_k = data::basis_limit(points);
    }
    let train_set = data::complete(train.dataset, train_cfg.basis_k)?;
    let val = if source.has("val") && train.name != "all" {
        Some(source.load("val")?)
    } else {
        None
    };

    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            t.config.epochs = train_cfg.epochs;
            t
        }
        None => {
            train_cfg.validate()?;
            let grid = train_set.common_grid()?;
            let spec = ModelSpec::new(
                train_set.channels(),
                grid.len(),
                train_set.num_classes(),
                train_cfg.basis_k,
            );
            let model = Model::new(spec, &grid, Standardizer::fit(&train_set)?, train_cfg.seed)?;
            Trainer::new(train_cfg.clone(), model)?
        }
    };
    let basis_k = trainer.model.spec.basis_k;
    let prepared = trainer.model.prepare(&train_set)?;
    let val_parts = match &val {
        Some(v) => {
            let ds = data::complete(v.dataset.clone(), basis_k)?;
            Some((trainer.model.prepare(&ds)?, v.reference(basis_k)?))
        }
        None => None,
    };
    let validation = val_parts.as_ref().map(|(data, reference)| Validation {
        data,
        reference: reference.as_ref(),
    });
    let io = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            TrainIo {
                checkpoint: Some(dir.join(CHECKPOINT_FILE)),
                history: Some(dir.join(HISTORY_FILE)),
            }
        }
        None => TrainIo::default(),
    };
    trainer.run(&prepared, validation.as_ref(), &io)?;
    if let Some(path) = &io.checkpoint {
        trainer.checkpoint().save(path)?;
    }
    if let Some(path) = &io.history {
        trainer::write_history(&trainer.history, path)?;
    }
    Ok(TrainOutcome {
        trainer,
        checkpoint: io.checkpoint,
        history: io.history,
    })
}

/// Evaluation output written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub seed: u64,
    pub split: String,
    pub epoch: usize,
    pub metrics: MetricsReport,
}

/// Evaluates a checkpoint on one split.
pub fn cmd_eval(ckpt: &Checkpoint, source: &DataSource, split: Option<&str>, out: Option<&Path>) -> Result<EvalOutput> {
    let model = &ckpt.model;
    let part = source.load_eval(split)?;
    let reference = part.reference(model.spec.basis_k)?;
    let ds = data::complete(part.dataset, model.spec.basis_k)?;
    let prepared = model.prepare(&ds)?;
    let inf = model.infer_all(&prepared)?;
    let idx: Vec<usize> = (0..prepared.len()).collect();
    let report = metrics::report(model, &prepared, &idx, &inf, reference.as_ref())?;
    let result = EvalOutput {
        seed: ckpt.config.seed,
        split: part.name,
        epoch: ckpt.epoch,
        metrics: report,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("metrics.json"), &result)?;
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        let mut header = vec!["seed", "split", "epoch"];
        header.extend(MetricsReport::CSV_HEADER);
        w.write_record(&header).map_err(|e| io_error(&path, e))?;
        let mut row = vec![result.seed.to_string(), result.split.clone(), result.epoch.to_string()];
        row.extend(result.metrics.csv_row());
        w.write_record(&row).map_err(|e| io_error(&path, e))?;
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    Ok(result)
}

/// Files written by `align`.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub warps: PathBuf,
    pub aligned: PathBuf,
    /// Rows that failed the warp check; `None` when not validated.
    pub invalid_rows: Option<Vec<usize>>,
}

/// Exports the learned warps and aligned curves of one split as CSV. With
/// `validate`, the written warps are read back and re-checked.
pub fn cmd_align(
    ckpt: &Checkpoint,
    source: &DataSource,
    split: Option<&str>,
    out: &Path,
    validate: bool,
) -> Result<AlignOutput> {
    let model = &ckpt.model;
    let part = source.load_eval(split)?;
    let ds = data::complete(part.dataset, model.spec.basis_k)?;
    let prepared = model.prepare(&ds)?;
    let inf = model.infer_all(&prepared)?;
    ensure_dir(out)?;
    let (d, m) = (model.spec.channels, model.spec.points);

    let warps = out.join("warps.csv");
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..m).map(|k| format!("gamma_{k}")))
        .collect();
    write_rows(&warps, &header, &inf.warps)?;

    let aligned = out.join("aligned.csv");
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..d).flat_map(|c| (0..m).map(move |k| if d == 1 { format!("x_{k}") } else { format!("x{c}_{k}") })))
        .collect();
    write_rows(&aligned, &header, &inf.aligned)?;

    let invalid_rows = if validate {
        Some(check_warp_file(&warps, &model.grid)?)
    } else {
        None
    };
    Ok(AlignOutput {
        warps,
        aligned,
        invalid_rows,
    })
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for (i, row) in rows.iter().enumerate() {
        let record = std::iter::once(i.to_string()).chain(row.iter().map(|v| format!("{v}")));
        w.write_record(record).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Reads a warps CSV and returns the ids of rows violating the endpoint or
/// monotonicity conditions on `grid`.
pub fn check_warp_file(path: &Path, grid: &[f64]) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let mut bad = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_error(path, e))?;
        let gamma = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{} row {i}: {e}", path.display())))?;
        if (WarpFunction { gamma }).validate(grid).is_err() {
            bad.push(i);
        }
    }
    Ok(bad)
}

/// Worst gradient-check error per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub registration: f64,
    pub classification: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
    pub params: Vec<ParamCheck>,
}

/// Compares backward-pass gradients with central differences on a small
/// two-class synthetic batch.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<GradcheckReport> {
    let gc = &config.gradcheck;
    let start = Instant::now();
    let mut synth = SynthConfig::scaled(gc.samples, 0, 0, gc.points);
    synth.seed = config.synth.seed;
    synth.noise_std = config.synth.noise_std;
    let g = generate(&synth)?;
    let grid = g.dataset.common_grid()?;
    let spec = ModelSpec::new(1, gc.points, synth.classes.len(), gc.basis_k);
    let model = Model::new(spec, &grid, Standardizer::fit(&g.dataset)?, config.train.seed)?;
    let prepared = model.prepare(&g.dataset)?;
    let idx: Vec<usize> = (0..prepared.len()).collect();
    let means = class_means(&prepared.srvf, &prepared.labels, model.spec.classes)?;
    let means: Vec<Vec<f64>> = (0..means.num_classes()).map(|j| means.get(j).to_vec()).collect();
    let opts = config.train.forward_options();
    let params = model.gradient_check(&prepared, &idx, &means, &opts, gc.step)?;
    let worst = |group: Group| {
        params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.error)
            .fold(0.0, f64::max)
    };
    let (registration, classification) = (worst(Group::Registration), worst(Group::Classification));
    Ok(GradcheckReport {
        seed: config.train.seed,
        registration,
        classification,
        tolerance: gc.tolerance,
        passed: registration <= gc.tolerance && classification <= gc.tolerance,
        seconds: start.elapsed().as_secs_f64(),
        params,
    })
}

/// Output of `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutput {
    pub seed: u64,
    pub grid: Vec<Candidate>,
    pub result: TuneResult,
}

/// Reads a grid file: a JSON array of candidates.
pub fn load_grid(path: &Path) -> Result<Vec<Candidate>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Selects hyperparameters on the training split.
pub fn cmd_tune(config: &RunConfig, source: &DataSource, grid: &[Candidate], out: Option<&Path>) -> Result<TuneOutput> {
    let train = source.load_train()?;
    let mut base = config.train.clone();
    base.basis_k = base.basis_k.min(data::basis_limit(train.dataset.common_grid()?.len()));
    let ds = data::complete(train.dataset, base.basis_k)?;
    let result = trainer::select_hyperparams(&ds, grid, &base)?;
    let output = TuneOutput {
        seed: base.seed,
        grid: grid.to_vec(),
        result,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("best.json"), &output)?;
    }
    Ok(output)
}

/// Loads a checkpoint, mapping failures to data errors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}
