//! Data directories written by `gen`, and single dataset files.

use std::fs;
use std::path::{Path, PathBuf};

use deepfrc_core::fdata::{impute_dataset, load_dataset, save_dataset};
use deepfrc_core::synthgen::{generate, Generated, GroundTruth, SampleParams, SynthConfig};
use deepfrc_core::{Dataset, Reference, Splits, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, Result};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
pub const TRUTH_FILE: &str = "truth.json";

/// Ground truth of a generated directory. The latent curves and warps are
/// regenerated from the configuration; the stored draws guard against a
/// mismatched generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub synth: SynthConfig,
    pub splits: Splits,
    pub params: Vec<SampleParams>,
}

impl TruthFile {
    pub fn from_generated(synth: &SynthConfig, g: &Generated) -> Self {
        Self {
            synth: synth.clone(),
            splits: g.splits.clone(),
            params: g.truth.params.clone(),
        }
    }

    /// Regenerates the ground truth of one split.
    pub fn split_truth(&self, split: &str) -> Result<GroundTruth> {
        let g = generate(&self.synth)?;
        if g.truth.params != self.params {
            return Err(CliError::Data(
                "ground truth does not match its generator configuration".into(),
            ));
        }
        Ok(g.truth.subset(split_indices(&self.splits, split)?))
    }
}

fn split_indices<'a>(splits: &'a Splits, split: &str) -> Result<&'a [usize]> {
    match split {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        other => Err(CliError::Config(format!("unknown split `{other}`"))),
    }
}

/// Writes a generated benchmark: one dataset per non-empty split and the
/// ground truth. Files are staged next to `out` and moved in only once all
/// of them were written.
pub fn write_generated(synth: &SynthConfig, g: &Generated, out: &Path) -> Result<Vec<PathBuf>> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stage = tempfile::Builder::new()
        .prefix(".deepfrc-gen")
        .tempdir_in(&parent)
        .map_err(|e| io_error(&parent, e))?;
    let mut written = Vec::new();
    for name in SPLIT_NAMES {
        let idx = split_indices(&g.splits, name)?;
        if idx.is_empty() {
            continue;
        }
        let subset = g.dataset.subset(idx)?;
        save_dataset(&subset, None, &stage.path().join(format!("{name}.json")))?;
    }
    let truth = TruthFile::from_generated(synth, g);
    let text = serde_json::to_string(&truth).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(stage.path().join(TRUTH_FILE), text).map_err(|e| io_error(stage.path(), e))?;

    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut names: Vec<PathBuf> = fs::read_dir(stage.path())
        .map_err(|e| io_error(stage.path(), e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_error(stage.path(), e))?;
    names.sort();
    for src in names {
        let dst = out.join(src.file_name().expect("staged file name"));
        fs::rename(&src, &dst).map_err(|e| io_error(&dst, e))?;
        written.push(dst);
    }
    Ok(written)
}

/// A dataset loaded for one split, with its ground truth when known.
pub struct SplitData {
    pub name: String,
    pub dataset: Dataset,
    pub truth: Option<GroundTruth>,
}

impl SplitData {
    /// Reference quantities for a model with `basis_k` functions, when the
    /// ground truth lives on the same grid.
    pub fn reference(&self, basis_k: usize) -> Result<Option<Reference>> {
        let Some(truth) = &self.truth else {
            return Ok(None);
        };
        let grid = self.dataset.common_grid()?;
        if self.dataset.channels() != 1 || truth.latent.first().map(Vec::len) != Some(grid.len()) {
            return Ok(None);
        }
        Ok(Some(truth.reference(basis_k, &grid)?))
    }
}

/// Either a directory written by `gen` or a single dataset file.
pub struct DataSource {
    root: PathBuf,
    file: Option<(Dataset, Option<Splits>)>,
    truth: Option<TruthFile>,
}

impl DataSource {
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let truth_path = path.join(TRUTH_FILE);
            let truth = if truth_path.is_file() {
                let text = fs::read_to_string(&truth_path).map_err(|e| io_error(&truth_path, e))?;
                Some(serde_json::from_str(&text).map_err(|e| io_error(&truth_path, e))?)
            } else {
                None
            };
            return Ok(Self {
                root: path.to_path_buf(),
                file: None,
                truth,
            });
        }
        if !path.is_file() {
            return Err(CliError::Data(format!("{}: no such file or directory", path.display())));
        }
        Ok(Self {
            root: path.to_path_buf(),
            file: Some(load_dataset(path)?),
            truth: None,
        })
    }

    /// Splits present in this source, in train/val/test order. A file
    /// without split indices is a single `all` split.
    pub fn available(&self) -> Vec<String> {
        match &self.file {
            Some((_, None)) => vec!["all".into()],
            Some((_, Some(s))) => SPLIT_NAMES
                .iter()
                .filter(|n| split_indices(s, n).is_ok_and(|i| !i.is_empty()))
                .map(|n| n.to_string())
                .collect(),
            None => SPLIT_NAMES
                .iter()
                .filter(|n| self.root.join(format!("{n}.json")).is_file())
                .map(|n| n.to_string())
                .collect(),
        }
    }

    pub fn has(&self, split: &str) -> bool {
        self.available().iter().any(|s| s == split)
    }

    pub fn load(&self, split: &str) -> Result<SplitData> {
        if !self.has(split) {
            return Err(CliError::Data(format!("{}: no `{split}` split", self.root.display())));
        }
        let dataset = match &self.file {
            Some((ds, None)) => ds.clone(),
            Some((ds, Some(s))) => ds.subset(split_indices(s, split)?)?,
            None => load_dataset(&self.root.join(format!("{split}.json")))?.0,
        };
        let truth = match &self.truth {
            Some(t) if split_indices(&t.splits, split).is_ok_and(|i| i.len() == dataset.len()) => {
                Some(t.split_truth(split)?)
            }
            _ => None,
        };
        Ok(SplitData {
            name: split.to_string(),
            dataset,
            truth,
        })
    }

    /// The requested split, or by default the test split, else the last
    /// available one.
    pub fn load_eval(&self, split: Option<&str>) -> Result<SplitData> {
        if let Some(s) = split {
            return self.load(s);
        }
        let avail = self.available();
        let pick = if avail.iter().any(|s| s == "test") {
            "test".to_string()
        } else {
            avail
                .last()
                .cloned()
                .ok_or_else(|| CliError::Data(format!("{}: no datasets found", self.root.display())))?
        };
        self.load(&pick)
    }

    /// The training split (or the whole file).
    pub fn load_train(&self) -> Result<SplitData> {
        if self.has("train") {
            self.load("train")
        } else if self.has("all") {
            self.load("all")
        } else {
            Err(CliError::Data(format!("{}: no training data", self.root.display())))
        }
    }
}

/// Largest basis size keeping the projection overdetermined on `points`.
pub fn basis_limit(points: usize) -> usize {
    ((points.saturating_sub(1)) / 2).max(1)
}

/// Fills missing values with a basis smoother sized for the grid.
pub fn complete(dataset: Dataset, basis_k: usize) -> Result<Dataset> {
    if !dataset.has_missing() {
        return Ok(dataset);
    }
    let grid: std::sync::Arc<TimeGrid> = dataset.common_grid()?;
    Ok(impute_dataset(&dataset, basis_k.min(basis_limit(grid.len())))?)
}
