//! CSV dataset files with a JSON sidecar.
//!
//! Each channel lives in its own CSV file whose rows are `label,v_0,...,v_n`.
//! Single-channel datasets use `<stem>.csv`, multichannel ones
//! `<stem>_ch0.csv`, `<stem>_ch1.csv`, ... The sidecar `<stem>.json` records
//! the grid length, channel count, class count, channel file names, an
//! optional non-uniform grid and optional split indices.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, FunctionalSample, TimeGrid};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Grid points per row.
    pub n: usize,
    /// Channel count.
    pub d: usize,
    /// Class count.
    #[serde(rename = "C")]
    pub num_classes: usize,
    /// Channel CSV file names, relative to the sidecar.
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
}

fn channel_names(stem: &str, d: usize) -> Vec<String> {
    if d == 1 {
        vec![format!("{stem}.csv")]
    } else {
        (0..d).map(|k| format!("{stem}_ch{k}.csv")).collect()
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        // Display prints the shortest representation that round-trips.
        format!("{v}")
    }
}

/// Writes the dataset next to `path` (the sidecar location; extension is
/// replaced by `.json`). Returns the sidecar path.
pub fn save_dataset(dataset: &Dataset, splits: Option<&Splits>, path: &Path) -> Result<PathBuf> {
    let grid = dataset.common_grid()?;
    let sidecar_path = path.with_extension("json");
    let dir = sidecar_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = sidecar_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CoreError::Config(format!("bad dataset path {}", path.display())))?
        .to_string();
    let names = channel_names(&stem, dataset.channels());
    for (c, name) in names.iter().enumerate() {
        let mut out = String::new();
        for s in dataset.samples() {
            out.push_str(&s.label.to_string());
            for &v in &s.values[c] {
                out.push(',');
                out.push_str(&format_value(v));
            }
            out.push('\n');
        }
        let file = dir.join(name);
        fs::write(&file, out).map_err(|e| CoreError::io(&file, e))?;
    }
    let sidecar = Sidecar {
        n: grid.len(),
        d: dataset.channels(),
        num_classes: dataset.num_classes(),
        channels: names,
        grid: (!grid.is_uniform()).then(|| grid.points().to_vec()),
        splits: splits.cloned(),
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| CoreError::json(&sidecar_path, e))?;
    fs::write(&sidecar_path, text).map_err(|e| CoreError::io(&sidecar_path, e))?;
    Ok(sidecar_path)
}

struct ChannelRows {
    labels: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

fn parse_field(field: &str) -> Option<f64> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    f.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn read_channel(path: &Path, expected_len: Option<usize>, num_classes: Option<usize>) -> Result<ChannelRows> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CoreError::Data(format!("{file}: {e}")))?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    let mut width = expected_len;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CoreError::Row {
            file: file.clone(),
            row,
            msg: e.to_string(),
        })?;
        let err = |msg: String| CoreError::Row {
            file: file.clone(),
            row,
            msg,
        };
        if record.len() < 3 {
            return Err(err("expected a label and at least two values".into()));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("label `{}` is not a non-negative integer", &record[0])))?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(err(format!("label {label} outside 0..{c}")));
            }
        }
        let values = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(k, f)| parse_field(f).ok_or_else(|| err(format!("column {}: `{f}` is not a finite number", k + 2))))
            .collect::<Result<Vec<f64>>>()?;
        match width {
            Some(w) if w != values.len() => {
                return Err(err(format!("row has {} values, expected {w}", values.len())));
            }
            None => width = Some(values.len()),
            _ => {}
        }
        labels.push(label);
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CoreError::Data(format!("{file}: no rows")));
    }
    Ok(ChannelRows { labels, rows })
}

/// Loads a dataset from a sidecar (`.json`) or a bare single-channel `.csv`
/// (uniform grid, class count inferred from the labels).
pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<Splits>)> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json {
        let ch = read_channel(path, None, None)?;
        let grid = Arc::new(TimeGrid::uniform(ch.rows[0].len()));
        let num_classes = ch.labels.iter().max().unwrap() + 1;
        let samples = ch
            .rows
            .into_iter()
            .zip(ch.labels)
            .map(|(v, l)| FunctionalSample::new(grid.clone(), vec![v], l))
            .collect::<Result<Vec<_>>>()?;
        return Ok((Dataset::new(samples, num_classes)?, None));
    }
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))?;
    if sidecar.channels.len() != sidecar.d || sidecar.d == 0 {
        return Err(CoreError::Data(format!(
            "{}: {} channel files listed for d = {}",
            path.display(),
            sidecar.channels.len(),
            sidecar.d
        )));
    }
    let grid = Arc::new(match &sidecar.grid {
        Some(points) => TimeGrid::new(points.clone())?,
        None => TimeGrid::uniform(sidecar.n),
    });
    if grid.len() != sidecar.n {
        return Err(CoreError::Data(format!(
            "grid has {} points but n = {}",
            grid.len(),
            sidecar.n
        )));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut channels = Vec::with_capacity(sidecar.d);
    for name in &sidecar.channels {
        channels.push(read_channel(
            &dir.join(name),
            Some(sidecar.n),
            Some(sidecar.num_classes),
        )?);
    }
    let count = channels[0].rows.len();
    for (k, ch) in channels.iter().enumerate().skip(1) {
        if ch.rows.len() != count {
            return Err(CoreError::Data(format!(
                "channel {k} has {} rows, channel 0 has {count}",
                ch.rows.len()
            )));
        }
        if let Some(row) = ch.labels.iter().zip(&channels[0].labels).position(|(a, b)| a != b) {
            return Err(CoreError::Row {
                file: sidecar.channels[k].clone(),
                row: row + 1,
                msg: "label differs from channel 0".into(),
            });
        }
    }
    let labels = channels[0].labels.clone();
    let mut per_sample: Vec<Vec<Vec<f64>>> = (0..count).map(|_| Vec::with_capacity(sidecar.d)).collect();
    for ch in channels {
        for (dst, row) in per_sample.iter_mut().zip(ch.rows) {
            dst.push(row);
        }
    }
    let samples = per_sample
        .into_iter()
        .zip(labels)
        .map(|(v, l)| FunctionalSample::new(grid.clone(), v, l))
        .collect::<Result<Vec<_>>>()?;
    if let Some(splits) = &sidecar.splits {
        let bad = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .find(|&&i| i >= count);
        if let Some(i) = bad {
            return Err(CoreError::Data(format!(
                "split index {i} out of range for {count} samples"
            )));
        }
    }
    Ok((Dataset::new(samples, sidecar.num_classes)?, sidecar.splits))
}
