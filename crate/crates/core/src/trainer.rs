//! AdamW training loop, checkpoints, history and hyperparameter selection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fdata::{Dataset, Standardizer};
use crate::losses::LossBreakdown;
use crate::metrics::{self, Reference};
use crate::model::{ForwardOptions, Model, ModelSpec, NormStats, Prepared};
use crate::params::{Group, ParamStore};

/// AdamW constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Basis functions per channel.
    pub basis_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr_reg: f64,
    pub lr_class: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rates decay as `lr / (1 + step / decay)`; 0 keeps them constant.
    pub decay: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub freeze_warp: bool,
    pub separation_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            basis_k: 100,
            alpha: 100.0,
            beta: 10.0,
            lr_reg: 1e-3,
            lr_class: 1e-3,
            epochs: 30,
            batch_size: 64,
            decay: 0.0,
            seed: 0,
            adam: AdamConfig::default(),
            freeze_warp: false,
            separation_grad: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.lr_reg > 0.0) || !(self.lr_class > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 || self.basis_k == 0 {
            return bad("batch size and basis size must be positive");
        }
        if !(self.decay >= 0.0) {
            return bad("decay constant must be non-negative");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
            || !(a.weight_decay >= 0.0)
        {
            return bad("invalid AdamW constants");
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            alpha: self.alpha,
            beta: self.beta,
            freeze_warp: self.freeze_warp,
            separation_grad: self.separation_grad,
        }
    }

    /// Learning rate for `group` before the given (zero-based) step.
    pub fn learning_rate(&self, group: Group, step: u64) -> f64 {
        let base = match group {
            Group::Registration => self.lr_reg,
            Group::Classification => self.lr_class,
        };
        if self.decay > 0.0 {
            base / (1.0 + step as f64 / self.decay)
        } else {
            base
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update of `p` at step `t` (1-based).
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p[i] *= 1.0 - lr * cfg.weight_decay;
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every parameter, each with its group's rate.
/// Rejects the step, leaving everything untouched, if a gradient is not finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &std::collections::HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for p in params.iter() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| CoreError::Numerical(format!("no gradient for {}", p.name)))?;
        if g.len() != p.data.len() {
            return Err(CoreError::Numerical(format!("gradient shape mismatch for {}", p.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(format!("non-finite gradient for {}", p.name)));
        }
    }
    let lr_step = state.step;
    state.step += 1;
    for (k, p) in params.iter_mut().enumerate() {
        let lr = config.learning_rate(p.group, lr_step);
        adamw_update(
            &mut p.data,
            &grads[&p.name],
            &mut state.m[k],
            &mut state.v[k],
            state.step,
            lr,
            &config.adam,
        );
    }
    Ok(())
}

/// Position of the shuffling stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub intra: f64,
    pub separation: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_atv: Option<f64>,
    pub val_rho: Option<f64>,
    pub val_delta_q_reg: Option<f64>,
    pub seconds: f64,
}

/// Samples monitored after every epoch.
pub struct Validation<'a> {
    pub data: &'a Prepared,
    pub reference: Option<&'a Reference>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: Model,
    pub adam: AdamState,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(|e| CoreError::json(path, e))?;
        fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))?;
        ck.model.ensure_projector()?;
        let fresh = AdamState::new(&ck.model.params);
        if fresh.m.iter().map(Vec::len).ne(ck.adam.m.iter().map(Vec::len))
            || fresh.v.iter().map(Vec::len).ne(ck.adam.v.iter().map(Vec::len))
        {
            return Err(CoreError::Config(
                "optimiser state does not match the parameters".into(),
            ));
        }
        Ok(ck)
    }
}

/// Where a run writes its artefacts; `None` disables the file.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

/// Per-sample warped SRVFs of the training set and their class sums; the
/// means read at each step come from the values stored by earlier steps.
struct MeanCache {
    srvf: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl MeanCache {
    fn build(model: &Model, data: &Prepared, batch: usize) -> Result<Self> {
        let c = model.spec.classes;
        let len = model.spec.channels * model.spec.points;
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut srvf = Vec::with_capacity(data.len());
        if model.params.group(Group::Registration).next().is_none() {
            return Err(CoreError::Config("model has no warp network".into()));
        }
        for chunk in idx.chunks(batch) {
            srvf.extend(model.infer(data, chunk, NormStats::Batch)?.srvf);
        }
        let mut cache = Self {
            srvf,
            sums: vec![vec![0.0; len]; c],
            counts: vec![0; c],
        };
        cache.resum(&data.labels);
        Ok(cache)
    }

    fn identity(data: &Prepared, classes: usize) -> Self {
        let len = data.channels * data.points;
        let mut cache = Self {
            srvf: data.srvf.clone(),
            sums: vec![vec![0.0; len]; classes],
            counts: vec![0; classes],
        };
        cache.resum(&data.labels);
        cache
    }

    fn resum(&mut self, labels: &[usize]) {
        self.sums.iter_mut().flatten().for_each(|v| *v = 0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
        for (q, &y) in self.srvf.iter().zip(labels) {
            self.counts[y] += 1;
            self.sums[y].iter_mut().zip(q).for_each(|(s, v)| *s += v);
        }
    }

    fn means(&self) -> Vec<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
            .collect()
    }

    fn store(&mut self, i: usize, label: usize, q: Vec<f64>) {
        for ((s, old), new) in self.sums[label].iter_mut().zip(&self.srvf[i]).zip(&q) {
            *s += new - old;
        }
        self.srvf[i] = q;
    }
}

/// Optimiser state plus the model being trained.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if config.basis_k != model.spec.basis_k {
            return Err(CoreError::Config("configured basis size differs from the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(&model.params),
            rng,
            config,
            model,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint; `epochs` optionally raises the target.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            rng: ck.rng.restore(),
            config: ck.config,
            model: ck.model,
            adam: ck.adam,
            epoch: ck.epoch,
            history: ck.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            model: self.model.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(self.config.seed, &self.rng),
            history: self.history.clone(),
        }
    }

    /// One pass over the shuffled training set. Returns the batch-size
    /// weighted mean loss and the training accuracy of the batch predictions.
    pub fn train_epoch(&mut self, data: &Prepared) -> Result<(LossBreakdown, f64)> {
        let opts = self.config.forward_options();
        let batch = self.config.batch_size.min(data.len()).max(1);
        let mut cache = if opts.freeze_warp {
            MeanCache::identity(data, self.model.spec.classes)
        } else {
            MeanCache::build(&self.model, data, batch)?
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = [0.0; 3];
        let mut correct = 0usize;
        for (b, idx) in order.chunks(batch).enumerate() {
            let means = cache.means();
            let out = self.model.step(data, idx, &means, &opts).map_err(|e| {
                if e.is_numerical() {
                    self.diverged(b, e.to_string())
                } else {
                    e
                }
            })?;
            let l = out.loss;
            if !l.total.is_finite() {
                return Err(self.diverged(b, format!("loss {}", l.total)));
            }
            adamw_step(&mut self.model.params, &out.grads, &mut self.adam, &self.config)
                .map_err(|e| self.diverged(b, e.to_string()))?;
            for (block, (count, mean, var)) in out.bn_stats.iter().enumerate() {
                self.model.bn.update(block, *count, mean, var);
            }
            let w = idx.len() as f64;
            acc[0] += w * l.intra;
            acc[1] += w * l.separation;
            acc[2] += w * l.cross_entropy;
            correct += out
                .predictions
                .iter()
                .zip(idx)
                .filter(|(p, &i)| **p == data.labels[i])
                .count();
            for (&i, q) in idx.iter().zip(out.srvf) {
                cache.store(i, data.labels[i], q);
            }
        }
        let n = data.len() as f64;
        let loss = LossBreakdown::new(acc[0] / n, acc[1] / n, acc[2] / n, opts.alpha, opts.beta);
        Ok((loss, correct as f64 / n))
    }

    fn diverged(&self, step: usize, msg: String) -> CoreError {
        CoreError::Diverged {
            epoch: self.epoch + 1,
            step,
            msg,
        }
    }

    /// Trains until `config.epochs` epochs are complete, writing the
    /// checkpoint and log after each one.
    pub fn run(&mut self, train: &Prepared, val: Option<&Validation>, io: &TrainIo) -> Result<()> {
        if train.is_empty() {
            return Err(CoreError::Data("training set is empty".into()));
        }
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let (loss, train_acc) = self.train_epoch(train)?;
            self.epoch += 1;
            let mut record = EpochRecord {
                epoch: self.epoch,
                intra: loss.intra,
                separation: loss.separation,
                cross_entropy: loss.cross_entropy,
                total: loss.total,
                train_accuracy: train_acc,
                val_accuracy: None,
                val_macro_f1: None,
                val_atv: None,
                val_rho: None,
                val_delta_q_reg: None,
                seconds: 0.0,
            };
            if let Some(v) = val {
                let idx: Vec<usize> = (0..v.data.len()).collect();
                let inf = self.model.infer(v.data, &idx, NormStats::Running)?;
                let r = metrics::report(&self.model, v.data, &idx, &inf, v.reference)?;
                record.val_accuracy = Some(r.accuracy);
                record.val_macro_f1 = Some(r.macro_f1);
                record.val_atv = r.atv;
                record.val_rho = r.rho;
                record.val_delta_q_reg = r.delta_q_reg;
            }
            record.seconds = start.elapsed().as_secs_f64();
            self.history.push(record);
            if let Some(path) = &io.checkpoint {
                self.checkpoint().save(path)?;
            }
            if let Some(path) = &io.history {
                write_history(&self.history, path)?;
            }
        }
        Ok(())
    }
}

/// Writes the training log as CSV.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Builds a model sized for `train` and trains it from scratch.
pub fn train(
    train: &Dataset,
    val: Option<(&Dataset, Option<&Reference>)>,
    config: &TrainConfig,
    io: &TrainIo,
) -> Result<Trainer> {
    config.validate()?;
    let grid = train.common_grid()?;
    let spec = ModelSpec::new(train.channels(), grid.len(), train.num_classes(), config.basis_k);
    let model = Model::new(spec, &grid, Standardizer::fit(train)?, config.seed)?;
    let mut trainer = Trainer::new(config.clone(), model)?;
    let data = trainer.model.prepare(train)?;
    let val_data = val.map(|(d, _)| trainer.model.prepare(d)).transpose()?;
    let v = val_data.as_ref().map(|data| Validation {
        data,
        reference: val.and_then(|(_, r)| r),
    });
    trainer.run(&data, v.as_ref(), io)?;
    Ok(trainer)
}

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    pub beta: f64,
    pub lr_reg: f64,
    pub lr_class: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: usize,
    pub candidate: Candidate,
    /// Held-out total loss per candidate; non-finite for failed runs.
    pub scores: Vec<f64>,
}

/// Deterministic 4:1 split, stratified by class.
pub fn holdout_split(labels: &[usize], num_classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let (mut fit, mut hold) = (Vec::new(), Vec::new());
    for j in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == j).collect();
        members.shuffle(&mut rng);
        let n_hold = (members.len() as f64 / 5.0).round() as usize;
        hold.extend_from_slice(&members[..n_hold]);
        fit.extend_from_slice(&members[n_hold..]);
    }
    fit.sort_unstable();
    hold.sort_unstable();
    (fit, hold)
}

/// Trains every candidate on four fifths of `dataset` and scores it by its
/// own total loss on the remaining fifth. Failed or non-finite runs rank
/// last; ties keep the earliest candidate.
pub fn select_hyperparams(dataset: &Dataset, grid: &[Candidate], base: &TrainConfig) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(CoreError::Config("hyperparameter grid is empty".into()));
    }
    let (fit, hold) = holdout_split(&dataset.labels(), dataset.num_classes(), base.seed);
    let fit_set = dataset.subset(&fit)?;
    let hold_set = dataset.subset(&hold)?;
    let mut scores = Vec::with_capacity(grid.len());
    for c in grid {
        let config = TrainConfig {
            alpha: c.alpha,
            beta: c.beta,
            lr_reg: c.lr_reg,
            lr_class: c.lr_class,
            ..base.clone()
        };
        scores.push(score_candidate(&fit_set, &hold_set, &config).unwrap_or(f64::NAN));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && (!scores[best].is_finite() || s < scores[best]) {
            best = i;
        }
    }
    Ok(TuneResult {
        best,
        candidate: grid[best],
        scores,
    })
}

/// Held-out total loss of a model trained with `config`.
pub fn score_candidate(fit: &Dataset, hold: &Dataset, config: &TrainConfig) -> Result<f64> {
    let trainer = train(fit, None, config, &TrainIo::default())?;
    let data = trainer.model.prepare(hold)?;
    let inf = trainer.model.infer_all(&data)?;
    let loss = inf.losses(trainer.model.spec.classes, config.alpha, config.beta)?;
    Ok(loss.total)
}
