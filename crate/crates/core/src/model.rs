//! The joint registration and classification model: parameters, the batch
//! training graph and chunked inference.

use std::collections::HashMap;
use std::sync::Arc;

use deepfrc_tensor::{Diagnostic, Graph, GraphBuilder, NodeId, Session, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, argmax, smoothing_weight};
use crate::error::{CoreError, Result};
use crate::fdata::{Dataset, Standardizer, TimeGrid};
use crate::losses::{self, alignment_loss, cross_entropy, BatchLayout, LossBreakdown};
use crate::params::{Group, ParamStore};
use crate::spectral::BasisSet;
use crate::srvf::{class_means, srvf_transform, warped_srvf_node};
use crate::warpnet::{self, BnMode, BnRunning, WarpNetShape};

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub channels: usize,
    pub points: usize,
    pub classes: usize,
    /// Basis functions per channel.
    pub basis_k: usize,
    pub widths: [usize; 3],
    pub prob_floor: f64,
}

impl ModelSpec {
    pub fn new(channels: usize, points: usize, classes: usize, basis_k: usize) -> Self {
        Self {
            channels,
            points,
            classes,
            basis_k,
            widths: warpnet::WIDTHS,
            prob_floor: classifier::PROB_FLOOR,
        }
    }

    pub fn warp_shape(&self) -> WarpNetShape {
        WarpNetShape {
            channels: self.channels,
            widths: self.widths,
            points: self.points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.warp_shape().validate()?;
        if self.classes == 0 {
            return Err(CoreError::Config("at least one class is required".into()));
        }
        if self.basis_k == 0 || self.basis_k > self.points - 1 {
            return Err(CoreError::Config(format!(
                "basis size {} must be in 1..={}",
                self.basis_k,
                self.points - 1
            )));
        }
        smoothing_weight(self.classes, self.prob_floor)?;
        Ok(())
    }
}

/// Switches that change how a batch loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub alpha: f64,
    pub beta: f64,
    /// Identity warps; the warp network receives no gradient.
    pub freeze_warp: bool,
    /// Let the separation term pass gradient into the warps.
    pub separation_grad: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 10.0,
            freeze_warp: false,
            separation_grad: true,
        }
    }
}

/// Per-sample arrays the graph consumes, flattened channel-major (`d·m`).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub channels: usize,
    pub points: usize,
    pub raw: Vec<Vec<f64>>,
    pub scaled: Vec<Vec<f64>>,
    pub srvf: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stack(rows: &[Vec<f64>], idx: &[usize], d: usize, m: usize) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * d * m);
        for &i in idx {
            data.extend_from_slice(&rows[i]);
        }
        Tensor::new(vec![idx.len(), d, m], data).expect("batch shape")
    }
}

/// Graph and feeds for one batch, plus the node handles needed afterwards.
pub struct BatchGraph {
    pub graph: Graph,
    pub inputs: HashMap<String, Tensor>,
    pub total: NodeId,
    pub intra: NodeId,
    pub separation: Option<NodeId>,
    pub cross_entropy: NodeId,
    pub srvf: NodeId,
    pub probs: NodeId,
    pub bn: Vec<NodeId>,
}

/// Result of one forward/backward evaluation on a batch.
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Gradient per parameter name (zeros for unused parameters).
    pub grads: HashMap<String, Vec<f64>>,
    /// Warped SRVFs of the batch rows.
    pub srvf: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// `(count, mean, biased variance)` per batch-norm block.
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Outputs of [`Model::infer`], one entry per requested sample.
#[derive(Debug, Clone, Default)]
pub struct Inference {
    pub warps: Vec<Vec<f64>>,
    /// Inverse warps, the reparameterisation acting on the SRVFs.
    pub inverse_warps: Vec<Vec<f64>>,
    /// Aligned curves, `d·m` each.
    pub aligned: Vec<Vec<f64>>,
    pub srvf: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Inference {
    fn extend(&mut self, other: Inference) {
        self.warps.extend(other.warps);
        self.inverse_warps.extend(other.inverse_warps);
        self.aligned.extend(other.aligned);
        self.srvf.extend(other.srvf);
        self.coefficients.extend(other.coefficients);
        self.probs.extend(other.probs);
        self.predictions.extend(other.predictions);
        self.labels.extend(other.labels);
    }

    /// Losses with class means taken from these samples themselves.
    pub fn losses(&self, num_classes: usize, alpha: f64, beta: f64) -> Result<LossBreakdown> {
        let present: Vec<usize> = (0..num_classes).filter(|j| self.labels.contains(j)).collect();
        let remap: HashMap<usize, usize> = present.iter().enumerate().map(|(a, &b)| (b, a)).collect();
        let labels: Vec<usize> = self.labels.iter().map(|y| remap[y]).collect();
        let means = class_means(&self.srvf, &labels, present.len())?;
        let align = alignment_loss(&self.srvf, &labels, &means.means)?;
        let ce = cross_entropy(&self.probs, &self.labels)?;
        Ok(LossBreakdown::new(align.intra, align.separation, ce, alpha, beta))
    }
}

/// One entry of [`Model::gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub group: Group,
    pub error: f64,
}

/// Which batch-norm statistics inference uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    Running,
    Batch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub grid: Vec<f64>,
    pub params: ParamStore,
    pub bn: BnRunning,
    pub standardizer: Standardizer,
    #[serde(skip)]
    projector: Option<Arc<Vec<f64>>>,
}

/// Rows per inference chunk.
pub const INFER_CHUNK: usize = 64;

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, grid: &TimeGrid, standardizer: Standardizer, seed: u64) -> Result<Self> {
        spec.validate()?;
        if grid.len() != spec.points {
            return Err(CoreError::Config(format!(
                "grid of {} points for a model on {}",
                grid.len(),
                spec.points
            )));
        }
        if standardizer.mean.len() != spec.channels || standardizer.mean.iter().any(|m| m.len() != spec.points) {
            return Err(CoreError::Config("standardiser does not match the model shape".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        warpnet::init_params(&mut params, &spec.warp_shape(), &mut rng)?;
        classifier::init_params(&mut params, spec.basis_k * spec.channels, spec.classes, &mut rng)?;
        let mut model = Self {
            bn: BnRunning::new(&spec.warp_shape()),
            spec,
            grid: grid.points().to_vec(),
            params,
            standardizer,
            projector: None,
        };
        model.ensure_projector()?;
        Ok(model)
    }

    /// Rebuilds derived state after deserialisation and checks consistency.
    pub fn ensure_projector(&mut self) -> Result<()> {
        if self.projector.is_none() {
            self.spec.validate()?;
            let grid = TimeGrid::new(self.grid.clone())?;
            let basis = BasisSet::fourier(self.spec.basis_k, &grid)?;
            self.projector = Some(Arc::new(basis.projector()?.to_vec()));
        }
        Ok(())
    }

    fn projector(&self) -> Result<&[f64]> {
        self.projector
            .as_deref()
            .map(Vec::as_slice)
            .ok_or_else(|| CoreError::Config("model projector not initialised".into()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.clone())
    }

    pub fn lambda(&self) -> f64 {
        smoothing_weight(self.spec.classes, self.spec.prob_floor).expect("validated spec")
    }

    /// Flattens, standardises and transforms a dataset for this model.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Prepared> {
        let grid = dataset.common_grid()?;
        if grid.points() != self.grid.as_slice() {
            return Err(CoreError::Data("dataset grid differs from the model grid".into()));
        }
        if dataset.channels() != self.spec.channels {
            return Err(CoreError::Data(format!(
                "dataset has {} channels, model expects {}",
                dataset.channels(),
                self.spec.channels
            )));
        }
        if dataset.num_classes() > self.spec.classes {
            return Err(CoreError::Data("dataset has more classes than the model".into()));
        }
        if dataset.has_missing() {
            return Err(CoreError::Data("dataset has missing values; impute first".into()));
        }
        let t = grid.points();
        let mut out = Prepared {
            channels: self.spec.channels,
            points: self.spec.points,
            raw: Vec::with_capacity(dataset.len()),
            scaled: Vec::with_capacity(dataset.len()),
            srvf: Vec::with_capacity(dataset.len()),
            labels: dataset.labels(),
        };
        for s in dataset.samples() {
            out.raw.push(s.values.concat());
            out.scaled.push(self.standardizer.apply(&s.values).concat());
            out.srvf
                .push(s.values.iter().flat_map(|ch| srvf_transform(ch, t)).collect());
        }
        Ok(out)
    }

    fn declare_params(&self, g: &mut GraphBuilder, include_warp: bool, grad: bool) -> Result<HashMap<String, NodeId>> {
        let mut nodes = HashMap::new();
        for p in self.params.iter() {
            if p.group == Group::Registration && !include_warp {
                continue;
            }
            nodes.insert(p.name.clone(), g.input(&p.name, &p.shape, grad)?);
        }
        Ok(nodes)
    }

    fn grid_constants(&self, g: &mut GraphBuilder, b: usize) -> (NodeId, NodeId) {
        let m = self.spec.points;
        let knots: Vec<f64> = (0..b).flat_map(|_| self.grid.iter().copied()).collect();
        let curve = Tensor::new(vec![b, 1, m], knots.clone()).expect("grid curve shape");
        let knots = Tensor::new(vec![b, m], knots).expect("knot shape");
        (g.constant(knots), g.constant(curve))
    }

    /// Assembles the batch graph: warps, aligned curves, warped SRVFs,
    /// coefficients, probabilities and the three loss terms.
    pub fn batch_graph(
        &self,
        data: &Prepared,
        idx: &[usize],
        means: &[Vec<f64>],
        opts: &ForwardOptions,
    ) -> Result<BatchGraph> {
        let (b, d, m, k) = (idx.len(), self.spec.channels, self.spec.points, self.spec.basis_k);
        if b == 0 {
            return Err(CoreError::Data("empty batch".into()));
        }
        if means.len() != self.spec.classes || means.iter().any(|v| v.len() != d * m) {
            return Err(CoreError::Data("class means do not match the model".into()));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let layout = BatchLayout::new(&labels, self.spec.classes)?;
        let mut g = GraphBuilder::new();
        let params = self.declare_params(&mut g, !opts.freeze_warp, true)?;
        let mut inputs = HashMap::new();
        self.params.feed(&mut inputs);
        if opts.freeze_warp {
            inputs.retain(|name, _| params.contains_key(name));
        }
        let x = g.input("x", &[b, d, m], false)?;
        let q = g.input("q", &[b, d, m], false)?;
        inputs.insert("x".into(), Prepared::stack(&data.raw, idx, d, m));
        inputs.insert("q".into(), Prepared::stack(&data.srvf, idx, d, m));
        let (knots, curve) = self.grid_constants(&mut g, b);

        let (aligned, srvf, bn) = if opts.freeze_warp {
            (x, g.reshape(q, &[b, d * m])?, Vec::new())
        } else {
            let xs = g.input("x_scaled", &[b, d, m], false)?;
            inputs.insert("x_scaled".into(), Prepared::stack(&data.scaled, idx, d, m));
            let feat = warpnet::feature_forward(&mut g, xs, &params, BnMode::Batch)?;
            let warp = warpnet::build_warp_node(&mut g, feat.tau, &self.grid)?;
            let aligned = warpnet::apply_warp_node(&mut g, x, warp, knots)?;
            let inverse = warpnet::inverse_warp_node(&mut g, warp, curve, knots)?;
            let srvf = warped_srvf_node(&mut g, q, inverse, knots, &self.grid)?;
            (aligned, srvf, feat.bn)
        };

        let proj = g.constant(Tensor::new(vec![k, m], self.projector()?.to_vec())?);
        let coeffs = g.matvec(proj, aligned)?;
        let coeffs = g.reshape(coeffs, &[b, d * k])?;
        let cls = classifier::classify_node(&mut g, coeffs, &params, self.lambda())?;

        let mut rows = Vec::with_capacity(b * d * m);
        for &y in &labels {
            rows.extend_from_slice(&means[y]);
        }
        let batch_means = g.constant(Tensor::new(vec![b, d * m], rows)?);
        let weights = g.constant(layout.weights.clone());
        let intra = losses::intra_node(&mut g, srvf, batch_means, weights)?;
        let absent = g.constant(layout.absent_means(means));
        let separation = losses::separation_node(&mut g, srvf, &layout, absent, opts.separation_grad)?;
        let onehot = g.constant(layout.onehot.clone());
        let ce = losses::cross_entropy_node(&mut g, cls.probs, onehot)?;

        let mut total = intra;
        if let Some(sep) = separation {
            let weighted = g.scale(sep, opts.alpha)?;
            total = g.add(total, weighted)?;
        }
        let weighted = g.scale(ce, opts.beta)?;
        let total = g.add(total, weighted)?;
        Ok(BatchGraph {
            graph: g.build(),
            inputs,
            total,
            intra,
            separation,
            cross_entropy: ce,
            srvf,
            probs: cls.probs,
            bn,
        })
    }

    /// Forward and backward pass over one batch.
    pub fn step(
        &self,
        data: &Prepared,
        idx: &[usize],
        means: &[Vec<f64>],
        opts: &ForwardOptions,
    ) -> Result<StepOutput> {
        let bg = self.batch_graph(data, idx, means, opts)?;
        let mut s = Session::new(&bg.graph);
        s.forward(bg.inputs)?;
        let scalar = |n: NodeId| -> Result<f64> { Ok(s.value(n)?.item()) };
        let loss = LossBreakdown::new(
            scalar(bg.intra)?,
            bg.separation.map(scalar).transpose()?.unwrap_or(0.0),
            scalar(bg.cross_entropy)?,
            opts.alpha,
            opts.beta,
        );
        let row = self.spec.channels * self.spec.points;
        let srvf = s.value(bg.srvf)?.data().chunks(row).map(<[f64]>::to_vec).collect();
        let predictions = s
            .value(bg.probs)?
            .data()
            .chunks(self.spec.classes)
            .map(argmax)
            .collect();
        let mut grads: HashMap<String, Vec<f64>> = s
            .backward(bg.total)?
            .into_iter()
            .map(|(k, v)| (k, v.into_data()))
            .collect();
        for p in self.params.iter() {
            grads.entry(p.name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
        }
        let bn_stats = bg
            .bn
            .iter()
            .map(|n| {
                let st = s
                    .batch_stats()
                    .iter()
                    .find(|st| st.node == n.index())
                    .expect("batch-norm statistics recorded");
                (st.count, st.mean.clone(), st.var.clone())
            })
            .collect();
        Ok(StepOutput {
            loss,
            grads,
            srvf,
            predictions,
            bn_stats,
            diagnostics: s.diagnostics().to_vec(),
        })
    }

    /// Largest relative error between the backward pass and central finite
    /// differences of the total loss, per parameter.
    pub fn gradient_check(
        &self,
        data: &Prepared,
        idx: &[usize],
        means: &[Vec<f64>],
        opts: &ForwardOptions,
        step: f64,
    ) -> Result<Vec<ParamCheck>> {
        let bg = self.batch_graph(data, idx, means, opts)?;
        let mut out = Vec::new();
        for p in self.params.iter() {
            if opts.freeze_warp && p.group == Group::Registration {
                continue;
            }
            let error = deepfrc_tensor::grad_check(&bg.graph, &bg.inputs, bg.total, &p.name, step)?;
            out.push(ParamCheck {
                name: p.name.clone(),
                group: p.group,
                error,
            });
        }
        Ok(out)
    }

    fn infer_chunk(&self, data: &Prepared, idx: &[usize], stats: NormStats) -> Result<Inference> {
        let (b, d, m, k) = (idx.len(), self.spec.channels, self.spec.points, self.spec.basis_k);
        let mut g = GraphBuilder::new();
        let params = self.declare_params(&mut g, true, false)?;
        let mut inputs = HashMap::new();
        self.params.feed(&mut inputs);
        let x = g.input("x", &[b, d, m], false)?;
        let q = g.input("q", &[b, d, m], false)?;
        let xs = g.input("x_scaled", &[b, d, m], false)?;
        inputs.insert("x".into(), Prepared::stack(&data.raw, idx, d, m));
        inputs.insert("q".into(), Prepared::stack(&data.srvf, idx, d, m));
        inputs.insert("x_scaled".into(), Prepared::stack(&data.scaled, idx, d, m));
        let (knots, curve) = self.grid_constants(&mut g, b);
        let mode = match stats {
            NormStats::Running => BnMode::Running(&self.bn),
            NormStats::Batch => BnMode::Batch,
        };
        let feat = warpnet::feature_forward(&mut g, xs, &params, mode)?;
        let warp = warpnet::build_warp_node(&mut g, feat.tau, &self.grid)?;
        let aligned = warpnet::apply_warp_node(&mut g, x, warp, knots)?;
        let inverse = warpnet::inverse_warp_node(&mut g, warp, curve, knots)?;
        let srvf = warped_srvf_node(&mut g, q, inverse, knots, &self.grid)?;
        let proj = g.constant(Tensor::new(vec![k, m], self.projector()?.to_vec())?);
        let coeffs = g.matvec(proj, aligned)?;
        let flat = g.reshape(coeffs, &[b, d * k])?;
        let cls = classifier::classify_node(&mut g, flat, &params, self.lambda())?;
        let graph = g.build();
        let mut s = Session::new(&graph);
        s.forward(inputs)?;
        let rows = |n: NodeId, len: usize| -> Result<Vec<Vec<f64>>> {
            Ok(s.value(n)?.data().chunks(len).map(<[f64]>::to_vec).collect())
        };
        let probs = rows(cls.probs, self.spec.classes)?;
        Ok(Inference {
            warps: rows(warp, m)?,
            inverse_warps: rows(inverse, m)?,
            aligned: rows(aligned, d * m)?,
            srvf: rows(srvf, d * m)?,
            coefficients: rows(coeffs, d * k)?,
            predictions: probs.iter().map(|p| argmax(p)).collect(),
            probs,
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
        })
    }

    /// Runs the model over `idx` in chunks of [`INFER_CHUNK`].
    pub fn infer(&self, data: &Prepared, idx: &[usize], stats: NormStats) -> Result<Inference> {
        let mut out = Inference::default();
        for chunk in idx.chunks(INFER_CHUNK) {
            out.extend(self.infer_chunk(data, chunk, stats)?);
        }
        Ok(out)
    }

    /// Runs the model over every prepared sample.
    pub fn infer_all(&self, data: &Prepared) -> Result<Inference> {
        let idx: Vec<usize> = (0..data.len()).collect();
        self.infer(data, &idx, NormStats::Running)
    }
}
