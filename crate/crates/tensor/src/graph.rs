use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`] or [`GraphBuilder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input(usize),
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    Div,
    DivClamped,
    Neg,
    Square,
    Sqrt,
    Log,
    Exp,
    Reciprocal,
    Relu,
    Scale(f64),
    AddScalar(f64),
    Sum,
    SumAxis(usize),
    CumSum,
    Slice { start: usize, end: usize },
    PadFront(usize),
    Reshape,
    MatMul,
    MatVec,
    Linear,
    Conv1d,
    MaxPool,
    BatchNormTrain,
    BatchNormEval,
    GlobalAvg,
    Softmax,
    Interp,
    CentralDiff(Vec<f64>),
    Norm,
    Detach,
    WarpGuard(Vec<f64>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::DivClamped => "div_clamped",
            Op::Neg => "neg",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Reciprocal => "reciprocal",
            Op::Relu => "relu",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::CumSum => "cumsum",
            Op::Slice { .. } => "slice",
            Op::PadFront(_) => "pad_front",
            Op::Reshape => "reshape",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Linear => "linear",
            Op::Conv1d => "conv1d",
            Op::MaxPool => "max_pool",
            Op::BatchNormTrain => "batch_norm_train",
            Op::BatchNormEval => "batch_norm_eval",
            Op::GlobalAvg => "global_avg",
            Op::Softmax => "softmax",
            Op::Interp => "interp",
            Op::CentralDiff(_) => "central_diff",
            Op::Norm => "norm",
            Op::Detach => "detach",
            Op::WarpGuard(_) => "warp_guard",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) shape: Vec<usize>,
}

/// Declared external input of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub node: NodeId,
}

/// Immutable computation graph. Nodes are stored in topological order.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: Vec<InputSpec>,
    pub(crate) outputs: HashMap<String, NodeId>,
    /// Whether a gradient has to flow into each node.
    pub(crate) needs_grad: Vec<bool>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }

    pub fn input(&self, name: &str) -> Option<&InputSpec> {
        self.inputs.iter().find(|s| s.name == name)
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn op_name(&self, node: NodeId) -> &'static str {
        self.nodes[node.0].op.name()
    }
}

/// Broadcast two shapes numpy-style (right-aligned, size-1 dims stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Incrementally builds a [`Graph`], inferring and checking shapes as it goes.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<InputSpec>,
    outputs: HashMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    fn err(&self, op: &'static str, detail: impl Into<String>) -> TensorError {
        TensorError::Shape {
            node: self.nodes.len(),
            op,
            detail: detail.into(),
        }
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(TensorError::UnknownNode(id.0));
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: &[NodeId], shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|n| n.0).collect(),
            shape,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input leaf.
    pub fn input(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if self.inputs.iter().any(|s| s.name == name) {
            return Err(TensorError::DuplicateInput(name.to_string()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.err("input", format!("invalid input shape {shape:?}")));
        }
        let id = self.push(Op::Input(self.inputs.len()), &[], shape.to_vec());
        self.inputs.push(InputSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            requires_grad,
            node: id,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), &[], shape)
    }

    /// Names a node so it can be looked up after evaluation.
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let name = op.name();
        let shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            self.err(
                name,
                format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        Ok(self.push(op, &[a, b], shape))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, &[a], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    /// Division that rejects denominators with magnitude below [`crate::EPS_DIV`].
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b)
    }

    /// Division with the denominator clamped below at [`crate::EPS_DIV`].
    pub fn div_clamped(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::DivClamped, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, a)
    }

    /// Square root with the argument clamped below at [`crate::EPS_DIV`].
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a)
    }

    /// `1 / max(x, EPS_DIV)`.
    pub fn reciprocal(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Reciprocal, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(Op::Scale(factor), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        self.unary(Op::AddScalar(value), a)
    }

    /// Stops gradient flow; forward is the identity.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Detach, a)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        Ok(self.push(Op::Sum, &[a], vec![1]))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(self.err("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(self.push(Op::SumAxis(axis), &[a], drop_axis(&shape, axis)))
    }

    /// Cumulative sum along the last axis.
    pub fn cumsum(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::CumSum, a)
    }

    /// Entries `start..end` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let mut shape = self.shape(a).to_vec();
        let len = *shape.last().unwrap();
        if start >= end || end > len {
            return Err(self.err("slice", format!("range {start}..{end} invalid for length {len}")));
        }
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(Op::Slice { start, end }, &[a], shape))
    }

    /// Prepends `count` zeros along the last axis.
    pub fn pad_front(&mut self, a: NodeId, count: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() += count;
        Ok(self.push(Op::PadFront(count), &[a], shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        let from: usize = self.shape(a).iter().product();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != from {
            return Err(self.err("reshape", format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        Ok(self.push(Op::Reshape, &[a], shape.to_vec()))
    }

    /// `[p, q] x [q, r] -> [p, r]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err("matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul, &[a, b], vec![sa[0], sb[1]]))
    }

    /// Matrix `[m, k]` applied to every length-`k` row of `x` (`[..., k] -> [..., m]`).
    pub fn matvec(&mut self, matrix: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(&[matrix, x])?;
        let (sm, sx) = (self.shape(matrix).to_vec(), self.shape(x).to_vec());
        if sm.len() != 2 || *sx.last().unwrap() != sm[1] {
            return Err(self.err("matvec", format!("matrix {sm:?} against {sx:?}")));
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = sm[0];
        Ok(self.push(Op::MatVec, &[matrix, x], shape))
    }

    /// Affine layer: `x [B, in]`, `weight [out, in]`, `bias [out]` -> `[B, out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[x, weight, bias])?;
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(self.err("linear", format!("x {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        Ok(self.push(Op::Linear, &[x, weight, bias], vec![sx[0], sw[0]]))
    }

    /// Same-length 1D convolution: `x [B, Ci, L]`, `weight [Co, Ci, K]` (odd K,
    /// zero padding), `bias [Co]` -> `[B, Co, L]`.
    pub fn conv1d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(&[x, weight, bias])?;
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sw[2] % 2 == 0 || sb != [sw[0]] {
            return Err(self.err("conv1d", format!("x {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        Ok(self.push(Op::Conv1d, &[x, weight, bias], vec![sx[0], sw[0], sx[2]]))
    }

    /// Max-pooling with window 2 and stride 2 on the last axis; an odd trailing
    /// element is dropped.
    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let mut shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        if len < 2 {
            return Err(self.err("max_pool", format!("length {len} too short to pool")));
        }
        *shape.last_mut().unwrap() = len / 2;
        Ok(self.push(Op::MaxPool, &[x], shape))
    }

    fn check_bn(&self, x: NodeId, params: &[NodeId], op: &'static str) -> Result<()> {
        let sx = self.shape(x);
        if sx.len() != 2 && sx.len() != 3 {
            return Err(self.err(op, format!("expected [B, C] or [B, C, L], got {sx:?}")));
        }
        for p in params {
            if self.shape(*p) != [sx[1]] {
                return Err(self.err(op, format!("parameter shape {:?} for {sx:?}", self.shape(*p))));
            }
        }
        Ok(())
    }

    /// Batch normalisation using the statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.check(&[x, gamma, beta])?;
        self.check_bn(x, &[gamma, beta], "batch_norm_train")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::BatchNormTrain, &[x, gamma, beta], shape))
    }

    /// Batch normalisation using supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
    ) -> Result<NodeId> {
        self.check(&[x, gamma, beta, mean, var])?;
        self.check_bn(x, &[gamma, beta, mean, var], "batch_norm_eval")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::BatchNormEval, &[x, gamma, beta, mean, var], shape))
    }

    /// Mean over the time axis: `[B, C, L] -> [B, C]`.
    pub fn global_avg(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(self.err("global_avg", format!("expected [B, C, L], got {sx:?}")));
        }
        Ok(self.push(Op::GlobalAvg, &[x], vec![sx[0], sx[1]]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Softmax, x)
    }

    /// Euclidean norm along the last axis (axis removed).
    pub fn norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        let last = shape.len() - 1;
        Ok(self.push(Op::Norm, &[x], drop_axis(&shape, last)))
    }

    /// Piecewise-linear interpolation through knots `(xk[b, r], yk[b, c, r])`
    /// evaluated at `xq[b, j]`; constant extrapolation beyond the end knots.
    /// Shapes: `xk [B, m]`, `yk [B, D, m]`, `xq [B, q]` -> `[B, D, q]`.
    pub fn interp(&mut self, xk: NodeId, yk: NodeId, xq: NodeId) -> Result<NodeId> {
        self.check(&[xk, yk, xq])?;
        let (sk, sy, sq) = (
            self.shape(xk).to_vec(),
            self.shape(yk).to_vec(),
            self.shape(xq).to_vec(),
        );
        if sk.len() != 2
            || sy.len() != 3
            || sq.len() != 2
            || sk[1] < 2
            || sy[0] != sk[0]
            || sq[0] != sk[0]
            || sy[2] != sk[1]
        {
            return Err(self.err("interp", format!("knots {sk:?}, values {sy:?}, queries {sq:?}")));
        }
        Ok(self.push(Op::Interp, &[xk, yk, xq], vec![sk[0], sy[1], sq[1]]))
    }

    /// Derivative along the last axis on grid `t`: central differences in the
    /// interior, one-sided differences at both ends.
    pub fn central_diff(&mut self, x: NodeId, grid: &[f64]) -> Result<NodeId> {
        self.check(&[x])?;
        let len = *self.shape(x).last().unwrap();
        if grid.len() != len || len < 2 {
            return Err(self.err(
                "central_diff",
                format!("grid of {} points for last axis {len}", grid.len()),
            ));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(self.err("central_diff", "grid not strictly increasing"));
        }
        self.unary(Op::CentralDiff(grid.to_vec()), x)
    }

    /// Keeps each row of `gamma [B, m]` a valid warp on `grid`: rows whose
    /// smallest forward difference falls below `EPS_DIV` are blended with the
    /// identity and renormalised to the grid endpoints. Other rows pass through.
    pub fn warp_guard(&mut self, gamma: NodeId, grid: &[f64]) -> Result<NodeId> {
        self.check(&[gamma])?;
        let shape = self.shape(gamma).to_vec();
        if shape.len() != 2 || shape[1] != grid.len() || grid.len() < 2 {
            return Err(self.err("warp_guard", format!("{shape:?} against grid of {}", grid.len())));
        }
        self.unary(Op::WarpGuard(grid.to_vec()), gamma)
    }

    pub fn build(self) -> Graph {
        let mut needs_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs_grad[i] = match &node.op {
                Op::Input(k) => self.inputs[*k].requires_grad,
                Op::Constant(_) | Op::Detach => false,
                _ => node.inputs.iter().any(|&j| needs_grad[j]),
            };
        }
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            needs_grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 4], &[1]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 4], &[3]), None);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = GraphBuilder::new();
        let a = g.input("a", &[2, 3], false).unwrap();
        let b = g.input("b", &[4], false).unwrap();
        match g.add(a, b) {
            Err(TensorError::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_inputs_rejected() {
        let mut g = GraphBuilder::new();
        g.input("a", &[1], false).unwrap();
        assert!(matches!(g.input("a", &[1], false), Err(TensorError::DuplicateInput(_))));
    }

    #[test]
    fn grad_flags_propagate() {
        let mut g = GraphBuilder::new();
        let a = g.input("a", &[2], true).unwrap();
        let b = g.input("b", &[2], false).unwrap();
        let c = g.mul(a, b).unwrap();
        let d = g.detach(c).unwrap();
        let e = g.add(d, b).unwrap();
        let graph = g.build();
        assert!(graph.needs_grad[c.0]);
        assert!(!graph.needs_grad[d.0]);
        assert!(!graph.needs_grad[e.0]);
    }
}
