use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId, Op};
use crate::ops::{self, Ctx};
use crate::tensor::Tensor;

/// Numerical guard that fired during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// A denominator was raised to `EPS_DIV`.
    ClampedDenominator,
    /// A square-root argument was raised to `EPS_DIV`.
    ClampedSqrt,
    /// Interpolation knots closer than `EPS_DIV`.
    NarrowInterpolationCell,
    /// A warp row was blended toward the identity.
    WarpRamp,
    /// A warp row had (almost) no range and became the identity.
    DegenerateWarp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub node: usize,
    pub kind: DiagnosticKind,
    /// Number of affected entries (or rows, for warp guards).
    pub count: usize,
}

/// Per-channel statistics a training-mode batch-norm node computed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub node: usize,
    /// Number of values each channel was averaged over.
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

/// One evaluation of a [`Graph`]: forward values, then optional reverse pass.
pub struct Session<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
    diagnostics: Vec<Diagnostic>,
    stats: Vec<BatchStats>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Self {
            graph,
            values: Vec::new(),
            diagnostics: Vec::new(),
            stats: Vec::new(),
        }
    }

    /// Evaluates every node. Inputs must match the declared names and shapes.
    pub fn forward(&mut self, mut inputs: HashMap<String, Tensor>) -> Result<()> {
        if let Some(name) = inputs.keys().find(|k| self.graph.input(k).is_none()) {
            return Err(TensorError::UnknownInput(name.clone()));
        }
        self.diagnostics.clear();
        self.stats.clear();
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.graph.nodes.len());
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(k) => {
                    let spec = &self.graph.inputs[*k];
                    let t = inputs
                        .remove(&spec.name)
                        .ok_or_else(|| TensorError::MissingInput(spec.name.clone()))?;
                    if t.shape() != spec.shape.as_slice() {
                        return Err(TensorError::InputShape {
                            name: spec.name.clone(),
                            expected: spec.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    if !t.all_finite() {
                        return Err(TensorError::NonFinite { node: i, op: "input" });
                    }
                    t
                }
                Op::Constant(t) => t.clone(),
                op => {
                    let ins: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&j| values[j].as_ref().expect("topological order"))
                        .collect();
                    let mut ctx = Ctx {
                        node: i,
                        diagnostics: &mut self.diagnostics,
                        stats: &mut self.stats,
                    };
                    ops::forward(op, &ins, &node.shape, &mut ctx)?
                }
            };
            values.push(Some(value));
        }
        self.values = values;
        Ok(())
    }

    fn evaluated(&self) -> Result<()> {
        if self.values.len() != self.graph.nodes.len() {
            return Err(TensorError::NotEvaluated);
        }
        Ok(())
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.evaluated()?;
        self.values
            .get(node.0)
            .and_then(Option::as_ref)
            .ok_or(TensorError::UnknownNode(node.0))
    }

    /// Value of a node registered with [`crate::GraphBuilder::output`].
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let node = self
            .graph
            .output(name)
            .ok_or_else(|| TensorError::Invalid(format!("no output named {name}")))?;
        self.value(node)
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }

    /// Reverse-mode pass from a scalar node. Returns the gradient for every
    /// input declared with `requires_grad`, keyed by input name.
    pub fn backward(&self, root: NodeId) -> Result<HashMap<String, Tensor>> {
        self.evaluated()?;
        let nodes = &self.graph.nodes;
        if root.0 >= nodes.len() {
            return Err(TensorError::UnknownNode(root.0));
        }
        if nodes[root.0].shape != [1] {
            return Err(TensorError::NonScalarRoot {
                node: root.0,
                shape: nodes[root.0].shape.clone(),
            });
        }
        let needs = &self.graph.needs_grad;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if needs[root.0] {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Input(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| self.values[j].as_ref().unwrap()).collect();
            let want: Vec<bool> = node.inputs.iter().map(|&j| needs[j]).collect();
            let out = self.values[i].as_ref().unwrap();
            let pieces = ops::backward(&node.op, &ins, out, &g, &want);
            for (k, piece) in pieces.into_iter().enumerate() {
                let j = node.inputs[k];
                let Some(piece) = piece else { continue };
                if !needs[j] {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(piece.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(piece),
                }
            }
        }
        let mut out = HashMap::new();
        for spec in &self.graph.inputs {
            if !spec.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(spec.node.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(&spec.shape));
            if !g.all_finite() {
                return Err(TensorError::NonFinite {
                    node: spec.node.0,
                    op: "gradient",
                });
            }
            out.insert(spec.name.clone(), g);
        }
        Ok(out)
    }
}
