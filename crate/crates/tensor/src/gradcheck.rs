use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::session::Session;
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of `root` with respect to input `leaf`
/// against central finite differences with the given step.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check(graph: &Graph, inputs: &HashMap<String, Tensor>, root: NodeId, leaf: &str, step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step {step} outside (0, 1e-2]"
        )));
    }
    let spec = graph
        .input(leaf)
        .ok_or_else(|| TensorError::UnknownInput(leaf.to_string()))?;
    if !spec.requires_grad {
        return Err(TensorError::Invalid(format!(
            "input `{leaf}` does not require a gradient"
        )));
    }
    let mut session = Session::new(graph);
    session.forward(inputs.clone())?;
    let analytic = session.backward(root)?.remove(leaf).expect("leaf gradient");

    let eval = |values: HashMap<String, Tensor>| -> Result<f64> {
        let mut s = Session::new(graph);
        s.forward(values)?;
        Ok(s.value(root)?.item())
    };
    let base = inputs
        .get(leaf)
        .ok_or_else(|| TensorError::MissingInput(leaf.to_string()))?;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = inputs.clone();
        plus.get_mut(leaf).unwrap().data_mut()[i] += step;
        let mut minus = inputs.clone();
        minus.get_mut(leaf).unwrap().data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
