//! Central finite-difference gradient checks in 64-bit.
//!
//! Non-scalar outputs are reduced with fixed pseudo-random weights so every
//! output element contributes to the checked gradient.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

fn reduction_weights(n: usize) -> Vec<f64> {
    // Deterministic values in [-1, 1], never zero.
    (0..n)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            if x < 0.5 {
                -0.25 - 1.5 * x
            } else {
                0.25 + 1.5 * (x - 0.5)
            }
        })
        .collect()
}

fn weighted_output<F>(
    inputs: &[Tensor<f64>],
    build: &F,
    grad: bool,
) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = if grad {
        Graph::new()
    } else {
        Graph::inference()
    };
    let leaves = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &leaves)?;
    let w = Tensor::new(
        g.value(out).shape().to_vec(),
        reduction_weights(g.value(out).numel()),
    )?;
    let w = g.constant(w)?;
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, leaves, loss))
}

/// Compares autodiff gradients of every input element against central
/// differences with step `h`. The reported relative error for one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (mut g, leaves, loss) = weighted_output(inputs, &build, true)?;
    g.backward(loss)?;
    let mut report = GradReport::default();
    let mut perturbed = inputs.to_vec();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for e in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[e];
            perturbed[which].data_mut()[e] = x0 + h;
            let plus = eval(&perturbed, &build)?;
            perturbed[which].data_mut()[e] = x0 - h;
            let minus = eval(&perturbed, &build)?;
            perturbed[which].data_mut()[e] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    if !report.max_rel_err.is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    Ok(report)
}

fn eval<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, loss) = weighted_output(inputs, build, false)?;
    Ok(g.value(loss).data()[0])
}
