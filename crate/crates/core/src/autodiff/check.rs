//! Central finite-difference oracle for gradient checks.

use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference estimate of ∂output/∂leaf, obtained by perturbing each
/// coordinate of `leaf` and replaying the tape. The leaf is restored and the
/// tape replayed before returning.
pub fn numeric_gradient(graph: &mut Graph, output: Var, leaf: Var, step: f64) -> Result<Tensor> {
    let original = graph.value(leaf).clone();
    let mut grad = Vec::with_capacity(original.numel());
    for j in 0..original.numel() {
        let mut probe = original.clone();
        probe.data_mut()[j] = original.data()[j] + step;
        graph.set_leaf(leaf, probe.clone())?;
        graph.replay()?;
        let plus = graph.value(output).item();
        probe.data_mut()[j] = original.data()[j] - step;
        graph.set_leaf(leaf, probe)?;
        graph.replay()?;
        let minus = graph.value(output).item();
        grad.push((plus - minus) / (2.0 * step));
    }
    graph.set_leaf(leaf, original.clone())?;
    graph.replay()?;
    Tensor::new(original.shape().to_vec(), grad)
}

/// Largest coordinate-wise `|analytic − numeric| / (|analytic| + 1e-8)`
/// between the tape gradient and the central-difference estimate.
pub fn finite_diff_check(graph: &mut Graph, output: Var, wrt: Var, step: f64) -> Result<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = graph.grad(output, &[wrt], false)?[0];
    let analytic = graph.value(analytic).clone();
    let numeric = numeric_gradient(graph, output, wrt, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max))
}
