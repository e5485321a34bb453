//! Gradient verification against central finite differences.

use super::{Graph, Result, Tensor, TensorError, Value};

/// Compares the analytic gradient of `build` (a scalar-valued function of
/// one parameter tensor) against central differences with step `eps`.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_diff_check<F>(build: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &Value) -> Result<Value>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(TensorError::BadEps(eps));
    }

    // Analytic gradient via one recorded forward/backward.
    let graph = Graph::new();
    let leaf = graph.leaf(params.clone());
    let root = build(&graph, &leaf)?;
    if !root.tensor().is_scalar() {
        return Err(TensorError::NotScalarRoot(root.shape().to_vec()));
    }
    let analytic = match graph.backward(&root)?.of(&leaf) {
        Some(t) => t.data().to_vec(),
        // Function does not depend on the parameter: gradient is zero.
        None => vec![0.0; params.numel()],
    };

    let eval = |data: &[f64]| -> Result<f64> {
        let g = Graph::inference();
        let x = g.constant(Tensor::from_parts(params.shape().to_vec(), data.to_vec()));
        let y = build(&g, &x)?;
        y.tensor().item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        if !central.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" });
        }
        let denom = analytic[i].abs().max(central.abs()).max(1e-12);
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}
