use crate::error::{GraphError, Result};
use crate::{Graph, NodeId, Tensor};

/// `|a - b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn central_difference<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut out = Tensor::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, &x0) in x.indexed_iter() {
        probe[idx] = x0 + eps;
        let hi = f(&probe)?;
        probe[idx] = x0 - eps;
        let lo = f(&probe)?;
        probe[idx] = x0;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(GraphError::NumericFailure(format!(
                "non-finite function value near coordinate {idx:?}"
            )));
        }
        out[idx] = (hi - lo) / (2.0 * eps);
    }
    Ok(out)
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `eps` and returns the largest per-coordinate
/// [`relative_error`].
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    if !g.scalar(y).is_finite() {
        return Err(GraphError::NumericFailure("non-finite function value".into()));
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.dim()));
    if analytic.iter().any(|a| !a.is_finite()) {
        return Err(GraphError::NumericFailure("non-finite analytic gradient".into()));
    }
    let numeric = central_difference(
        |p| {
            let mut g = Graph::new();
            let xv = g.constant(p.clone());
            let y = f(&mut g, xv)?;
            Ok(g.scalar(y))
        },
        x,
        eps,
    )?;
    Ok(analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
