use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, in double precision.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`. The point
/// must stay clear of kinks (ReLU zeros, top-K ties) by more than `eps`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
