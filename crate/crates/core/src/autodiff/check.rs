use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error between `grad` and central differences of `f` at
/// `x`, with denominator `max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Checks the reverse-mode gradient of the scalar built by `f` from a leaf
/// holding `x` against central differences.
pub fn grad_check(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>, h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone().with_grad());
    let loss = f(&mut g, leaf)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |v: &[f64]| -> f64 {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(x.shape(), v.to_vec()).expect("same shape"));
        let loss = f(&mut g, leaf).expect("forward succeeded once");
        g.value(loss).data()[0]
    };
    Ok(max_relative_error(eval, x.data(), &analytic, h))
}
