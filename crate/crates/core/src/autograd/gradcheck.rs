//! Finite-difference verification of the reverse sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparison for one input tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

fn reduce(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = reduce(&mut g, out, weights)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients of `sum(w * build(inputs))` (with fixed random
/// weights `w`) against central differences with step `eps`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, floor, 1e-3 * s)`
/// where `s` is the largest numeric gradient magnitude in that tensor. Entries
/// far below the tensor's own scale are dominated by finite-difference
/// roundoff, so they are judged against that scale instead of themselves.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64, floor: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::<f64>::randn(g.shape(out).to_vec(), 1.0, &mut rng);
    let loss = reduce(&mut g, out, &weights)?;
    g.backward(loss)?;

    let mut checks = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = match g.grad(*v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut check = TensorCheck {
            input: i,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
        };
        let mut numeric_all = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&build, &probe, &weights)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&build, &probe, &weights)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at input {i} element {j}")));
            }
            if !analytic[j].is_finite() {
                return Err(Error::Numeric(format!("non-finite analytic gradient for input {i} element {j}")));
            }
            numeric_all.push(numeric);
        }
        let scale = numeric_all.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (j, &numeric) in numeric_all.iter().enumerate() {
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor).max(1e-3 * scale);
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = j;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport { checks })
}
