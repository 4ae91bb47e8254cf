use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, ParamSpec};
use crate::autograd::{grad_check, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference check of a block's gradients w.r.t. its input and every
/// trainable tensor, all drawn at random from `seed`.
///
/// Gradients that are identically zero (e.g. key biases under softmax) leave
/// only roundoff in the numeric estimate, hence the absolute floor of 1e-4.
///
/// Buffers enter as constants with positive values (they stand in for
/// running variances and means).
pub fn block_grad_check<F>(specs: &[ParamSpec], x_shape: &[usize], seed: u64, eps: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn(x_shape.to_vec(), 1.0, &mut rng);
    let mut inputs = vec![x];
    let mut names = Vec::new();
    let mut buffers = Vec::new();
    for s in specs {
        if s.buffer {
            let t = Tensor::<f64>::from_fn(s.shape.clone(), |_| 0.5 + rng.gen::<f64>());
            buffers.push((s.name.clone(), t));
        } else {
            let std = 0.5 + rng.gen::<f64>() * 0.5;
            inputs.push(Tensor::randn(s.shape.clone(), std, &mut rng));
            names.push(s.name.clone());
        }
    }
    grad_check(
        |g, v| {
            let mut pairs: Vec<(String, Var)> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            for (n, t) in &buffers {
                pairs.push((n.clone(), g.constant(t.clone())));
            }
            let b = Bound::from_pairs(pairs);
            forward(g, &b, v[0])
        },
        &inputs,
        eps,
        1e-4,
        seed ^ 0x9e37_79b9,
    )
}
