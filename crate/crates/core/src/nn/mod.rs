//! Parameter storage and the building blocks of the image and text towers.

mod blocks;
mod check;
mod params;

pub use blocks::{
    Attention, ConvNeXtBlock, Downsample, Ffn, FfnKind, MbConv, MbConvNorm, Patchify, Stem, TransformerBlock,
};
pub use check::block_grad_check;
pub(crate) use blocks::{conv_forward, conv_param_specs, linear, norm_param_specs, token_norm};
pub use params::{Bound, Init, Param, ParamSpec, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

/// Per-forward state: training flag, stochastic-depth rate and its RNG.
pub struct Ctx {
    pub train: bool,
    /// Rate reached by the deepest residual block of a tower.
    pub drop_path: f64,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            drop_path: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64, drop_path: f64) -> Self {
        Ctx {
            train: true,
            drop_path,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Drops the whole residual `branch` per sample with probability `rate`,
    /// rescaling survivors by `1/(1-rate)`. Identity outside training.
    pub fn drop_path<T: Scalar>(&mut self, g: &mut Graph<T>, branch: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(branch);
        }
        let shape = g.shape(branch).to_vec();
        let keep = 1.0 - rate;
        let mut mask_shape = vec![1; shape.len()];
        mask_shape[0] = shape[0];
        let mask = Tensor::from_fn(mask_shape, |_| {
            if self.rng.gen::<f64>() < keep {
                T::of_f64(1.0 / keep)
            } else {
                T::zero()
            }
        });
        let m = g.constant(mask);
        g.mul(branch, m)
    }
}

/// Linear drop-path schedule: block `i` of `n` gets `rate * i / (n - 1)`.
pub fn drop_path_schedule(rate: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| rate * i as f64 / (n - 1) as f64).collect()
}

/// Parameter count of a spec list (buffers excluded).
pub fn count_specs(specs: &[ParamSpec]) -> u64 {
    specs.iter().filter(|s| !s.buffer).map(|s| s.numel() as u64).sum()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests;
