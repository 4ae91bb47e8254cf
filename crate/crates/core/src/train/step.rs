use indexmap::IndexMap;

use super::config::TrainConfig;
use super::data::Batch;
use super::loss::{clip_loss, initial_logit_scale, max_logit_scale};
use super::optim::{adamw_step, lr_at_step, AdamW, OptimizerState};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, Init, ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{build, Arch, ModelGraph, TextSpec};

pub const LOGIT_SCALE: &str = "logit_scale";

/// Image tower, text tower and the learnable logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel<T: Scalar> {
    pub image: ModelGraph<T>,
    pub text: ModelGraph<T>,
    pub scale: ParamStore<T>,
}

/// Graph handles for one forward pass of both towers.
pub struct Forward {
    pub image: Bound,
    pub text: Bound,
    pub scale: Bound,
    pub x: Var,
    pub y: Var,
    pub loss: Var,
}

impl<T: Scalar> ClipModel<T> {
    /// Logit scale store at its initial value.
    pub fn new_scale() -> Result<ParamStore<T>> {
        let spec = ParamSpec::new(LOGIT_SCALE.into(), vec![], Init::Const(initial_logit_scale()));
        ParamStore::from_specs(&[spec], 0)
    }

    /// Fresh towers; the text tower's seed is derived from `seed`.
    pub fn new(image: &Arch, image_size: usize, text: &TextSpec, seed: u64) -> Result<Self> {
        if image.embed_dim() != text.embed_dim {
            return Err(Error::Config(format!(
                "embed_dim mismatch: image tower {} vs text tower {}",
                image.embed_dim(),
                text.embed_dim
            )));
        }
        Ok(ClipModel {
            image: build(image, image_size, seed)?,
            text: build(&Arch::Text(text.clone()), text.context, seed.wrapping_add(0x7e57))?,
            scale: Self::new_scale()?,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.scale.get(LOGIT_SCALE).map(|t| t.item().as_f64()).unwrap_or(f64::NAN)
    }

    pub fn text_frozen(&self) -> bool {
        self.text.params.iter().all(|(_, p)| p.frozen)
    }

    /// Builds normalized embeddings and the loss on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        image_ctx: &mut Ctx,
        text_ctx: &mut Ctx,
    ) -> Result<Forward> {
        let bi = self.image.params.bind(g);
        let bt = self.text.params.bind(g);
        let bs = self.scale.bind(g);
        let imgs = g.constant(batch.images.clone());
        let x = self.image.image_forward(g, &bi, imgs, image_ctx)?;
        let y = self.text.text_forward(g, &bt, &batch.tokens, text_ctx)?;
        let x = g.l2_normalize(x)?;
        let y = g.l2_normalize(y)?;
        let loss = clip_loss(g, x, y, bs.var(LOGIT_SCALE)?)?;
        Ok(Forward {
            image: bi,
            text: bt,
            scale: bs,
            x,
            y,
            loss,
        })
    }

    /// Eval-mode loss on one batch.
    pub fn eval_loss(&self, batch: &Batch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, &mut Ctx::eval(), &mut Ctx::eval())?;
        Ok(g.value(f.loss).item().as_f64())
    }

    /// Normalized eval-mode image embeddings `[N, D]`.
    pub fn image_embeddings(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.image.params.bind(&mut g);
        let x = g.constant(images.clone());
        let e = self.image.image_forward(&mut g, &b, x, &mut Ctx::eval())?;
        let e = g.l2_normalize(e)?;
        Ok(g.value(e).clone())
    }

    /// Normalized eval-mode text embeddings `[N, D]`.
    pub fn text_embeddings(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.text.params.bind(&mut g);
        let e = self.text.text_forward(&mut g, &b, tokens, &mut Ctx::eval())?;
        let e = g.l2_normalize(e)?;
        Ok(g.value(e).clone())
    }
}

/// Model plus optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: ClipModel<T>,
    pub opt_image: OptimizerState<T>,
    pub opt_text: OptimizerState<T>,
    pub opt_scale: OptimizerState<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ClipModel<T>) -> Self {
        TrainState {
            opt_image: OptimizerState::new(&model.image.params),
            opt_text: OptimizerState::new(&model.text.params),
            opt_scale: OptimizerState::new(&model.scale),
            model,
            step: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let model = ClipModel::new(&cfg.image_arch()?, cfg.image_size, &cfg.text, cfg.seed)?;
        Ok(Self::new(model))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

fn collect<T: Scalar>(g: &mut Graph<T>, b: &Bound, store: &ParamStore<T>) -> IndexMap<String, Tensor<T>> {
    let mut out = IndexMap::new();
    for (name, p) in store.iter() {
        if p.frozen {
            continue;
        }
        if let Ok(v) = b.var(name) {
            if let Some(t) = g.take_grad(v) {
                out.insert(name.to_string(), t);
            }
        }
    }
    out
}

fn sq_norm<T: Scalar>(m: &IndexMap<String, Tensor<T>>) -> f64 {
    m.values().map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum()
}

/// Stochastic-depth seed for one tower at one step.
fn step_seed(seed: u64, step: u64, tower: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ tower
}

/// Forward both towers, normalize, contrastive loss, backward, AdamW at the
/// scheduled rate, then clamp the logit scale. On a non-finite loss or
/// gradient the state is left untouched.
pub fn train_step<T: Scalar>(st: &mut TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<StepStats> {
    let total = cfg.total_steps();
    let next = st.step + 1;
    let lr = lr_at_step(cfg.lr, cfg.warmup_steps, total, next.min(total))?;
    let mut g = Graph::new();
    let mut ictx = Ctx::train(step_seed(cfg.seed, st.step, 1), cfg.drop_path);
    let mut tctx = if st.model.text_frozen() {
        Ctx::eval()
    } else {
        Ctx::train(step_seed(cfg.seed, st.step, 2), cfg.drop_path)
    };
    let f = st.model.forward(&mut g, batch, &mut ictx, &mut tctx)?;
    let loss = g.value(f.loss).item().as_f64();
    let fail = |what: &str, gn: f64| {
        Error::Numeric(format!(
            "non-finite {what} at step {next} (lr {lr:e}, grad-norm {gn:e}, logit scale {:.4})",
            st.model.logit_scale()
        ))
    };
    if !loss.is_finite() {
        return Err(fail("loss", f64::NAN));
    }
    g.backward(f.loss)?;
    let gi = collect(&mut g, &f.image, &st.model.image.params);
    let gt = collect(&mut g, &f.text, &st.model.text.params);
    let gs = collect(&mut g, &f.scale, &st.model.scale);
    let grad_norm = (sq_norm(&gi) + sq_norm(&gt) + sq_norm(&gs)).sqrt();
    if !grad_norm.is_finite() {
        return Err(fail("gradient", grad_norm));
    }
    let opt = AdamW {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    adamw_step(&mut st.model.image.params, &gi, &mut st.opt_image, lr, &opt)?;
    adamw_step(&mut st.model.text.params, &gt, &mut st.opt_text, lr, &opt)?;
    adamw_step(&mut st.model.scale, &gs, &mut st.opt_scale, lr, &opt)?;
    let s = st.model.logit_scale();
    if s > max_logit_scale() {
        st.model.scale.set(LOGIT_SCALE, Tensor::scalar(T::of_f64(max_logit_scale())))?;
    }
    st.step = next;
    Ok(StepStats {
        step: next,
        lr,
        loss,
        grad_norm,
    })
}
