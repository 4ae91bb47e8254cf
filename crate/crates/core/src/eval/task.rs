use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::retrieval::retrieval_recall_at_k;
use super::zero_shot::{classify_embeddings, ClassPromptSet};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::train::{Attributes, ClipModel, EvalConfig, Split, SynthTask};

/// One metric on one task, reproducible from `(model_digest, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub seed: u64,
    pub model_digest: String,
}

impl EvalReport {
    pub fn new(task: &str, metric: &str, value: f64, samples: usize, seed: u64, model_digest: &str) -> Result<Self> {
        let bounded = metric != "eval_loss";
        if !value.is_finite() || (bounded && !(0.0..=1.0).contains(&value)) || value < 0.0 {
            return Err(Error::Numeric(format!("{task}/{metric} = {value} is out of range")));
        }
        Ok(EvalReport {
            task: task.into(),
            metric: metric.into(),
            value,
            samples,
            seed,
            model_digest: model_digest.into(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Digest of every tensor in both towers and the logit scale.
pub fn model_digest<T: Scalar>(m: &ClipModel<T>) -> String {
    let mut h = Sha256::new();
    h.update(m.image.params.digest(""));
    h.update(m.text.params.digest(""));
    h.update(m.scale.digest(""));
    hex::encode(h.finalize())
}

/// The three headline numbers of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Contrastive loss on the eval split, eval mode.
    pub eval_loss: f64,
    /// Accuracy over the held-out attribute tuples.
    pub zero_shot_acc: f64,
    /// Image-to-text R@1 over one image per training tuple.
    pub r_at_1: f64,
}

fn class_name(a: Attributes) -> String {
    format!("s{}c{}p{}", a.shape, a.color, a.position)
}

/// Prompt set over `classes`, averaging `templates` caption orders.
pub fn synthetic_prompts<T: Scalar>(
    m: &ClipModel<T>,
    task: &SynthTask,
    classes: &[Attributes],
    templates: usize,
) -> Result<ClassPromptSet<T>> {
    let names = classes.iter().map(|&a| class_name(a)).collect();
    let prompts = classes
        .iter()
        .map(|&a| (0..templates).map(|t| task.caption_with(a, t)).collect())
        .collect();
    ClassPromptSet::build(&m.text, names, prompts)
}

/// Eval loss, zero-shot accuracy and R@1 of a trained pair on `task`.
pub fn evaluate_task<T: Scalar>(m: &ClipModel<T>, task: &SynthTask, cfg: &EvalConfig, batch_size: usize) -> Result<TaskMetrics> {
    let mut loss = 0.0;
    for i in 0..cfg.loss_batches {
        let b = task.batch::<T>(Split::Eval, (i * batch_size) as u64, batch_size)?;
        loss += m.eval_loss(&b)?;
    }
    let eval_loss = loss / cfg.loss_batches.max(1) as f64;

    let classes = task.holdout();
    let prompts = synthetic_prompts(m, task, &classes, cfg.templates)?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (k, &a) in classes.iter().enumerate() {
        for j in 0..cfg.zero_shot_per_class {
            samples.push(task.sample_of(a, Split::Holdout, j as u64));
            labels.push(k);
        }
    }
    let b = SynthTask::collate::<T>(task.image_size, samples)?;
    let zs = classify_embeddings(&m.image_embeddings(&b.images)?, &prompts, &labels)?;

    let tuples = task.train_tuples();
    let samples = tuples
        .iter()
        .enumerate()
        .map(|(i, &a)| task.sample_of(a, Split::Eval, i as u64))
        .collect();
    let b = SynthTask::collate::<T>(task.image_size, samples)?;
    let x = m.image_embeddings(&b.images)?;
    let y = m.text_embeddings(&b.tokens)?;
    let (r_at_1, _) = retrieval_recall_at_k(&x, &y, 1)?;
    Ok(TaskMetrics {
        eval_loss,
        zero_shot_acc: zs.accuracy,
        r_at_1,
    })
}

/// Reports for the three task metrics.
pub fn task_reports<T: Scalar>(
    m: &ClipModel<T>,
    task: &SynthTask,
    cfg: &EvalConfig,
    batch_size: usize,
    metrics: &TaskMetrics,
) -> Result<Vec<EvalReport>> {
    let d = model_digest(m);
    let zs_n = task.holdout().len() * cfg.zero_shot_per_class;
    Ok(vec![
        EvalReport::new("synthetic-eval", "eval_loss", metrics.eval_loss, cfg.loss_batches * batch_size, task.seed, &d)?,
        EvalReport::new("synthetic-holdout", "zero_shot_acc", metrics.zero_shot_acc, zs_n, task.seed, &d)?,
        EvalReport::new("synthetic-train-tuples", "r_at_1", metrics.r_at_1, task.train_tuples().len(), task.seed, &d)?,
    ])
}
