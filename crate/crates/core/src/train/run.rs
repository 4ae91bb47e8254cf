use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_checkpoint, ltt_init, save_checkpoint};
use super::config::TrainConfig;
use super::data::{Split, SynthTask};
use super::step::{train_step, StepStats, TrainState};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::zoo::build;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.vtc";
pub const METRICS_HEADER: &str = "step,seen_samples,lr,loss,grad_norm,wall_time";

pub fn task_for(cfg: &TrainConfig) -> Result<SynthTask> {
    SynthTask::new(cfg.seed, cfg.data.n_values, cfg.image_size, cfg.data.context, cfg.data.noise)
}

/// Initial state: fresh towers, or a fresh image tower against a frozen
/// pretrained text tower when LTT is on.
pub fn initial_state<T: Scalar>(cfg: &TrainConfig) -> Result<TrainState<T>> {
    if !cfg.ltt.enabled {
        return TrainState::from_config(cfg);
    }
    let path = cfg
        .ltt
        .text_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("ltt.enabled needs ltt.text_checkpoint".into()))?;
    let ck = load_checkpoint::<T>(path)?;
    let t = ck.state.model.text.arch.clone();
    if let crate::zoo::Arch::Text(ts) = &t {
        if *ts != cfg.text {
            return Err(Error::Config(format!(
                "text tower in {} differs from the configured one (checkpoint embed_dim {}, config {})",
                path.display(),
                ts.embed_dim,
                cfg.text.embed_dim
            )));
        }
    }
    let image = build(&cfg.image_arch()?, cfg.image_size, cfg.seed)?;
    ltt_init(image, &ck)
}

/// Keeps the header and rows with `step <= upto`.
fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut keep = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
        if i == 0 || step.is_some_and(|s| s <= upto) {
            keep.push(line);
        }
    }
    let mut body = keep.join("\n");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub struct RunOutcome<T: Scalar> {
    pub state: TrainState<T>,
    /// Last logged training step statistics.
    pub last: Option<StepStats>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains to the configured budget inside `dir`, writing `metrics.csv` and
/// `checkpoint.vtc`. With `resume`, continues from the checkpoint in `dir`
/// (which must come from the same config).
///
/// On a non-finite loss the untouched pre-step state is saved as the
/// checkpoint before the error is returned.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    dir: &Path,
    resume: bool,
    mut on_step: impl FnMut(&StepStats),
) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = cfg.digest()?;
    let metrics = dir.join(METRICS_FILE);
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut st: TrainState<T> = if resume && ckpt.exists() {
        let ck = load_checkpoint(&ckpt)?;
        if ck.config_digest != digest {
            return Err(Error::Config(format!(
                "{} was written by a different config (digest {}, current {digest})",
                ckpt.display(),
                ck.config_digest
            )));
        }
        if metrics.exists() {
            truncate_metrics(&metrics, ck.state.step)?;
        }
        ck.state
    } else {
        initial_state(cfg)?
    };
    if st.step == 0 || !metrics.exists() {
        std::fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
    }
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let task = task_for(cfg)?;
    let total = cfg.total_steps();
    let bs = cfg.batch_size;
    let start = Instant::now();
    let mut last = None;
    while st.step < total {
        let batch = task.batch::<T>(Split::Train, st.step * bs as u64, bs)?;
        let stats = match train_step(&mut st, &batch, cfg) {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                save_checkpoint(&st, &digest, &ckpt)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        on_step(&stats);
        if stats.step % cfg.log_every.max(1) == 0 || stats.step == total {
            let wall = if cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
            writeln!(
                log,
                "{},{},{},{},{},{}",
                stats.step,
                stats.step * bs as u64,
                stats.lr,
                stats.loss,
                stats.grad_norm,
                wall
            )
            .map_err(|e| Error::io(&metrics, e))?;
            last = Some(stats);
        }
        if cfg.checkpoint_every > 0 && stats.step % cfg.checkpoint_every == 0 && stats.step < total {
            save_checkpoint(&st, &digest, &ckpt)?;
        }
    }
    save_checkpoint(&st, &digest, &ckpt)?;
    Ok(RunOutcome {
        state: st,
        last,
        metrics,
        checkpoint: ckpt,
    })
}
