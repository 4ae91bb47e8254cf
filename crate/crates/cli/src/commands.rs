use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};
use vitamin_core::eval::{
    benchmark_sweep, evaluate_task, sweep_cells, task_reports, CellStatus, SweepGrid, PLOT_METRICS, SWEEP_CSV,
};
use vitamin_core::train::{
    load_checkpoint, run_training, task_for, TrainConfig, CHECKPOINT_FILE, FORMAT_VERSION, METRICS_FILE,
};
use vitamin_core::zoo::{analyze as cost_of, default_input, Arch};
use vitamin_core::{Error, Result};

use crate::overrides;
use crate::{AnalyzeArgs, EvalArgs, SweepArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const COST_FILE: &str = "cost.csv";
pub const REPORT_FILE: &str = "eval_report.json";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_digest: String,
    /// The merged config (file, then flags) as TOML.
    pub effective_config: String,
}

impl Manifest {
    fn new(command: &str, seed: Option<u64>, config_digest: String, effective_config: String) -> Self {
        Manifest {
            tool: "vitamin".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: FORMAT_VERSION.into(),
            command: command.into(),
            seed,
            config_digest,
            effective_config,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&p, body + "\n").map_err(|e| io(&p, e))
    }
}

fn io(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let s = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    toml::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Parse(e.to_string()))
}

/// Makes `dir` ready for writing. An existing non-empty directory is only
/// accepted with `resume`, or with `force`, which removes the listed
/// artifacts (and nothing else).
fn prepare_out(dir: &Path, resume: bool, force: bool, owned: &[String]) -> Result<()> {
    let busy = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .next()
            .is_some();
    if busy && !resume {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --resume to continue or --force to replace its artifacts",
                dir.display()
            )));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| io(&p, e))?;
            } else if p.exists() {
                std::fs::remove_file(&p).map_err(|e| io(&p, e))?;
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn resolve_arch(a: &AnalyzeArgs) -> Result<Arch> {
    match (&a.variant, &a.spec) {
        (Some(n), _) => Arch::named(n),
        (None, Some(p)) => {
            let s = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            Arch::from_toml(&s)
        }
        (None, None) => Err(Error::Config("pass --variant or --spec".into())),
    }
}

pub fn analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let arch = resolve_arch(a)?;
    let input = a.input.unwrap_or_else(|| default_input(&arch));
    let report = cost_of(&arch, input)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        prepare_out(out, false, a.force, &[COST_FILE.into(), MANIFEST_FILE.into()])?;
        let p = out.join(COST_FILE);
        std::fs::write(&p, report.to_csv()?).map_err(|e| io(&p, e))?;
        let cfg = format!("input = {input}\n\n[arch]\n{}", arch.to_toml()?);
        let digest = vitamin_core::train::sha256_hex(cfg.as_bytes());
        Manifest::new("analyze", None, digest, cfg).write(out)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Training config from a file plus `--seed`, `--set` and extra assignments.
fn train_config(path: &Path, seed: Option<u64>, sets: &[String], extra: &[String]) -> Result<TrainConfig> {
    let mut doc = read_table(path)?;
    overrides::apply(&mut doc, sets)?;
    overrides::apply(&mut doc, extra)?;
    if let Some(s) = seed {
        doc.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    TrainConfig::from_toml(&to_toml(&doc)?)
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let r = &a.run;
    let mut extra = Vec::new();
    if a.ltt {
        let p = a.text_ckpt.as_ref().expect("clap enforces --text-ckpt");
        extra.push("ltt.enabled=true".to_string());
        extra.push(format!("ltt.text_checkpoint={}", toml::Value::String(p.display().to_string())));
    }
    let cfg = train_config(&r.config, r.seed, &r.set, &extra)?;
    let owned = [METRICS_FILE, CHECKPOINT_FILE, MANIFEST_FILE, REPORT_FILE].map(String::from);
    prepare_out(&r.out, r.resume, r.force, &owned)?;
    Manifest::new("train", Some(cfg.seed), cfg.digest()?, cfg.to_toml()?).write(&r.out)?;
    log::info!(
        "training {} for {} steps (batch {}) into {}",
        cfg.image_arch()?.name(),
        cfg.total_steps(),
        cfg.batch_size,
        r.out.display()
    );
    let every = cfg.log_every.max(1);
    let out = run_training::<f32>(&cfg, &r.out, r.resume, |s| {
        if s.step % every == 0 {
            log::info!("step {:>6}  loss {:.4}  lr {:.2e}  grad-norm {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        } else {
            log::debug!("step {:>6}  loss {:.4}", s.step, s.loss);
        }
    })?;
    let last = out.last.map(|s| format!("{:.4}", s.loss)).unwrap_or_else(|| "n/a".into());
    println!(
        "trained {} steps, final loss {last}, checkpoint {}",
        out.state.step,
        out.checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let ck = load_checkpoint::<f32>(&a.checkpoint)?;
    let cfg = train_config(&a.config, a.seed, &a.set, &[])?;
    let model = &ck.state.model;
    if model.image.input_size != cfg.image_size {
        return Err(Error::Config(format!(
            "checkpoint image tower takes {0}x{0} inputs but the task renders {1}x{1}",
            model.image.input_size, cfg.image_size
        )));
    }
    if model.text.arch != Arch::Text(cfg.text.clone()) {
        return Err(Error::Config("checkpoint text tower differs from the config's [text] section".into()));
    }
    let task = task_for(&cfg)?;
    let metrics = evaluate_task(model, &task, &cfg.eval, cfg.batch_size)?;
    let reports = task_reports(model, &task, &cfg.eval, cfg.batch_size, &metrics)?;
    let dir: PathBuf = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let p = dir.join(REPORT_FILE);
    let body = serde_json::to_string_pretty(&reports).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&p, body + "\n").map_err(|e| io(&p, e))?;
    println!(
        "eval_loss {:.4}  zero_shot_acc {:.4}  r_at_1 {:.4}  ({})",
        metrics.eval_loss,
        metrics.zero_shot_acc,
        metrics.r_at_1,
        p.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// `[base]` training config plus `[grid]`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub grid: SweepGrid,
}

fn sweep_config(a: &SweepArgs) -> Result<SweepConfig> {
    let r = &a.run;
    let mut doc = read_table(&r.config)?;
    overrides::apply(&mut doc, &r.set)?;
    if let Some(s) = r.seed {
        overrides::apply(&mut doc, &[format!("base.seed={s}")])?;
    }
    // each cell sets its own image tower and budget; the base may omit them
    let first = |key: &str| {
        doc.get("grid")
            .and_then(|g| g.get(key))
            .and_then(|b| b.as_array())
            .and_then(|b| b.first())
            .cloned()
    };
    let defaults = [("total_samples", first("budgets")), ("image", first("variants"))];
    if let Some(base) = doc.get_mut("base").and_then(|b| b.as_table_mut()) {
        for (key, v) in defaults {
            if let Some(v) = v {
                base.entry(key).or_insert(v);
            }
        }
    }
    toml::from_str(&to_toml(&doc)?).map_err(|e| Error::Parse(format!("{}: {e}", r.config.display())))
}

pub fn sweep(a: &SweepArgs) -> Result<ExitCode> {
    let r = &a.run;
    let sc = sweep_config(a)?;
    let cells = sweep_cells(&sc.grid, &sc.base)?;
    let mut owned: Vec<String> = cells.iter().map(|c| c.dir_name()).collect();
    owned.push(SWEEP_CSV.into());
    owned.push(MANIFEST_FILE.into());
    owned.extend(PLOT_METRICS.iter().map(|m| format!("sweep_{m}.svg")));
    prepare_out(&r.out, r.resume, r.force, &owned)?;
    let effective = to_toml(&sc)?;
    let digest = vitamin_core::train::sha256_hex(effective.as_bytes());
    Manifest::new("sweep", Some(sc.base.seed), digest, effective).write(&r.out)?;
    log::info!("sweep: {} cells into {}", cells.len(), r.out.display());
    let rows = benchmark_sweep(&sc.grid, &sc.base, &r.out, r.resume, |row| {
        log::info!(
            "{} @ {} seed {}: {:?} loss {:.4} zero-shot {:.3} R@1 {:.3}",
            row.variant,
            row.budget_samples,
            row.seed,
            row.status,
            row.final_loss,
            row.zero_shot_acc,
            row.r_at_1
        );
    })?;
    let ok = rows.iter().filter(|r| r.status == CellStatus::Ok).count();
    println!("{ok}/{} cells ok, results in {}", rows.len(), r.out.join(SWEEP_CSV).display());
    Ok(if ok > 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
