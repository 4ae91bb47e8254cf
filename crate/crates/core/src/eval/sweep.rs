use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::evaluate_task;
use crate::error::{Error, Result};
use crate::train::{run_training, task_for, ArchRef, TrainConfig};
use crate::zoo::{analyze, Arch};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "variant,budget_samples,params,macs,final_loss,zero_shot_acc,r_at_1,seed,status";
const CELL_RESULT: &str = "cell.json";

/// Variants × seen-sample budgets × seeds, all trained from one base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub variants: Vec<ArchRef>,
    pub budgets: Vec<u64>,
    /// Empty means the base config's seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub budget_samples: u64,
    pub params: u64,
    pub macs: u64,
    /// Eval-split contrastive loss at the end of training.
    pub final_loss: f64,
    pub zero_shot_acc: f64,
    pub r_at_1: f64,
    pub seed: u64,
    pub status: CellStatus,
}

/// One cell's fully resolved training config.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub arch: Arch,
    pub config: TrainConfig,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        let v: String = self
            .arch
            .name()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("{v}-b{}-s{}", self.config.total_samples, self.config.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct CellResult {
    config_digest: String,
    row: SweepRow,
}

/// Expands the grid in (variant, budget, seed) order and validates every
/// cell before anything trains.
pub fn sweep_cells(grid: &SweepGrid, base: &TrainConfig) -> Result<Vec<SweepCell>> {
    if grid.variants.is_empty() || grid.budgets.is_empty() {
        return Err(Error::Config("sweep grid needs at least one variant and one budget".into()));
    }
    let seeds = if grid.seeds.is_empty() { vec![base.seed] } else { grid.seeds.clone() };
    let archs = grid.variants.iter().map(|v| v.resolve()).collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = archs.iter().map(|a| a.name()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate sweep variant name {:?}", w[0])));
    }
    let mut cells = Vec::new();
    for a in &archs {
        for &budget in &grid.budgets {
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.image = ArchRef::Spec(a.clone());
                cfg.total_samples = budget;
                cfg.seed = seed;
                cfg.validate()
                    .map_err(|e| Error::Config(format!("cell {} / {budget} / seed {seed}: {e}", a.name())))?;
                cells.push(SweepCell {
                    arch: a.clone(),
                    config: cfg,
                });
            }
        }
    }
    Ok(cells)
}

fn run_cell(cell: &SweepCell, dir: &Path, resume: bool) -> Result<SweepRow> {
    let cfg = &cell.config;
    let cost = analyze(&cell.arch, cfg.image_size)?;
    let mut row = SweepRow {
        variant: cell.arch.name(),
        budget_samples: cfg.total_samples,
        params: cost.total_params,
        macs: cost.total_macs,
        final_loss: f64::NAN,
        zero_shot_acc: f64::NAN,
        r_at_1: f64::NAN,
        seed: cfg.seed,
        status: CellStatus::Failed,
    };
    match run_training::<f32>(cfg, dir, resume, |_| {}) {
        Ok(out) => {
            let m = evaluate_task(&out.state.model, &task_for(cfg)?, &cfg.eval, cfg.batch_size)?;
            row.final_loss = m.eval_loss;
            row.zero_shot_acc = m.zero_shot_acc;
            row.r_at_1 = m.r_at_1;
            row.status = if m.eval_loss.is_finite() { CellStatus::Ok } else { CellStatus::Failed };
        }
        Err(Error::Numeric(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Trains and evaluates every cell under `out/<cell>/`, then writes
/// `sweep.csv` and one SVG chart per metric.
///
/// Cells run one after another. A cell whose loss diverges is recorded as
/// `failed` and the sweep continues. With `resume`, cells that already have
/// a result for the same config are not retrained.
pub fn benchmark_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    out: &Path,
    resume: bool,
    mut on_cell: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(grid, base)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let dir = out.join(cell.dir_name());
        let digest = cell.config.digest()?;
        let result = dir.join(CELL_RESULT);
        let cached = if resume && result.exists() {
            let s = std::fs::read_to_string(&result).map_err(|e| Error::io(&result, e))?;
            serde_json::from_str::<CellResult>(&s)
                .ok()
                .filter(|c| c.config_digest == digest)
                .map(|c| c.row)
        } else {
            None
        };
        let row = match cached {
            Some(r) => r,
            None => {
                let r = run_cell(cell, &dir, resume)?;
                let body = serde_json::to_string_pretty(&CellResult {
                    config_digest: digest,
                    row: r.clone(),
                })
                .map_err(|e| Error::Parse(e.to_string()))?;
                std::fs::write(&result, body).map_err(|e| Error::io(&result, e))?;
                r
            }
        };
        on_cell(&row);
        rows.push(row);
    }
    write_sweep_csv(&rows, &out.join(SWEEP_CSV))?;
    render_plots(&rows, out)?;
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|x| x.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

type Curves = BTreeMap<String, Vec<(f64, f64)>>;

/// Per-variant (budget, seed-mean) points for one metric, ok cells only.
fn curves(rows: &[SweepRow], metric: fn(&SweepRow) -> f64) -> Curves {
    let mut acc: BTreeMap<(String, u64), (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == CellStatus::Ok) {
        let e = acc.entry((r.variant.clone(), r.budget_samples)).or_insert((0.0, 0));
        e.0 += metric(r);
        e.1 += 1;
    }
    let mut out = Curves::new();
    for ((v, b), (s, n)) in acc {
        out.entry(v).or_default().push((b as f64, s / n as f64));
    }
    out
}

pub const PLOT_METRICS: [&str; 3] = ["final_loss", "zero_shot_acc", "r_at_1"];

/// Writes `sweep_<metric>.svg` (metric vs budget, one line per variant).
pub fn render_plots(rows: &[SweepRow], out: &Path) -> Result<Vec<PathBuf>> {
    let getters: [fn(&SweepRow) -> f64; 3] = [|r| r.final_loss, |r| r.zero_shot_acc, |r| r.r_at_1];
    let mut files = Vec::new();
    for (name, get) in PLOT_METRICS.iter().zip(getters) {
        let path = out.join(format!("sweep_{name}.svg"));
        draw(&curves(rows, get), name, &path)?;
        files.push(path);
    }
    Ok(files)
}

fn draw(curves: &Curves, metric: &str, path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Parse(format!("plot {}: {e}", path.display()));
    let pts = curves.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (1.0, 10.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs seen samples"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 * 0.8..x1 * 1.25).log_scale(), y0 - pad..y1 + pad)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("seen samples")
        .y_desc(metric)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, (variant, line)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(line.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(variant.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(line.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}
