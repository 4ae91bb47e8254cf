//! Zero-shot classification, retrieval recall, sliding-window features and
//! the architecture × data-scale sweep.

mod retrieval;
mod sweep;
mod task;
mod window;
mod zero_shot;

pub use retrieval::retrieval_recall_at_k;
pub use sweep::{
    benchmark_sweep, read_sweep_csv, render_plots, sweep_cells, write_sweep_csv, CellStatus, SweepCell, SweepGrid,
    SweepRow, PLOT_METRICS, SWEEP_CSV, SWEEP_HEADER,
};
pub use task::{evaluate_task, model_digest, synthetic_prompts, task_reports, EvalReport, TaskMetrics};
pub use window::{sliding_window_extract, token_stride};
pub use zero_shot::{classify_embeddings, similarity, zero_shot_classify, ClassPromptSet, ZeroShot};

#[cfg(test)]
mod tests;
