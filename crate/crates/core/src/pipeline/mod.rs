//! End-to-end orchestration: configuration, the staged pipeline,
//! evaluation and report emission.

mod castle;
mod config;
mod evaluate;
mod report;

pub use castle::{load_corpus, prepare, run_castle, run_variant, train_lm, CastleRun, Prepared, RunLock, Stage};
pub use config::{apply_override, LmConfig, RunConfig, Variant};
pub use evaluate::{evaluate_model, Evaluation};
pub use report::{
    emit_comparison, emit_report, ExperimentReport, OfflineRow, OnlineSummary, StageReport, Timing, REPORT_FILE, STAGES_FILE,
    TIMING_FILE,
};
