//! Training loops, optimizer, schedules, checkpoints and memory accounting.

mod checkpoint;
mod config;
mod memory;
mod optim;
mod run;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DType, Tensor, MAGIC, VERSION};
pub use config::{AdapterInit, DowncastKind, TrainConfig};
pub use memory::{layer_memory, memory_report, MemoryMode, MemoryReport, MemoryRow, ModeMemory};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamW, OptimState};
pub use run::{
    ablate_downcast, ablate_rank, build_lrqat_model, build_lsq_model, evaluate, fuse_model,
    rtn_model, run_lrqat, run_lsq, run_pretrain, run_rtn, write_metrics_csv, AblationRow,
    QatOutcome, RtnReport, RtnRow, RunReport, StepMetric,
};
pub use state::{load_model, model_from_checkpoint, model_to_checkpoint, save_model};
