//! Experiment orchestration: configuration, training, metrics, persistence.

pub mod checkpoint;
mod config;
mod experiment;
pub mod export;
mod metrics;
mod trainer;

pub use config::{Ablation, Selection, TrainConfig};
pub use metrics::{metrics_csv, MetricsReport};
pub use trainer::{architecture, encode_all, EmbeddingRow, EpochLog, RunOutcome, StepLosses, TrainState, Trainer};
pub use experiment::{
    cache_tag, grid_csv, load_or_generate, run_ablation_grid, run_experiment, Artifacts, GridRow, CHECKPOINT_FILE,
    EMBEDDINGS_FILE, METRICS_FILE,
};
