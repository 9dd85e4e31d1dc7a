//! Synthetic detection task, toy backbone, training loop, ablation matrix and
//! attention dumps.

mod ablation;
pub mod checkpoint;
mod dump;
pub mod image;
mod model;
mod scene;
mod train;

pub use ablation::{ablation_matrix, AblationCell, AblationReport, SeedRun, REFERENCE_DELTAS};
pub use dump::{dump_attention, level_map_image, DumpSummary};
pub use model::{Detector, Forward, ToyBackbone};
pub use scene::{gen_scene, Pattern, SyntheticScene, MAX_RECTS, MAX_SIDE, MIN_SIDE};
pub use train::{
    derive_seed, evaluate, metrics_csv, train, MetricRow, TrainConfig, TrainResult,
    DEFAULT_EVAL_SEED,
};
