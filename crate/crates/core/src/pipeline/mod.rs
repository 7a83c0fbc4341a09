//! End-to-end orchestration: dataset assembly, training, evaluation,
//! inference, and reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod report;
pub mod sched;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Manifest, ManifestEntry, TrainConfig, CACHE_DIR_ENV};
pub use data::{load_dataset, Dataset, SEGMENT_LABEL_FRAMES, SEGMENT_SECONDS};
pub use evaluate::{evaluate, infer, infer_loaded};
pub use report::{report, ReportFiles};
pub use sched::lr_schedule;
pub use train::{train, EpochLog, TrainOutcome};
