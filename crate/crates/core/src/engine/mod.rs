//! Training loop, schedule, augmentation, checkpoints, ablations and attention
//! visualisation.

pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod schedule;
pub mod train;
pub mod visualize;

pub use ablate::{ablate, format_table, AblationRow, AblationSpec, SWEEP_VALUES};
pub use augment::{random_erasing, Rect};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT_VERSION};
pub use config::{Precision, RunConfig, TrainConfig};
pub use optim::Adam;
pub use schedule::lr_schedule;
pub use train::{batch_losses, evaluate, train, EpochLog, EvalSummary, Trainer, CHECKPOINT_FILE, METRICS_FILE};
pub use visualize::visualize_attention;
