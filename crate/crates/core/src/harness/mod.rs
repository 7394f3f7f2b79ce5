//! Configuration, model checkpoints, toy codec training and the compress/evaluate pipeline.

mod config;
mod model;
mod pipeline;

pub use config::{Budget, Paths, RunConfig, TrainConfig};
pub use model::{hex_digest, train_codec, ModelBundle, TrainLogRow, TrainOutcome, CHECKPOINT_FILE};
pub use pipeline::{
    evaluate_dirs, list_images, load_images, rd_sweep, write_records, Compressed, Evaluation, Mode, RdRecord, Session,
    Sidecar, SIDECAR_SUFFIX,
};
