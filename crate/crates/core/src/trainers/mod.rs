//! SimCLR and MoCo training.
//!
//! SimCLR pushes both views of every utterance through one encoder and takes
//! negatives from the batch. MoCo encodes the second view with a key encoder
//! that follows the query encoder by EMA, takes negatives from a FIFO queue
//! of earlier keys, and never back-propagates into the key branch.

mod batching;
mod config;
mod queue;
mod run;
mod steps;
mod views;

pub use batching::{build_batches, BatchPolicy, SpeakerLabelOracle};
pub use config::{Framework, LossKind, LossVariant, TrainConfig};
pub use queue::{EmaEncoder, MemoryQueue};
pub use run::{checkpoint_path, EpochMetrics, TrainOutcome, Trainer, METRICS_HEADER};
pub use steps::{moco_objective, moco_step, simclr_objective, simclr_step, MocoObjective, SimclrObjective};
pub use views::{ViewPipeline, Views};
