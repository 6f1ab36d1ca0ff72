use serde::{Deserialize, Serialize};

use super::batching::BatchPolicy;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    /// In-batch negatives through one shared encoder.
    Simclr,
    /// Queue negatives from an EMA key encoder.
    Moco,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "nt-xent")]
    NtXent,
    #[serde(rename = "nt-xent-am")]
    NtXentAm,
}

/// Which loss a configuration resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    InBatch,
    Symmetric,
    Queue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub framework: Framework,
    pub loss: LossKind,
    /// SimCLR only: use all `2N` views as anchors.
    pub symmetric: bool,
    /// Additive margin, applied when `loss = "nt-xent-am"`.
    pub margin: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Length of each of the two training views.
    pub frame_seconds: f64,
    pub queue_size: usize,
    pub ema: f64,
    /// Base learning rate; decays 5% every 5 epochs.
    pub lr: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub prevent_collisions: bool,
    pub cap_per_speaker: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Simclr,
            loss: LossKind::NtXentAm,
            symmetric: true,
            margin: 0.1,
            tau: 1.0 / 30.0,
            batch_size: 32,
            epochs: 20,
            frame_seconds: 2.0,
            queue_size: 512,
            ema: 0.999,
            lr: 0.001,
            hidden: 64,
            embed_dim: 32,
            prevent_collisions: false,
            cap_per_speaker: None,
        }
    }
}

impl TrainConfig {
    /// Values used for the published large-scale runs.
    pub fn reference_scale() -> Self {
        Self {
            batch_size: 200,
            epochs: 150,
            queue_size: 10_000,
            embed_dim: 512,
            ..Self::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            margin: match self.loss {
                LossKind::NtXent => 0.0,
                LossKind::NtXentAm => self.margin,
            },
        }
    }

    pub fn variant(&self) -> LossVariant {
        match (self.framework, self.symmetric) {
            (Framework::Moco, _) => LossVariant::Queue,
            (Framework::Simclr, true) => LossVariant::Symmetric,
            (Framework::Simclr, false) => LossVariant::InBatch,
        }
    }

    pub fn batch_policy(&self) -> BatchPolicy {
        BatchPolicy {
            batch_size: self.batch_size,
            prevent_collisions: self.prevent_collisions,
            cap_per_speaker: self.cap_per_speaker,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.framework == Framework::Simclr && self.batch_size < 2 {
            return Err(Error::Config(
                "train.batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.frame_seconds > 0.0) {
            return Err(Error::Config("train.frame_seconds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!("train.ema {} not in [0, 1]", self.ema)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("train.hidden and train.embed_dim must be positive".into()));
        }
        if self.cap_per_speaker == Some(0) {
            return Err(Error::Config("train.cap_per_speaker must be at least 1".into()));
        }
        Ok(())
    }
}
