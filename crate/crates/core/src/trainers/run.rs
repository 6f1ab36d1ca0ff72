use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::autodiff::{lr_schedule, AdamState};
use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::seed::{derive_index, derive_seed, rng_from};
use crate::synthdata::Utterance;

use super::batching::{build_batches, SpeakerLabelOracle};
use super::config::{Framework, TrainConfig};
use super::queue::{EmaEncoder, MemoryQueue};
use super::steps::{moco_step, simclr_step};
use super::views::ViewPipeline;

pub const METRICS_HEADER: &str = "epoch,mean_loss,lr,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 0-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    pub steps: usize,
}

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.mean_loss, self.lr, self.wall_seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Epochs run by this invocation (resumed epochs are not repeated).
    pub epochs: Vec<EpochMetrics>,
    pub last_checkpoint: PathBuf,
}

/// Everything a training run reads. The loss never sees `labels`; they only
/// feed the batch-construction controls.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub utterances: &'a [Utterance],
    pub labels: Option<&'a SpeakerLabelOracle>,
    pub pipeline: &'a ViewPipeline,
    pub seed: u64,
}

struct State {
    params: EncoderParams,
    adam: AdamState,
    key: Option<EmaEncoder>,
    queue: Option<MemoryQueue>,
    next_epoch: usize,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Compare configurations ignoring the epoch budget, which may grow on resume.
fn same_recipe(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.epochs = b.epochs;
    &a == b
}

impl Trainer<'_> {
    fn fresh_state(&self) -> Result<State> {
        let cfg = self.cfg;
        let n_mels = self.pipeline.extractor.config().n_mels;
        let params = EncoderParams::init(
            derive_seed(self.seed, "encoder"),
            n_mels,
            cfg.hidden,
            cfg.embed_dim,
        )?;
        let adam = AdamState::new(&params.tensors, cfg.lr);
        let (key, queue) = match cfg.framework {
            Framework::Simclr => (None, None),
            Framework::Moco => (
                Some(EmaEncoder::new(params.clone(), cfg.ema)?),
                Some(MemoryQueue::new(cfg.queue_size, cfg.embed_dim)),
            ),
        };
        Ok(State {
            params,
            adam,
            key,
            queue,
            next_epoch: 0,
        })
    }

    fn checkpoint(&self, s: &State) -> Checkpoint {
        let mut meta = json!({
            "epochs_completed": s.next_epoch,
            "adam_step": s.adam.step_count(),
            "seed": self.seed,
            "train": self.cfg,
        });
        if let Some(q) = &s.queue {
            meta["queue_head"] = json!(q.write_head());
            meta["queue_filled"] = json!(q.len());
        }
        let mut ck = Checkpoint::new(meta);
        ck.push_encoder("encoder", &s.params);
        for (name, (m, v)) in PARAM_NAMES
            .iter()
            .zip(s.adam.first_moment().iter().zip(s.adam.second_moment()))
        {
            ck.push(format!("adam.m.{name}"), m.clone());
            ck.push(format!("adam.v.{name}"), v.clone());
        }
        if let Some(k) = &s.key {
            ck.push_encoder("key", &k.params);
        }
        if let Some(q) = &s.queue {
            ck.push("queue.buffer", q.storage());
        }
        ck
    }

    fn restore(&self, ck: &Checkpoint) -> Result<State> {
        let saved: TrainConfig = serde_json::from_value(ck.meta["train"].clone())
            .map_err(|e| Error::Contract(format!("checkpoint train config: {e}")))?;
        if !same_recipe(&saved, self.cfg) {
            return Err(Error::Config(
                "resume: checkpoint was trained with a different configuration".into(),
            ));
        }
        if ck.meta_u64("seed")? != self.seed {
            return Err(Error::Config("resume: checkpoint was trained with a different seed".into()));
        }
        let params = ck.encoder("encoder")?;
        let moments = |kind: &str| {
            PARAM_NAMES
                .iter()
                .map(|n| ck.require(&format!("adam.{kind}.{n}")).cloned())
                .collect::<Result<Vec<_>>>()
        };
        let adam = AdamState::from_parts(self.cfg.lr, ck.meta_u64("adam_step")?, moments("m")?, moments("v")?)?;
        let (key, queue) = match self.cfg.framework {
            Framework::Simclr => (None, None),
            Framework::Moco => (
                Some(EmaEncoder::new(ck.encoder("key")?, self.cfg.ema)?),
                Some(MemoryQueue::from_parts(
                    ck.require("queue.buffer")?.clone(),
                    ck.meta_u64("queue_head")? as usize,
                    ck.meta_u64("queue_filled")? as usize,
                )?),
            ),
        };
        Ok(State {
            params,
            adam,
            key,
            queue,
            next_epoch: ck.meta_u64("epochs_completed")? as usize,
        })
    }

    /// Loss of every step in one epoch, in order.
    fn run_epoch(&self, s: &mut State, epoch: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let loss_cfg = cfg.loss_config();
        let ids: Vec<u64> = self.utterances.iter().map(|u| u.utterance_id).collect();
        let mut batch_rng = rng_from(derive_index(derive_seed(self.seed, "batches"), epoch as u64));
        let batches = build_batches(&ids, &cfg.batch_policy(), self.labels, &mut batch_rng)?;
        let step_root = derive_index(derive_seed(self.seed, "steps"), epoch as u64);
        let mut losses = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            let batch_seed = derive_index(step_root, b as u64);
            let waves: Vec<_> = batch.iter().map(|&i| &self.utterances[i].waveform).collect();
            let views = self.pipeline.views(&waves, batch_seed)?;
            let loss = match (&mut s.key, &mut s.queue) {
                (Some(key), Some(queue)) => moco_step(
                    &mut s.params,
                    &mut s.adam,
                    key,
                    queue,
                    &views,
                    &loss_cfg,
                    batch_seed,
                )?,
                _ => simclr_step(&mut s.params, &mut s.adam, &views, &loss_cfg, cfg.symmetric, batch_seed)?,
            };
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Train for `cfg.epochs` epochs, writing `epoch_XXX.ckpt`, `last.ckpt`
    /// and `metrics.csv` into `out_dir`. With `resume`, training continues
    /// after the epochs recorded in that checkpoint and reproduces the losses
    /// an uninterrupted run would have produced.
    pub fn run(
        &self,
        out_dir: &Path,
        resume: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        self.pipeline.extractor.config().validate()?;
        if self.utterances.is_empty() {
            return Err(Error::EmptyBatch);
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut state = match resume {
            Some(path) => self.restore(&Checkpoint::read(path)?)?,
            None => self.fresh_state()?,
        };

        let metrics_path = out_dir.join("metrics.csv");
        let mut log = String::from(METRICS_HEADER);
        log.push('\n');
        if state.next_epoch > 0 {
            // Keep the lines of the epochs already completed.
            if let Ok(old) = fs::read_to_string(&metrics_path) {
                for line in old.lines().skip(1).take(state.next_epoch) {
                    log.push_str(line);
                    log.push('\n');
                }
            }
        }
        fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;

        let last = out_dir.join("last.ckpt");
        let mut epochs = Vec::new();
        for epoch in state.next_epoch..self.cfg.epochs {
            let started = Instant::now();
            let lr = lr_schedule(epoch, self.cfg.lr);
            state.adam.lr = lr;
            let losses = self.run_epoch(&mut state, epoch)?;
            state.next_epoch = epoch + 1;
            let metrics = EpochMetrics {
                epoch,
                mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
                lr,
                wall_seconds: started.elapsed().as_secs_f64(),
                steps: losses.len(),
            };

            let ck = self.checkpoint(&state);
            ck.write(&checkpoint_path(out_dir, epoch))?;
            ck.write(&last)?;
            let _ = writeln!(log, "{}", metrics.csv_line());
            fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;
            on_epoch(&metrics);
            epochs.push(metrics);
        }
        if !last.exists() {
            self.checkpoint(&state).write(&last)?;
        }
        Ok(TrainOutcome {
            params: state.params,
            epochs,
            last_checkpoint: last,
        })
    }
}
