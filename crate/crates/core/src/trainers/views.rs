use rayon::prelude::*;

use crate::audio::Waveform;
use crate::error::Result;
use crate::features::{LogMelExtractor, MelSpectrogram};
use crate::seed::{derive_index, rng_from};
use crate::synthdata::{augment, extract_two_frames, AugmentPolicy};

/// Turns utterances into two augmented spectrogram views each.
#[derive(Clone, Debug)]
pub struct ViewPipeline {
    pub extractor: LogMelExtractor,
    /// `None` disables augmentation entirely.
    pub augment: Option<AugmentPolicy>,
    pub frame_seconds: f64,
}

/// First and second views of every utterance in a batch, in batch order.
#[derive(Clone, Debug)]
pub struct Views {
    pub first: Vec<MelSpectrogram>,
    pub second: Vec<MelSpectrogram>,
}

impl Views {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

impl ViewPipeline {
    /// Item `i` draws from its own stream `derive_index(batch_seed, i)`, so
    /// the result does not depend on how the work is scheduled.
    pub fn views(&self, batch: &[&Waveform], batch_seed: u64) -> Result<Views> {
        let pairs = batch
            .par_iter()
            .enumerate()
            .map(|(i, wave)| {
                let mut rng = rng_from(derive_index(batch_seed, i as u64));
                let frames = extract_two_frames(wave, self.frame_seconds, &mut rng)?;
                let mut out = Vec::with_capacity(2);
                for w in [frames.first, frames.second] {
                    let w = match &self.augment {
                        Some(policy) => augment(&w, policy, &mut rng)?,
                        None => w,
                    };
                    out.push(self.extractor.extract(&w)?);
                }
                let second = out.pop().expect("two views");
                let first = out.pop().expect("two views");
                Ok((first, second))
            })
            .collect::<Result<Vec<_>>>()?;
        let (first, second) = pairs.into_iter().unzip();
        Ok(Views { first, second })
    }
}
