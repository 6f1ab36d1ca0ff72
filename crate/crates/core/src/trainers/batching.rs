//! Epoch-wise mini-batch sampling with the optional speaker-label controls:
//! per-speaker capping of the epoch pool and class-collision prevention.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Ground-truth speaker of each utterance. Only batch construction reads it;
/// the losses never see labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeakerLabelOracle {
    labels: HashMap<u64, u64>,
}

impl SpeakerLabelOracle {
    pub fn new(pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        Self {
            labels: pairs.into_iter().collect(),
        }
    }

    pub fn speaker(&self, utterance_id: u64) -> Option<u64> {
        self.labels.get(&utterance_id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPolicy {
    pub batch_size: usize,
    pub prevent_collisions: bool,
    pub cap_per_speaker: Option<usize>,
}

/// One epoch of batches as positions into `utterance_ids`.
///
/// Sampling is without replacement; a trailing partial batch is dropped unless
/// it would be the only batch. With collision prevention every batch holds
/// `batch_size` distinct speakers and utterances that cannot be placed are
/// left out of the epoch.
pub fn build_batches(
    utterance_ids: &[u64],
    policy: &BatchPolicy,
    labels: Option<&SpeakerLabelOracle>,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if utterance_ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if policy.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let needs_labels = policy.prevent_collisions || policy.cap_per_speaker.is_some();
    let speakers: Option<Vec<u64>> = match (needs_labels, labels) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(
                "prevent_collisions / cap_per_speaker need speaker labels".into(),
            ))
        }
        (true, Some(oracle)) => Some(
            utterance_ids
                .iter()
                .map(|id| {
                    oracle
                        .speaker(*id)
                        .ok_or_else(|| Error::Config(format!("no speaker label for utterance {id}")))
                })
                .collect::<Result<_>>()?,
        ),
    };

    let mut pool: Vec<usize> = (0..utterance_ids.len()).collect();
    pool.shuffle(rng);

    if let (Some(cap), Some(spk)) = (policy.cap_per_speaker, &speakers) {
        let mut seen: HashMap<u64, usize> = HashMap::new();
        pool.retain(|&i| {
            let c = seen.entry(spk[i]).or_default();
            *c += 1;
            *c <= cap
        });
    }

    let n = policy.batch_size;
    if policy.prevent_collisions {
        let spk = speakers.as_ref().expect("labels resolved above");
        let distinct: HashSet<u64> = pool.iter().map(|&i| spk[i]).collect();
        if distinct.len() < n {
            return Err(Error::Config(format!(
                "prevent_collisions: {} distinct speakers in the epoch pool, batch size {n}",
                distinct.len()
            )));
        }
        let mut batches = Vec::new();
        let mut pending = pool;
        loop {
            let mut batch = Vec::with_capacity(n);
            let mut used = HashSet::with_capacity(n);
            let mut rest = Vec::with_capacity(pending.len());
            for i in pending {
                if batch.len() < n && used.insert(spk[i]) {
                    batch.push(i);
                } else {
                    rest.push(i);
                }
            }
            if batch.len() < n {
                break;
            }
            batches.push(batch);
            pending = rest;
        }
        return Ok(batches);
    }

    if pool.len() < n {
        return Ok(vec![pool]);
    }
    Ok(pool.chunks_exact(n).map(<[usize]>::to_vec).collect())
}
