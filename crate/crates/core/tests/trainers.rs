mod common;

use std::collections::{HashMap, HashSet, VecDeque};

use common::*;
use rand::Rng as _;
use speakerssl::autodiff::{AdamState, Tape, Tensor};
use speakerssl::encoder::{encode_batch, encode_batch_on_tape, EncoderParams};
use speakerssl::features::{FeatureConfig, LogMelExtractor};
use speakerssl::losses::{nt_xent_queue_on_tape, LossConfig};
use speakerssl::synthdata::{generate_corpus, AugmentPolicy, CorpusSpec, Utterance};
use speakerssl::trainers::{
    build_batches, moco_objective, moco_step, simclr_objective, simclr_step, BatchPolicy,
    EmaEncoder, Framework, MemoryQueue, SpeakerLabelOracle, TrainConfig, Trainer, ViewPipeline,
    Views,
};

#[test]
fn queue_matches_reference_fifo() {
    let mut r = rng(11);
    for _ in 0..100_000 {
        let cap = r.gen_range(0..8);
        let mut q = MemoryQueue::new(cap, 2);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..r.gen_range(1..5) {
            let n = r.gen_range(0..10);
            let rows = unit_rows(&mut r, n, 2);
            q.enqueue(&rows).unwrap();
            for i in 0..n {
                model.push_back(rows.row(i).to_vec());
                if model.len() > cap {
                    model.pop_front();
                }
            }
            assert_eq!(q.len(), model.len());
            assert_eq!(q.ordered(), model.iter().cloned().collect::<Vec<_>>());
            let neg = q.negatives();
            assert_eq!(neg.rows(), model.len());
            for i in 0..neg.rows() {
                let norm: f64 = neg.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}

fn labelled(speakers: u64, per: u64) -> (Vec<u64>, SpeakerLabelOracle) {
    let ids: Vec<u64> = (0..speakers * per).collect();
    let oracle = SpeakerLabelOracle::new(ids.iter().map(|&u| (u, u / per)));
    (ids, oracle)
}

fn collisions(batch: &[usize], ids: &[u64], labels: &SpeakerLabelOracle) -> usize {
    let mut count: HashMap<u64, usize> = HashMap::new();
    for &i in batch {
        *count.entry(labels.speaker(ids[i]).unwrap()).or_default() += 1;
    }
    count.values().map(|c| c * (c - 1) / 2).sum()
}

#[test]
fn collision_count_matches_uniform_expectation() {
    let (s, n) = (16u64, 8usize);
    let (ids, labels) = labelled(s, 200);
    let policy = BatchPolicy { batch_size: n, prevent_collisions: false, cap_per_speaker: None };
    let mut r = rng(12);
    let mut counts = Vec::new();
    while counts.len() < 10_000 {
        for b in build_batches(&ids, &policy, None, &mut r).unwrap() {
            counts.push(collisions(&b, &ids, &labels) as f64);
        }
    }
    counts.truncate(10_000);
    let m = counts.iter().sum::<f64>() / counts.len() as f64;
    let var = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (counts.len() - 1) as f64;
    let sigma = (var / counts.len() as f64).sqrt();
    let expected = (n * (n - 1)) as f64 / (2.0 * s as f64);
    assert!((m - expected).abs() < 3.0 * sigma, "mean {m} expected {expected} σ {sigma}");
}

#[test]
fn collision_controls_hold_over_an_epoch() {
    let (ids, labels) = labelled(40, 7);
    let mut r = rng(13);
    let on = BatchPolicy { batch_size: 16, prevent_collisions: true, cap_per_speaker: None };
    for _ in 0..20 {
        let batches = build_batches(&ids, &on, Some(&labels), &mut r).unwrap();
        assert!(!batches.is_empty());
        for b in &batches {
            assert_eq!(b.len(), 16);
            assert_eq!(collisions(b, &ids, &labels), 0);
        }
    }
    for k in 1..4 {
        let cap = BatchPolicy { batch_size: 5, prevent_collisions: false, cap_per_speaker: Some(k) };
        let batches = build_batches(&ids, &cap, Some(&labels), &mut r).unwrap();
        let mut per: HashMap<u64, usize> = HashMap::new();
        let mut seen = HashSet::new();
        for &i in batches.iter().flatten() {
            assert!(seen.insert(i), "utterance sampled twice");
            *per.entry(labels.speaker(ids[i]).unwrap()).or_default() += 1;
        }
        assert!(per.values().all(|&c| c <= k));
    }
    // Cap 1: the epoch pool is one utterance per speaker.
    let one = BatchPolicy { batch_size: 1, prevent_collisions: false, cap_per_speaker: Some(1) };
    assert_eq!(build_batches(&ids, &one, Some(&labels), &mut r).unwrap().len(), 40);

    let (few, few_labels) = labelled(10, 5);
    let big = BatchPolicy { batch_size: 32, prevent_collisions: true, cap_per_speaker: None };
    assert!(build_batches(&few, &big, Some(&few_labels), &mut r).is_err());
    let off = BatchPolicy { prevent_collisions: false, ..big };
    assert_eq!(build_batches(&few, &off, Some(&few_labels), &mut r).unwrap().len(), 1);
}

fn small_corpus(speakers: usize, per: usize, seconds: f64, seed: u64) -> Vec<Utterance> {
    generate_corpus(&CorpusSpec { duration: seconds, ..CorpusSpec::uniform(speakers, per) }, seed)
        .unwrap()
        .utterances
}

fn pipeline(frame_seconds: f64, augment: bool) -> ViewPipeline {
    ViewPipeline {
        extractor: LogMelExtractor::new(FeatureConfig::default()).unwrap(),
        augment: augment.then(AugmentPolicy::default),
        frame_seconds,
    }
}

fn views_for(utts: &[Utterance], seed: u64) -> Views {
    let waves: Vec<_> = utts.iter().map(|u| &u.waveform).collect();
    pipeline(0.5, true).views(&waves, seed).unwrap()
}

#[test]
fn simclr_gradients_reach_both_views_and_steps_are_deterministic() {
    let utts = small_corpus(4, 1, 1.2, 1);
    let views = views_for(&utts, 3);
    let params = EncoderParams::init(2, 40, 12, 6).unwrap();
    let cfg = LossConfig::new(1.0 / 30.0, 0.1).unwrap();
    for symmetric in [true, false] {
        let obj = simclr_objective(&params, &views, &cfg, symmetric).unwrap();
        for g in &obj.view_grads {
            assert!(g.data().iter().any(|&v| v != 0.0));
        }
        assert!(obj.param_grads.iter().all(|g| g.data().iter().any(|&v| v != 0.0)));
    }
    let run = || {
        let mut p = params.clone();
        let mut adam = AdamState::new(&p.tensors, 1e-3);
        let l1 = simclr_step(&mut p, &mut adam, &views, &cfg, true, 0).unwrap();
        let l2 = simclr_step(&mut p, &mut adam, &views, &cfg, true, 0).unwrap();
        (l1, l2, p)
    };
    let (a, b) = (run(), run());
    assert_eq!((a.0, a.1), (b.0, b.1));
    assert_eq!(a.2, b.2);
    assert!(simclr_objective(&params, &views_for(&utts[..1], 3), &cfg, true).is_err());
}

#[test]
fn ema_probes_and_enqueue_order() {
    let utts = small_corpus(3, 1, 1.2, 2);
    let views = views_for(&utts, 4);
    let cfg = LossConfig::new(1.0 / 30.0, 0.1).unwrap();
    let query0 = EncoderParams::init(5, 40, 12, 6).unwrap();
    let key0 = EncoderParams::init(6, 40, 12, 6).unwrap();
    let mut queue0 = MemoryQueue::new(4, 6);
    queue0.enqueue(&unit_rows(&mut rng(5), 3, 6)).unwrap();

    for momentum in [0.0, 1.0] {
        let mut query = query0.clone();
        let mut adam = AdamState::new(&query.tensors, 1e-3);
        let mut key = EmaEncoder::new(key0.clone(), momentum).unwrap();
        let mut queue = queue0.clone();
        let expected_keys = encode_batch(&views.second, &key0).unwrap().normalized;
        moco_step(&mut query, &mut adam, &mut key, &mut queue, &views, &cfg, 0).unwrap();
        assert_ne!(query, query0, "query encoder was not updated");
        if momentum == 0.0 {
            // Key equals the query *after* its optimizer step.
            assert_eq!(key.params, query);
        } else {
            assert_eq!(key.params, key0);
        }
        // Keys come from the pre-update key encoder and are appended in
        // batch order, evicting the oldest rows.
        let mut model: VecDeque<Vec<f64>> = queue0.ordered().into();
        for i in 0..3 {
            model.push_back(expected_keys.row(i).to_vec());
            if model.len() > 4 {
                model.pop_front();
            }
        }
        assert_eq!(queue.ordered(), model.into_iter().collect::<Vec<_>>());
    }
}

/// The query gradient is the same whether the key branch is in the graph
/// (then detached) or supplied as plain constants, and no gradient reaches
/// the key parameters or the queue.
#[test]
fn moco_stop_gradient() {
    let utts = small_corpus(3, 1, 1.2, 3);
    let cfg = LossConfig::new(1.0 / 30.0, 0.1).unwrap();
    for seed in 0..5 {
        let views = views_for(&utts, seed);
        let query = EncoderParams::init(seed + 10, 40, 12, 6).unwrap();
        let key = EncoderParams::init(seed + 20, 40, 12, 6).unwrap();
        let mut queue = MemoryQueue::new(5, 6);
        queue.enqueue(&unit_rows(&mut rng(seed), 4, 6)).unwrap();
        let obj = moco_objective(&query, &key, &queue, &views, &cfg).unwrap();
        assert!(obj.key_grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(obj.queue_grad.data().iter().all(|&v| v == 0.0));

        let reference = |key: &EncoderParams| -> Vec<Tensor> {
            let keys = encode_batch(&views.second, key).unwrap().normalized;
            let mut tape = Tape::new();
            let qp = query.register(&mut tape, true);
            let (_, z) = encode_batch_on_tape(&mut tape, &qp, &views.first).unwrap();
            let zk = tape.constant(keys);
            let qv = tape.constant(queue.negatives());
            let loss = nt_xent_queue_on_tape(&mut tape, z, zk, qv, &cfg).unwrap();
            let g = tape.backward(loss).unwrap();
            qp.vars.iter().zip(&query.tensors).map(|(v, t)| g.get_or_zeros(*v, t.shape())).collect()
        };
        let want = reference(&key);
        for (a, b) in obj.query_grads.iter().zip(&want) {
            assert_eq!(a.data(), b.data());
        }

        // Finite differences in the key parameters: the loss value moves (the
        // key branch feeds the positives) but the reported key gradient stays
        // zero, so nothing flows back through that branch.
        let h = 1e-5;
        let mut moved = 0.0f64;
        for k in 0..key.tensors.len() {
            let mut plus = key.clone();
            let mut minus = key.clone();
            let mut d = plus.tensors[k].data().to_vec();
            d[0] += h;
            plus.tensors[k] = Tensor::new(plus.tensors[k].shape().to_vec(), d).unwrap();
            let mut d = minus.tensors[k].data().to_vec();
            d[0] -= h;
            minus.tensors[k] = Tensor::new(minus.tensors[k].shape().to_vec(), d).unwrap();
            let lp = moco_objective(&query, &plus, &queue, &views, &cfg).unwrap();
            let lm = moco_objective(&query, &minus, &queue, &views, &cfg).unwrap();
            moved = moved.max(((lp.loss - lm.loss) / (2.0 * h)).abs());
            assert!(lp.key_grads.iter().chain(&lm.key_grads).all(|g| g.data().iter().all(|&v| v == 0.0)));
        }
        assert!(moved > 0.0);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let utts = small_corpus(16, 4, 2.2, 7);
    let pipe = pipeline(1.0, false);
    let cfg = LossConfig::new(1.0 / 30.0, 0.1).unwrap();
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..5u64 {
        let mut params = EncoderParams::init(seed, 40, 16, 8).unwrap();
        let mut adam = AdamState::new(&params.tensors, 1e-3);
        let mut r = rng(seed + 100);
        let mut losses = Vec::new();
        for step in 0..200u64 {
            let picks: Vec<_> = rand::seq::index::sample(&mut r, utts.len(), 8)
                .into_iter()
                .map(|i| &utts[i].waveform)
                .collect();
            let views = pipe.views(&picks, seed * 1000 + step).unwrap();
            losses.push(simclr_step(&mut params, &mut adam, &views, &cfg, true, step).unwrap());
        }
        first.push(losses[0]);
        last.push(losses[199]);
    }
    assert!(median(last.clone()) < median(first.clone()), "first {first:?} last {last:?}");
}

fn tiny_config(framework: Framework, epochs: usize) -> TrainConfig {
    TrainConfig {
        framework,
        batch_size: 4,
        epochs,
        frame_seconds: 0.5,
        queue_size: 6,
        ema: 0.9,
        hidden: 8,
        embed_dim: 4,
        ..TrainConfig::default()
    }
}

fn losses_from_csv(dir: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let utts = small_corpus(4, 2, 1.2, 8);
    let pipe = pipeline(0.5, true);
    for framework in [Framework::Simclr, Framework::Moco] {
        let full_dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(framework, 4);
        let trainer = Trainer { cfg: &cfg, utterances: &utts, labels: None, pipeline: &pipe, seed: 9 };
        let full = trainer.run(full_dir.path(), None, |_| {}).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let head_cfg = tiny_config(framework, 2);
        let head = Trainer { cfg: &head_cfg, ..trainer };
        head.run(split_dir.path(), None, |_| {}).unwrap();
        let resumed = trainer
            .run(split_dir.path(), Some(&split_dir.path().join("last.ckpt")), |_| {})
            .unwrap();

        assert_eq!(resumed.params, full.params, "{framework:?}");
        assert_eq!(losses_from_csv(split_dir.path()), losses_from_csv(full_dir.path()));
        assert_eq!(
            std::fs::read(full_dir.path().join("last.ckpt")).unwrap(),
            std::fs::read(split_dir.path().join("last.ckpt")).unwrap()
        );

        let other = Trainer { seed: 10, ..trainer };
        assert!(other.run(split_dir.path(), Some(&split_dir.path().join("last.ckpt")), |_| {}).is_err());
    }
}

#[test]
fn metrics_log_rows_and_learning_rate() {
    let utts = small_corpus(4, 1, 1.2, 9);
    let pipe = pipeline(0.5, false);
    let cfg = tiny_config(Framework::Simclr, 11);
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer { cfg: &cfg, utterances: &utts, labels: None, pipeline: &pipe, seed: 1 };
    let outcome = trainer.run(dir.path(), None, |_| {}).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,mean_loss,lr,wall_seconds"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(outcome.epochs.len(), 11);
    let lr10: f64 = rows[10][2].parse().unwrap();
    assert!((lr10 - 0.001 * 0.95 * 0.95).abs() < 1e-15, "{lr10}");
    for e in 0..11 {
        assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).exists());
    }
}
