use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use speakerssl::audio::{read_wav, write_wav};
use speakerssl::checkpoint::Checkpoint;
use speakerssl::evaluation::{
    evaluate, export_score_distribution, read_manifest, read_trials, EvalReport, ManifestEntry,
};
use speakerssl::features::LogMelExtractor;
use speakerssl::seed::{derive_seed, rng_from};
use speakerssl::synthdata::{generate_corpus, CorpusSpec, UttCounts, Utterance};
use speakerssl::trainers::{SpeakerLabelOracle, Trainer, ViewPipeline};
use speakerssl::{Error, Result};

use crate::config::RunConfig;

pub const TRAIN_MANIFEST: &str = "train_manifest.txt";
pub const HELDOUT_MANIFEST: &str = "heldout_manifest.txt";
pub const TRIALS: &str = "trials.txt";

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn utt_name(id: u64) -> String {
    format!("u{id:05}")
}

fn spk_name(id: u64) -> String {
    format!("s{id:03}")
}

/// Synthetic corpus as WAV files, one manifest per split and a balanced
/// trial list over the held-out speakers.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let mut counts = d
        .train_counts
        .clone()
        .unwrap_or_else(|| vec![d.utts_per_speaker; d.train_speakers]);
    counts.extend(std::iter::repeat(d.heldout_utts_per_speaker).take(d.heldout_speakers));
    let spec = CorpusSpec {
        n_speakers: d.train_speakers + d.heldout_speakers,
        utts: UttCounts::PerSpeaker(counts),
        duration: d.duration,
        sample_rate: cfg.features.sample_rate,
        f0_spread: d.f0_spread,
        recording: (d.recording.noise_prob > 0.0 || d.recording.reverb_prob > 0.0)
            .then(|| d.recording.clone()),
    };
    let corpus = generate_corpus(&spec, derive_seed(cfg.seed, "synthdata"))?;

    let mut manifests = [String::new(), String::new()];
    let mut heldout: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for u in &corpus.utterances {
        let rel = PathBuf::from("wav").join(spk_name(u.speaker_id)).join(format!("{}.wav", utt_name(u.utterance_id)));
        let path = out.join(&rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_wav(&path, &u.waveform)?;
        let is_heldout = u.speaker_id as usize >= d.train_speakers;
        let _ = writeln!(
            manifests[usize::from(is_heldout)],
            "{} {} {} {}",
            utt_name(u.utterance_id),
            spk_name(u.speaker_id),
            rel.display(),
            u.waveform.duration_seconds()
        );
        if is_heldout {
            heldout.entry(u.speaker_id).or_default().push(utt_name(u.utterance_id));
        }
    }
    write(&out.join(TRAIN_MANIFEST), &manifests[0])?;
    write(&out.join(HELDOUT_MANIFEST), &manifests[1])?;
    let trials = balanced_trials(&heldout, d.n_trials, derive_seed(cfg.seed, "trials"))?;
    write(&out.join(TRIALS), &trials)
}

/// Equal numbers of target and non-target pairs, without repeats.
fn balanced_trials(by_speaker: &BTreeMap<u64, Vec<String>>, n_trials: usize, seed: u64) -> Result<String> {
    let mut rng = rng_from(seed);
    let mut targets = Vec::new();
    for utts in by_speaker.values() {
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                targets.push((utts[i].clone(), utts[j].clone()));
            }
        }
    }
    targets.shuffle(&mut rng);
    let all: Vec<(u64, &String)> = by_speaker
        .iter()
        .flat_map(|(s, us)| us.iter().map(move |u| (*s, u)))
        .collect();
    let n_pairs_cross = {
        let n = all.len();
        let same: usize = by_speaker.values().map(|u| u.len() * (u.len().saturating_sub(1)) / 2).sum();
        n * n.saturating_sub(1) / 2 - same
    };
    let half = (n_trials / 2).min(targets.len()).min(n_pairs_cross);
    if half == 0 {
        return Err(Error::Config("held-out split cannot form both target and non-target trials".into()));
    }
    targets.truncate(half);
    let mut seen = HashSet::new();
    let mut nontargets = Vec::with_capacity(half);
    while nontargets.len() < half {
        let a = rng.gen_range(0..all.len());
        let b = rng.gen_range(0..all.len());
        if all[a].0 == all[b].0 || !seen.insert((a.min(b), a.max(b))) {
            continue;
        }
        nontargets.push((all[a].1.clone(), all[b].1.clone()));
    }
    let mut lines: Vec<String> = targets
        .into_iter()
        .map(|(a, b)| format!("1 {a} {b}"))
        .chain(nontargets.into_iter().map(|(a, b)| format!("0 {a} {b}")))
        .collect();
    lines.shuffle(&mut rng);
    Ok(lines.join("\n") + "\n")
}

/// Load a manifest's audio with dense numeric ids, plus the speaker labels.
pub fn load_utterances(manifest: &[ManifestEntry]) -> Result<(Vec<Utterance>, SpeakerLabelOracle)> {
    let mut speakers: BTreeMap<&str, u64> = BTreeMap::new();
    for e in manifest {
        let next = speakers.len() as u64;
        speakers.entry(e.speaker_id.as_str()).or_insert(next);
    }
    let utterances = manifest
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Utterance {
                utterance_id: i as u64,
                speaker_id: speakers[e.speaker_id.as_str()],
                waveform: read_wav(&e.path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = SpeakerLabelOracle::new(utterances.iter().map(|u| (u.utterance_id, u.speaker_id)));
    Ok((utterances, labels))
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::parse(manifest, "manifest lists no utterances"));
    }
    let (utterances, labels) = load_utterances(&entries)?;
    let pipeline = ViewPipeline {
        extractor: LogMelExtractor::new(cfg.features.clone())?,
        augment: Some(cfg.augment.clone()),
        frame_seconds: cfg.train.frame_seconds,
    };
    let trainer = Trainer {
        cfg: &cfg.train,
        utterances: &utterances,
        labels: Some(&labels),
        pipeline: &pipeline,
        seed: derive_seed(cfg.seed, "trainers"),
    };
    let total = cfg.train.epochs;
    let outcome = trainer.run(out, resume, |m| {
        eprintln!(
            "epoch {:>3}/{total}  loss {:.4}  lr {:.6}  steps {}  {:.1}s",
            m.epoch + 1,
            m.mean_loss,
            m.lr,
            m.steps,
            m.wall_seconds
        );
    })?;
    Ok(outcome.last_checkpoint)
}

pub struct EvalPaths<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub trials: &'a Path,
    pub out: &'a Path,
    pub export_scores: Option<&'a Path>,
    pub export_dist: Option<&'a Path>,
    pub bins: usize,
}

pub fn run_evaluate(cfg: &RunConfig, p: &EvalPaths) -> Result<EvalReport> {
    let params = Checkpoint::read(p.checkpoint)?.encoder("encoder")?;
    let manifest = read_manifest(p.manifest)?;
    let trials = read_trials(p.trials)?;
    let extractor = LogMelExtractor::new(cfg.features.clone())?;
    let report = evaluate(&params, &manifest, &trials, &extractor, &cfg.eval, &cfg.dcf)?;
    report.write(p.out)?;
    if let Some(path) = p.export_scores {
        write(path, &report.score_file())?;
    }
    if let Some(path) = p.export_dist {
        write(path, &export_score_distribution(&report.scores, p.bins)?)?;
    }
    Ok(report)
}
