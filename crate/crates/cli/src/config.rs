//! Run configuration file (TOML). Precedence: command-line flags, then the
//! file, then the built-in desk-scale defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speakerssl::evaluation::{DcfParams, EvalConfig};
use speakerssl::features::FeatureConfig;
use speakerssl::synthdata::AugmentPolicy;
use speakerssl::trainers::TrainConfig;
use speakerssl::Error;

pub const CONFIG_ENV: &str = "SPEAKERSSL_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_speakers: usize,
    pub heldout_speakers: usize,
    pub utts_per_speaker: usize,
    /// Explicit per-speaker counts for the training speakers (imbalance
    /// experiments); overrides `utts_per_speaker` when set.
    pub train_counts: Option<Vec<usize>>,
    pub heldout_utts_per_speaker: usize,
    pub duration: f64,
    pub n_trials: usize,
    /// Within-speaker spread of the fundamental, as a fraction.
    pub f0_spread: f64,
    /// Fixed per-utterance recording condition (noise and reverb) applied at
    /// generation time; set both probabilities to 0 for clean audio.
    pub recording: AugmentPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_speakers: 64,
            heldout_speakers: 16,
            utts_per_speaker: 12,
            train_counts: None,
            heldout_utts_per_speaker: 8,
            duration: 5.0,
            n_trials: 800,
            f0_spread: 0.04,
            recording: AugmentPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
            eval_dir: "eval".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for feature extraction and scoring; 0 = all cores.
    pub workers: usize,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dcf: DcfParams,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, Error> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Config(format!("{}: at `{}`: {}", origin.display(), e.path(), e.inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.features.validate()?;
        self.augment.validate()?;
        self.data.recording.validate()?;
        if !(0.0..0.5).contains(&self.data.f0_spread) {
            return Err(Error::Config(format!("data.f0_spread {} not in [0, 0.5)", self.data.f0_spread)));
        }
        self.train.validate()?;
        self.eval.validate()?;
        self.dcf.validate()?;
        let d = &self.data;
        if d.train_speakers + d.heldout_speakers < 2 || d.heldout_speakers < 2 {
            return Err(Error::Config("data: need at least two held-out speakers".into()));
        }
        if let Some(c) = &d.train_counts {
            if c.len() != d.train_speakers {
                return Err(Error::Config(format!(
                    "data.train_counts has {} entries for {} training speakers",
                    c.len(),
                    d.train_speakers
                )));
            }
        }
        if d.duration < 2.0 * self.train.frame_seconds || d.duration < self.eval.frame_seconds {
            return Err(Error::Config(format!(
                "data.duration {} s is too short for two {} s training frames or one {} s evaluation frame",
                d.duration, self.train.frame_seconds, self.eval.frame_seconds
            )));
        }
        Ok(())
    }
}

/// `(key, desk default, published-recipe value, meaning)` for every key.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("seed", "0", "-", "root seed; every stream derives from it"),
    ("workers", "0", "-", "worker threads (0 = all cores)"),
    ("data.train_speakers", "64", "5994 (VoxCeleb2 dev)", "synthetic training speakers"),
    ("data.heldout_speakers", "16", "40 (VoxCeleb1 test)", "speakers reserved for trials"),
    ("data.utts_per_speaker", "12", "-", "utterances per training speaker"),
    ("data.train_counts", "unset", "-", "per-speaker counts (class imbalance)"),
    ("data.heldout_utts_per_speaker", "8", "-", "utterances per held-out speaker"),
    ("data.duration", "5.0", "-", "utterance length, seconds"),
    ("data.n_trials", "800", "37720", "trials, half target"),
    ("data.f0_spread", "0.04", "-", "within-speaker pitch spread (fraction)"),
    ("data.recording.snr_speech_db", "[13, 20]", "-", "recording babble SNR range, dB"),
    ("data.recording.snr_music_db", "[5, 15]", "-", "recording music SNR range, dB"),
    ("data.recording.snr_noise_db", "[0, 15]", "-", "recording noise SNR range, dB"),
    ("data.recording.noise_prob", "1.0", "-", "probability an utterance is recorded with noise"),
    ("data.recording.reverb_prob", "0.5", "-", "probability an utterance is reverberant"),
    ("data.recording.reverb_decay", "[200, 1600]", "-", "recording IR decay, samples"),
    ("features.sample_rate", "16000", "16000", "Hz"),
    ("features.frame_length", "0.025", "0.025", "Hamming window, seconds"),
    ("features.frame_shift", "0.010", "0.010", "hop, seconds"),
    ("features.n_fft", "512", "unstated", "FFT size"),
    ("features.n_mels", "40", "40", "mel bins"),
    ("features.f_min", "0", "unstated", "lowest filter edge, Hz"),
    ("features.f_max", "unset (Nyquist)", "unstated", "highest filter edge, Hz"),
    ("features.log_floor", "1e-10", "unstated", "added before the log"),
    ("features.norm_eps", "1e-5", "unstated", "instance-norm epsilon"),
    ("augment.snr_speech_db", "[13, 20]", "[13, 20]", "babble SNR range, dB"),
    ("augment.snr_music_db", "[5, 15]", "[5, 15]", "music SNR range, dB"),
    ("augment.snr_noise_db", "[0, 15]", "[0, 15]", "noise SNR range, dB"),
    ("augment.noise_prob", "1.0", "unstated", "probability of adding noise"),
    ("augment.reverb_prob", "0.5", "unstated", "probability of reverberation"),
    ("augment.reverb_decay", "[200, 1600]", "simulated RIRs", "IR decay constant, samples"),
    ("train.framework", "simclr", "simclr | moco", "training framework"),
    ("train.loss", "nt-xent-am", "nt-xent-am", "nt-xent | nt-xent-am"),
    ("train.symmetric", "true", "true", "symmetric loss (SimCLR)"),
    ("train.margin", "0.1", "0.1", "additive margin m (nt-xent-am only)"),
    ("train.tau", "1/30", "1/30", "temperature"),
    ("train.batch_size", "32", "200", "utterances per batch N"),
    ("train.epochs", "20", "150 SimCLR / 100 MoCo", "epochs"),
    ("train.frame_seconds", "2.0", "2.0", "training frame length, seconds"),
    ("train.queue_size", "512", "10000", "MoCo queue size K"),
    ("train.ema", "0.999", "0.999", "MoCo key-encoder momentum"),
    ("train.lr", "0.001", "0.001", "Adam learning rate; -5% every 5 epochs"),
    ("train.hidden", "64", "ResNet-34", "encoder hidden width H"),
    ("train.embed_dim", "32", "512", "embedding size D"),
    ("train.prevent_collisions", "false", "false", "distinct speakers per batch (needs labels)"),
    ("train.cap_per_speaker", "unset", "unset", "max utterances per speaker per epoch"),
    ("eval.n_frames", "10", "10", "evaluation frames per utterance"),
    ("eval.frame_seconds", "3.5", "3.5", "evaluation frame length, seconds"),
    ("dcf.p_target", "0.01", "0.01", "target prior"),
    ("dcf.c_miss", "1", "1", "miss cost"),
    ("dcf.c_fa", "1", "1", "false-alarm cost"),
    ("dcf.normalize", "true", "true", "divide minDCF by the trivial cost"),
    ("paths.data_dir", "data", "-", "gen-data output / train input"),
    ("paths.run_dir", "run", "-", "checkpoints and metrics.csv"),
    ("paths.eval_dir", "eval", "-", "report.txt and metrics.csv"),
];

pub fn key_reference() -> String {
    let mut out = format!(
        "Configuration keys (TOML; flags > file > defaults; default file from ${CONFIG_ENV}):\n\n  {:<30} {:<16} {:<22} {}\n",
        "key", "desk default", "reference", "meaning"
    );
    for (k, desk, reference, what) in KEYS {
        out.push_str(&format!("  {k:<30} {desk:<16} {reference:<22} {what}\n"));
    }
    out
}
