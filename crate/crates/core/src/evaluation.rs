//! Verification scoring and metrics: multi-frame cosine trial scores, EER,
//! minDCF and score-distribution export.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::autodiff::Tensor;
use crate::encoder::{encode_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::features::LogMelExtractor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evenly spaced frames per utterance.
    pub n_frames: usize,
    pub frame_seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_frames: 10,
            frame_seconds: 3.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::Config("eval.n_frames must be at least 1".into()));
        }
        if !(self.frame_seconds > 0.0) {
            return Err(Error::Config("eval.frame_seconds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} scores for {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("score {i}"),
            });
        }
        Ok(Self { scores, targets })
    }

    pub fn from_classes(target: &[f64], nontarget: &[f64]) -> Result<Self> {
        let scores = target.iter().chain(nontarget).copied().collect();
        let targets = std::iter::repeat(true)
            .take(target.len())
            .chain(std::iter::repeat(false).take(nontarget.len()))
            .collect();
        Self::new(scores, targets)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.targets.iter().filter(|&&t| t).count();
        (t, self.targets.len() - t)
    }

    /// Mean score of the target and non-target trials (NaN if a class is empty).
    pub fn class_means(&self) -> (f64, f64) {
        let mean = |want: bool| {
            let (s, n) = self
                .scores
                .iter()
                .zip(&self.targets)
                .filter(|(_, &t)| t == want)
                .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        };
        (mean(true), mean(false))
    }

    /// `(FAR, FRR)` at `-∞`, every distinct score in increasing order, and
    /// `+∞`. A trial is accepted when its score is `≥` the threshold.
    pub fn operating_points(&self) -> Result<Vec<(f64, f64)>> {
        let (nt, nn) = self.counts();
        if nt == 0 || nn == 0 {
            return Err(Error::SingleClass);
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut points = Vec::with_capacity(self.len() + 2);
        // Below the threshold so far.
        let (mut tgt_below, mut non_below) = (0usize, 0usize);
        let point = |tb: usize, nb: usize| ((nn - nb) as f64 / nn as f64, tb as f64 / nt as f64);
        points.push(point(0, 0));
        let mut k = 0;
        while k < order.len() {
            let s = self.scores[order[k]];
            points.push(point(tgt_below, non_below));
            while k < order.len() && self.scores[order[k]] == s {
                if self.targets[order[k]] {
                    tgt_below += 1;
                } else {
                    non_below += 1;
                }
                k += 1;
            }
        }
        points.push(point(tgt_below, non_below));
        // The first entry (−∞) and the lowest score coincide; keep both for
        // a uniform threshold set.
        Ok(points)
    }
}

/// Equal error rate, linearly interpolated between the two operating points
/// where `FAR − FRR` changes sign.
pub fn compute_eer(s: &ScoreSet) -> Result<f64> {
    let points = s.operating_points()?;
    let mut prev = points[0];
    for &(far, frr) in &points {
        let d = far - frr;
        if d == 0.0 {
            return Ok(far);
        }
        if d < 0.0 {
            let (far0, frr0) = prev;
            let d0 = far0 - frr0;
            let alpha = d0 / (d0 - d);
            return Ok(far0 + alpha * (far - far0));
        }
        prev = (far, frr);
    }
    unreachable!("FAR − FRR ends at −1")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Divide by the cost of the best trivial system.
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            normalize: true,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("p_target {} not in (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    pub fn cost(&self, far: f64, frr: f64) -> f64 {
        self.c_miss * self.p_target * frr + self.c_fa * (1.0 - self.p_target) * far
    }

    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

pub fn compute_min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let best = s
        .operating_points()?
        .into_iter()
        .map(|(far, frr)| p.cost(far, frr))
        .fold(f64::INFINITY, f64::min);
    Ok(if p.normalize { best / p.default_cost() } else { best })
}

/// Histogram of both classes over `n_bins` equal bins spanning the score
/// range, as CSV, followed by `# mean_target,…` and `# mean_nontarget,…`.
pub fn export_score_distribution(s: &ScoreSet, n_bins: usize) -> Result<String> {
    if n_bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let lo = s.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![[0usize; 2]; n_bins];
    for (&v, &t) in s.scores.iter().zip(&s.targets) {
        let b = (((v - lo) / width).floor() as usize).min(n_bins - 1);
        counts[b][usize::from(!t)] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count_target,count_nontarget\n");
    for (b, [ct, cn]) in counts.iter().enumerate() {
        let b_lo = lo + b as f64 * width;
        let b_hi = if b + 1 == n_bins { hi } else { lo + (b + 1) as f64 * width };
        let _ = writeln!(out, "{b_lo},{b_hi},{ct},{cn}");
    }
    let (mt, mn) = s.class_means();
    let _ = writeln!(out, "# mean_target,{mt}");
    let _ = writeln!(out, "# mean_nontarget,{mn}");
    Ok(out)
}

/// Start offsets of `n_frames` evenly spaced windows of `len` samples.
pub fn frame_starts(n_samples: usize, len: usize, n_frames: usize) -> Result<Vec<usize>> {
    if n_samples < len {
        return Err(Error::TooShort {
            got: n_samples,
            needed: len,
            what: "one evaluation frame".into(),
        });
    }
    let span = (n_samples - len) as f64;
    Ok((0..n_frames)
        .map(|k| {
            if n_frames == 1 {
                0
            } else {
                (k as f64 * span / (n_frames - 1) as f64).round() as usize
            }
        })
        .collect())
}

/// `n_frames × D` l2-normalized embeddings of evenly spaced frames.
pub fn utterance_embeddings(
    wave: &Waveform,
    extractor: &LogMelExtractor,
    params: &EncoderParams,
    cfg: &EvalConfig,
) -> Result<Tensor> {
    let len = wave.seconds_to_samples(cfg.frame_seconds);
    let starts = frame_starts(wave.len(), len, cfg.n_frames).map_err(|e| match e {
        Error::TooShort { got, needed, .. } => Error::TooShort {
            got,
            needed,
            what: format!("evaluation frames are {} s", cfg.frame_seconds),
        },
        e => e,
    })?;
    let mels = starts
        .into_iter()
        .map(|s| extractor.extract(&wave.segment(s, len)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(encode_batch(&mels, params)?.normalized)
}

/// Mean cosine over every pair of rows of `a` and `b` (rows unit-norm).
pub fn score_embeddings(a: &Tensor, b: &Tensor) -> Result<f64> {
    let grid = a.matmul(&b.transpose()?)?;
    Ok(grid.data().iter().sum::<f64>() / grid.numel() as f64)
}

pub fn score_trial(
    a: &Waveform,
    b: &Waveform,
    extractor: &LogMelExtractor,
    params: &EncoderParams,
    cfg: &EvalConfig,
) -> Result<f64> {
    score_embeddings(
        &utterance_embeddings(a, extractor, params, cfg)?,
        &utterance_embeddings(b, extractor, params, cfg)?,
    )
}

/// Round to the 9 significant digits written to score files, so that the
/// reported metrics can be recomputed exactly from the file.
pub fn quantize_score(s: f64) -> f64 {
    format_score(s).parse().expect("formatted float parses")
}

pub fn format_score(s: f64) -> String {
    format!("{s:.8e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub duration: f64,
}

/// `utt_id speaker_id path duration` per line; relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [utt, spk, p, dur] = f[..] else {
            return Err(Error::parse(path, format!("line {}: expected 4 fields", n + 1)));
        };
        let duration = dur
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad duration `{dur}`", n + 1)))?;
        let p = PathBuf::from(p);
        out.push(ManifestEntry {
            utt_id: utt.into(),
            speaker_id: spk.into(),
            path: if p.is_absolute() { p } else { base.join(p) },
            duration,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// `<0|1> enroll test` per line.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let target = match f.first() {
            Some(&"1") => true,
            Some(&"0") => false,
            _ => return Err(Error::parse(path, format!("line {}: label must be 0 or 1", n + 1))),
        };
        let [_, e, t] = f[..] else {
            return Err(Error::parse(path, format!("line {}: expected 3 fields", n + 1)));
        };
        out.push(Trial {
            target,
            enroll: e.into(),
            test: t.into(),
        });
    }
    if out.is_empty() {
        return Err(Error::parse(path, "no trials"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: Vec<Trial>,
    /// Quantized scores, parallel to `trials`.
    pub scores: ScoreSet,
    pub eer: f64,
    pub min_dcf: f64,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let (nt, nn) = self.scores.counts();
        format!(
            "trials: {} ({nt} target, {nn} non-target)\nEER: {:.4}%\nminDCF(0.01): {:.4}\n",
            self.trials.len(),
            self.eer * 100.0,
            self.min_dcf
        )
    }

    pub fn metrics_csv(&self) -> String {
        format!("eer,min_dcf_0.01,n_trials\n{},{},{}\n", self.eer, self.min_dcf, self.trials.len())
    }

    pub fn score_file(&self) -> String {
        let mut out = String::new();
        for (t, s) in self.trials.iter().zip(self.scores.scores()) {
            let _ = writeln!(out, "{} {} {}", format_score(*s), t.enroll, t.test);
        }
        out
    }

    /// `report.txt` and `metrics.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.txt", self.summary()), ("metrics.csv", self.metrics_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Score every trial and compute the metrics. Embeddings are computed once
/// per utterance, in parallel, and do not depend on scheduling.
pub fn evaluate(
    params: &EncoderParams,
    manifest: &[ManifestEntry],
    trials: &[Trial],
    extractor: &LogMelExtractor,
    cfg: &EvalConfig,
    dcf: &DcfParams,
) -> Result<EvalReport> {
    cfg.validate()?;
    let index: HashMap<&str, &ManifestEntry> =
        manifest.iter().map(|e| (e.utt_id.as_str(), e)).collect();
    let needed: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .collect();
    let missing: Vec<String> = needed
        .iter()
        .filter(|id| !index.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingUtterances(missing));
    }
    let needed: Vec<&str> = needed.into_iter().collect();
    let embeddings: HashMap<&str, Tensor> = needed
        .par_iter()
        .map(|&id| {
            let wave = read_wav(&index[id].path)?;
            let e = utterance_embeddings(&wave, extractor, params, cfg)
                .map_err(|e| Error::Contract(format!("utterance {id}: {e}")))?;
            Ok((id, e))
        })
        .collect::<Result<_>>()?;
    let scores = trials
        .iter()
        .map(|t| {
            score_embeddings(&embeddings[t.enroll.as_str()], &embeddings[t.test.as_str()])
                .map(quantize_score)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreSet::new(scores, trials.iter().map(|t| t.target).collect())?;
    Ok(EvalReport {
        trials: trials.to_vec(),
        eer: compute_eer(&scores)?,
        min_dcf: compute_min_dcf(&scores, dcf)?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        ScoreSet::from_classes(pos, neg).unwrap()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(compute_eer(&set(&[0.4], &[0.6])).unwrap(), 1.0);
        assert_eq!(compute_eer(&set(&[0.7, 0.3], &[0.5, 0.1])).unwrap(), 0.5);
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        assert_eq!(compute_min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), &p).unwrap(), 0.0);
        let tied = set(&[0.5; 3], &[0.5; 7]);
        assert!((compute_min_dcf(&tied, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(compute_eer(&set(&[0.1, 0.2], &[])), Err(Error::SingleClass)));
    }

    #[test]
    fn frame_starts_cover_the_utterance() {
        assert_eq!(frame_starts(100, 10, 10).unwrap()[9], 90);
        assert_eq!(frame_starts(100, 10, 1).unwrap(), vec![0]);
        assert_eq!(frame_starts(10, 10, 3).unwrap(), vec![0, 0, 0]);
        assert!(frame_starts(9, 10, 3).is_err());
    }

    #[test]
    fn distribution_counts_and_means() {
        let s = set(&[0.9, 0.7, 0.8], &[0.1, 0.2]);
        let csv = export_score_distribution(&s, 4).unwrap();
        let rows: Vec<Vec<&str>> = csv
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').collect())
            .collect();
        assert_eq!(rows.len(), 4);
        let ct: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
        let cn: usize = rows.iter().map(|r| r[3].parse::<usize>().unwrap()).sum();
        assert_eq!((ct, cn), (3, 2));
        assert!(csv.contains("# mean_nontarget,0.15"));
    }

    #[test]
    fn quantization_round_trips() {
        let s = 0.123456789123;
        assert_eq!(format_score(s), "1.23456789e-1");
        assert_eq!(quantize_score(quantize_score(s)), quantize_score(s));
    }
}
