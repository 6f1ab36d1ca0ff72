//! Synthetic speaker corpus and the additive-noise / reverberation
//! augmentation policy.
//!
//! Speakers are source-filter voices: a jittered glottal pulse train at the
//! speaker's fundamental drives a cascade of two-pole formant resonators.
//! Utterances are sequences of syllables, each using one of a fixed set of
//! vowel templates scaled by the speaker's vocal-tract profile.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::seed::{derive_index, derive_seed, rng_from, Rng};

/// Relative formant positions of the shared vowel inventory.
const VOWELS: [[f64; 4]; 6] = [
    [1.00, 1.00, 1.00, 1.00],
    [0.62, 1.45, 1.08, 1.02],
    [1.35, 0.72, 0.93, 0.98],
    [0.75, 0.60, 0.88, 1.00],
    [1.20, 1.25, 1.12, 1.05],
    [0.55, 1.10, 0.97, 0.95],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: u64,
    /// Mean fundamental in Hz, within `[80, 300]`.
    pub fundamental: f64,
    pub formants: Vec<Formant>,
    /// Depth of pitch movement as a fraction of the fundamental.
    pub intonation: f64,
    /// Mean syllables per second.
    pub syllable_rate: f64,
}

impl SyntheticSpeaker {
    pub fn random(id: u64, rng: &mut Rng) -> Self {
        let fundamental = (80f64.ln() + rng.gen::<f64>() * (300f64.ln() - 80f64.ln())).exp();
        let ranges = [(300.0, 850.0), (900.0, 2300.0), (2300.0, 3300.0), (3400.0, 4600.0)];
        let formants = ranges
            .iter()
            .map(|&(lo, hi)| Formant {
                freq: rng.gen_range(lo..hi),
                bandwidth: rng.gen_range(50.0..180.0),
                gain: rng.gen_range(0.4..1.0),
            })
            .collect();
        Self {
            id,
            fundamental,
            formants,
            intonation: rng.gen_range(0.03..0.12),
            syllable_rate: rng.gen_range(3.0..6.0),
        }
    }

    /// Render `duration` seconds of speech.
    pub fn synthesize(&self, duration: f64, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
        self.synthesize_with(duration, sample_rate, 0.04, rng)
    }

    /// As [`synthesize`](Self::synthesize) with the per-utterance pitch
    /// offset drawn from `±f0_spread` (relative).
    pub fn synthesize_with(&self, duration: f64, sample_rate: u32, f0_spread: f64, rng: &mut Rng) -> Vec<f64> {
        let sr = sample_rate as f64;
        let n = (duration * sr).round() as usize;
        let mut out = vec![0.0; n];
        if n == 0 {
            return out;
        }

        let f0_scale = 1.0 + f0_spread * (2.0 * rng.gen::<f64>() - 1.0);
        let into_rate = rng.gen_range(0.3..1.2);
        let into_phase = rng.gen_range(0.0..2.0 * PI);

        let mut resonators: Vec<Resonator> = self.formants.iter().map(|_| Resonator::default()).collect();
        let mut phase = 0.0;
        let mut pos = 0;
        while pos < n {
            // One syllable: voiced nucleus followed by a short gap.
            let syl_len = ((rng.gen_range(0.6..1.4) / self.syllable_rate) * sr) as usize;
            let gap = (rng.gen_range(0.0..0.25) / self.syllable_rate * sr) as usize;
            let vowel = &VOWELS[rng.gen_range(0..VOWELS.len())];
            for (r, (f, v)) in resonators.iter_mut().zip(self.formants.iter().zip(vowel)) {
                r.tune(f.freq * v, f.bandwidth, sr);
            }
            let end = (pos + syl_len).min(n);
            for (k, t) in (pos..end).enumerate() {
                let secs = t as f64 / sr;
                let f0 = self.fundamental
                    * f0_scale
                    * (1.0 + self.intonation * (2.0 * PI * into_rate * secs + into_phase).sin());
                phase += f0 / sr;
                let mut excitation = 0.0;
                if phase >= 1.0 {
                    phase -= 1.0;
                    excitation = 1.0;
                }
                excitation += 0.02 * (rng.gen::<f64>() - 0.5);
                let env = (PI * k as f64 / (end - pos) as f64).sin();
                let mut y = 0.0;
                for (r, f) in resonators.iter_mut().zip(&self.formants) {
                    y += f.gain * r.process(excitation);
                }
                out[t] = env * y;
            }
            for t in end..(end + gap).min(n) {
                let mut y = 0.0;
                for (r, f) in resonators.iter_mut().zip(&self.formants) {
                    y += f.gain * r.process(0.0);
                }
                out[t] = y;
            }
            pos = end + gap;
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bandwidth: f64, sr: f64) {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq.min(0.45 * sr) / sr;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = -r * r;
        self.gain = 1.0 - r;
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: u64,
    pub speaker_id: u64,
    pub waveform: Waveform,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UttCounts {
    Uniform(usize),
    PerSpeaker(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts: UttCounts,
    pub duration: f64,
    pub sample_rate: u32,
    /// Relative spread of each utterance's pitch around the speaker's.
    pub f0_spread: f64,
    /// Recording conditions (background noise, room) applied once per
    /// utterance, independently of training-time augmentation.
    pub recording: Option<AugmentPolicy>,
}

impl CorpusSpec {
    pub fn uniform(n_speakers: usize, utts_per_speaker: usize) -> Self {
        Self {
            n_speakers,
            utts: UttCounts::Uniform(utts_per_speaker),
            duration: 5.0,
            sample_rate: 16_000,
            f0_spread: 0.04,
            recording: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<Utterance>,
}

/// Deterministic corpus. Speaker `s` and utterance `u` each draw from their
/// own child stream of `seed`, so generation order does not matter.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    if spec.n_speakers < 2 {
        return Err(Error::Config("corpus needs at least two speakers".into()));
    }
    let counts = match &spec.utts {
        UttCounts::Uniform(k) => vec![*k; spec.n_speakers],
        UttCounts::PerSpeaker(v) if v.len() == spec.n_speakers => v.clone(),
        UttCounts::PerSpeaker(v) => {
            return Err(Error::Config(format!(
                "{} per-speaker counts for {} speakers",
                v.len(),
                spec.n_speakers
            )))
        }
    };
    let speaker_seed = derive_seed(seed, "speakers");
    let utt_seed = derive_seed(seed, "utterances");
    let speakers: Vec<SyntheticSpeaker> = (0..spec.n_speakers as u64)
        .map(|id| SyntheticSpeaker::random(id, &mut rng_from(derive_index(speaker_seed, id))))
        .collect();

    let mut jobs = Vec::new();
    for (s, &k) in speakers.iter().zip(&counts) {
        for _ in 0..k {
            jobs.push((jobs.len() as u64, s));
        }
    }
    use rayon::prelude::*;
    let utterances = jobs
        .par_iter()
        .map(|&(utt_id, speaker)| {
            let mut rng = rng_from(derive_index(utt_seed, utt_id));
            let mut samples = speaker.synthesize_with(spec.duration, spec.sample_rate, spec.f0_spread, &mut rng);
            let floor: Vec<f64> = (0..samples.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
            normalize_rms(&mut samples, 0.1);
            for (s, f) in samples.iter_mut().zip(floor) {
                *s = (*s + 1e-3 * f).clamp(-1.0, 1.0);
            }
            let mut waveform = Waveform::new(samples, spec.sample_rate)?;
            if let Some(policy) = &spec.recording {
                waveform = augment(&waveform, policy, &mut rng)?;
            }
            Ok(Utterance {
                utterance_id: utt_id,
                speaker_id: speaker.id,
                waveform,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        speakers,
        utterances,
    })
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let p = power(x);
    if p > 0.0 {
        let g = target / p.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Mean squared amplitude.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Two segments of a waveform with disjoint sample ranges.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub first: Waveform,
    pub second: Waveform,
    pub first_start: usize,
    pub second_start: usize,
    pub len: usize,
}

/// Two non-overlapping `frame_seconds` segments, uniformly distributed over
/// all valid placements, returned in random order.
pub fn extract_two_frames(wave: &Waveform, frame_seconds: f64, rng: &mut Rng) -> Result<FramePair> {
    let len = wave.seconds_to_samples(frame_seconds);
    let n = wave.len();
    if len == 0 || n < 2 * len {
        return Err(Error::TooShort {
            got: n,
            needed: 2 * len.max(1),
            what: format!("two non-overlapping {frame_seconds} s frames"),
        });
    }
    // Placements (a, b) with a + len <= b map one-to-one onto pairs of
    // distinct values u < v in 0..=slack+1 via a = u, b = v - 1 + len.
    let slack = n - 2 * len;
    let picked = index::sample(rng, slack + 2, 2);
    let (u, v) = {
        let (x, y) = (picked.index(0), picked.index(1));
        (x.min(y), x.max(y))
    };
    let (a, b) = (u, v - 1 + len);
    let (s1, s2) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
    Ok(FramePair {
        first: wave.segment(s1, len)?,
        second: wave.segment(s2, len)?,
        first_start: s1,
        second_start: s2,
        len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Noise,
    Music,
    Speech,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub snr_speech_db: [f64; 2],
    pub snr_music_db: [f64; 2],
    pub snr_noise_db: [f64; 2],
    /// Probability of adding one noise category.
    pub noise_prob: f64,
    /// Probability of reverberation, drawn independently.
    pub reverb_prob: f64,
    /// Range of the impulse-response decay constant, in samples.
    pub reverb_decay: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            snr_speech_db: [13.0, 20.0],
            snr_music_db: [5.0, 15.0],
            snr_noise_db: [0.0, 15.0],
            noise_prob: 1.0,
            reverb_prob: 0.5,
            reverb_decay: [200.0, 1600.0],
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("snr_speech_db", self.snr_speech_db),
            ("snr_music_db", self.snr_music_db),
            ("snr_noise_db", self.snr_noise_db),
            ("reverb_decay", self.reverb_decay),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("augment.{name}: empty range {r:?}")));
            }
        }
        if self.reverb_decay[0] <= 0.0 {
            return Err(Error::Config("augment.reverb_decay must be positive".into()));
        }
        for (name, p) in [("noise_prob", self.noise_prob), ("reverb_prob", self.reverb_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name}: {p} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn snr_range(&self, kind: NoiseKind) -> [f64; 2] {
        match kind {
            NoiseKind::Noise => self.snr_noise_db,
            NoiseKind::Music => self.snr_music_db,
            NoiseKind::Speech => self.snr_speech_db,
        }
    }
}

/// What [`augment_traced`] drew.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub noise: Option<(NoiseKind, f64)>,
    pub reverb_decay: Option<f64>,
}

pub fn augment(wave: &Waveform, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Waveform> {
    augment_traced(wave, policy, rng).map(|(w, _)| w)
}

/// Add one noise category at a random SNR from its range, then optionally
/// reverberate; the result is clipped to `[-1, 1]`.
pub fn augment_traced(
    wave: &Waveform,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<(Waveform, AugmentRecord)> {
    let sr = wave.sample_rate();
    let mut x = wave.samples().to_vec();
    let mut record = AugmentRecord {
        noise: None,
        reverb_decay: None,
    };

    if rng.gen::<f64>() < policy.noise_prob {
        let kind = [NoiseKind::Noise, NoiseKind::Music, NoiseKind::Speech][rng.gen_range(0..3)];
        let [lo, hi] = policy.snr_range(kind);
        let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let noise = match kind {
            NoiseKind::Noise => white_noise(x.len(), rng),
            NoiseKind::Music => music_noise(x.len(), sr, rng),
            NoiseKind::Speech => babble_noise(x.len(), sr, rng),
        };
        let scaled = scale_to_snr(&x, &noise, snr);
        x.iter_mut().zip(&scaled).for_each(|(s, n)| *s += n);
        record.noise = Some((kind, snr));
    }

    if rng.gen::<f64>() < policy.reverb_prob {
        let [lo, hi] = policy.reverb_decay;
        let decay = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let ir = impulse_response(decay, rng);
        x = convolve_same(&x, &ir);
        record.reverb_decay = Some(decay);
    }

    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok((Waveform::new(x, sr)?, record))
}

/// `noise` rescaled so that `10·log10(P_signal / P_noise) = snr_db`.
/// Silent inputs yield silence.
pub fn scale_to_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Vec<f64> {
    let ps = power(signal);
    let pn = power(noise);
    if ps == 0.0 || pn == 0.0 {
        return vec![0.0; noise.len()];
    }
    let target = ps / 10f64.powf(snr_db / 10.0);
    let g = (target / pn).sqrt();
    noise.iter().map(|v| v * g).collect()
}

pub fn white_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    // Irwin-Hall approximation of a unit Gaussian.
    (0..n)
        .map(|_| (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0)
        .collect()
}

/// A few slowly gliding tones with harmonics, re-pitched every note.
pub fn music_noise(n: usize, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let voices = rng.gen_range(2..=4);
    let mut out = vec![0.0; n];
    for _ in 0..voices {
        let note_len = (rng.gen_range(0.2..0.6) * sr) as usize;
        let mut phase = 0.0;
        let mut freq = 0.0;
        let mut amp = 0.0;
        for (t, o) in out.iter_mut().enumerate() {
            if t % note_len.max(1) == 0 {
                freq = 110.0 * 2f64.powf(rng.gen_range(0..36) as f64 / 12.0);
                amp = rng.gen_range(0.3..1.0);
            }
            phase += freq / sr;
            phase -= phase.floor();
            let p = 2.0 * PI * phase;
            *o += amp * (p.sin() + 0.5 * (2.0 * p).sin() + 0.25 * (3.0 * p).sin());
        }
    }
    out
}

/// Three unrelated synthetic talkers summed.
pub fn babble_noise(n: usize, sample_rate: u32, rng: &mut Rng) -> Vec<f64> {
    let duration = n as f64 / sample_rate as f64;
    let mut out = vec![0.0; n];
    for k in 0..3 {
        let talker = SyntheticSpeaker::random(u64::MAX - k, rng);
        let mut voice = talker.synthesize(duration, sample_rate, rng);
        normalize_rms(&mut voice, 1.0);
        out.iter_mut().zip(&voice).for_each(|(o, v)| *o += v);
    }
    out
}

/// Exponentially decaying noise burst with unit energy.
pub fn impulse_response(decay: f64, rng: &mut Rng) -> Vec<f64> {
    let len = (5.0 * decay).ceil() as usize + 1;
    let mut h: Vec<f64> = (0..len)
        .map(|i| (-(i as f64) / decay).exp() * (rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let g = energy.sqrt().recip();
        h.iter_mut().for_each(|v| *v *= g);
    }
    h
}

/// Linear convolution truncated to the length of `x`.
pub fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..x.len()].iter().map(|c| c.re * scale).collect()
}
