//! Log-mel front end: Hamming-windowed framing, power spectrum, HTK mel
//! filterbank, log compression and per-utterance instance normalization.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window length in seconds.
    pub frame_length: f64,
    /// Hop between frames in seconds.
    pub frame_shift: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; Nyquist when absent.
    pub f_max: Option<f64>,
    pub log_floor: f64,
    pub norm_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 0.025,
            frame_shift: 0.010,
            n_fft: 512,
            n_mels: 40,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
            norm_eps: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.frame_shift * self.sample_rate as f64).round() as usize
    }

    pub fn f_max_hz(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.frame_len_samples();
        if self.sample_rate == 0 || len == 0 || self.hop_samples() == 0 {
            return Err(Error::Config("features: empty frame or hop".into()));
        }
        if len > self.n_fft {
            return Err(Error::Config(format!(
                "features: frame length {len} exceeds n_fft {}",
                self.n_fft
            )));
        }
        if self.n_mels == 0 || !(self.f_min >= 0.0 && self.f_min < self.f_max_hz()) {
            return Err(Error::Config("features: invalid mel range".into()));
        }
        if self.f_max_hz() > self.sample_rate as f64 / 2.0 + 1e-9 {
            return Err(Error::Config("features: f_max above Nyquist".into()));
        }
        Ok(())
    }
}

/// Instance-normalized log-mel frames, `T × n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        // 0.54 − 0.46·cos(·), arranged so the endpoints are exactly 0.08.
        .map(|n| 0.08 + 0.46 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

/// Reusable extractor holding the window, FFT plan and filterbank.
#[derive(Clone)]
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Tensor,
    edges_hz: Vec<f64>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let window = hamming_window(cfg.frame_len_samples());
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max_hz());
        let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|k| mel_to_hz(mel_lo + k as f64 * step))
            .collect();

        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f >= lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        let filterbank = Tensor::matrix(cfg.n_mels, n_bins, weights)?;
        Ok(Self {
            cfg,
            window,
            fft,
            filterbank,
            edges_hz,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// `n_mels × (n_fft/2 + 1)` triangular weights.
    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// The `n_mels + 2` filter edge frequencies in Hz; filter `m` spans
    /// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    pub fn filter_edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Slice into overlapping windowed frames, `T × frame_len`.
    pub fn frame_and_window(&self, wave: &Waveform) -> Result<Tensor> {
        if wave.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Audio(format!(
                "sample rate {} does not match feature rate {}",
                wave.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let len = self.cfg.frame_len_samples();
        let hop = self.cfg.hop_samples();
        let x = wave.samples();
        if x.len() < len {
            return Err(Error::TooShort {
                got: x.len(),
                needed: len,
                what: "one analysis frame".into(),
            });
        }
        let t = 1 + (x.len() - len) / hop;
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            let frame = &x[i * hop..i * hop + len];
            out.extend(frame.iter().zip(&self.window).map(|(s, w)| s * w));
        }
        Tensor::matrix(t, len, out)
    }

    /// `|FFT|²` of each zero-padded frame, `T × (n_fft/2 + 1)`.
    pub fn power_spectrum(&self, frames: &Tensor) -> Result<Tensor> {
        let (t, len) = frames.dims2("power_spectrum")?;
        let n_fft = self.cfg.n_fft;
        if len > n_fft {
            return Err(Error::ShapeMismatch {
                op: "power_spectrum",
                left: vec![t, len],
                right: vec![n_fft],
            });
        }
        let n_bins = n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut out = Vec::with_capacity(t * n_bins);
        for i in 0..t {
            for (dst, &s) in buf.iter_mut().zip(frames.row(i)) {
                *dst = Complex::new(s, 0.0);
            }
            buf[len..].fill(Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            out.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
        }
        Tensor::matrix(t, n_bins, out)
    }

    /// Filterbank energies followed by `ln(energy + floor)`, `T × n_mels`.
    pub fn log_mel(&self, spectrum: &Tensor) -> Result<Tensor> {
        let energies = spectrum.matmul(&self.filterbank.transpose()?)?;
        let floor = self.cfg.log_floor;
        Ok(energies.map(|e| (e + floor).ln()))
    }

    pub fn instance_normalize(&self, log_mel: &Tensor) -> Result<MelSpectrogram> {
        Ok(MelSpectrogram {
            frames: instance_normalize(log_mel, self.cfg.norm_eps)?,
            frame_shift: self.cfg.frame_shift,
            frame_length: self.cfg.frame_length,
        })
    }

    /// Pre-normalization log-mels.
    pub fn raw_log_mel(&self, wave: &Waveform) -> Result<Tensor> {
        let frames = self.frame_and_window(wave)?;
        let spec = self.power_spectrum(&frames)?;
        self.log_mel(&spec)
    }

    /// Full pipeline.
    pub fn extract(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        self.instance_normalize(&self.raw_log_mel(wave)?)
    }
}

/// Per column: subtract the mean over rows and divide by `sqrt(var + eps)`.
pub fn instance_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = x.dims2("instance_normalize")?;
    if t == 0 {
        return Err(Error::TooShort {
            got: 0,
            needed: 1,
            what: "frames for instance normalization".into(),
        });
    }
    let data = x.data();
    let mut out = vec![0.0; t * d];
    for j in 0..d {
        let mean = (0..t).map(|i| data[i * d + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..t {
            out[i * d + j] = (data[i * d + j] - mean) * inv;
        }
    }
    Tensor::matrix(t, d, out)
}
