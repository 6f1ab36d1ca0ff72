//! Frame-level MLP followed by Self-Attentive Pooling and a linear output
//! projection.
//!
//! ```text
//! h_t    = tanh(W2 · tanh(W1 · x_t + b1) + b2)
//! e_t    = qᵀ · tanh(Ws · h_t + bs)
//! a      = softmax_t(e)
//! output = Wo · Σ_t a_t h_t + bo
//! ```

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::seed::rng_from;

/// Attention scoring used by the pooling layer; stored in checkpoints.
pub const SAP_SCORING: &str = "a_t = softmax_t(q^T tanh(W_s h_t + b_s)), bias inside tanh";

pub const PARAM_NAMES: [&str; 9] = [
    "frame.w1", "frame.b1", "frame.w2", "frame.b2", "sap.weight", "sap.bias", "sap.query",
    "out.weight", "out.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// In [`PARAM_NAMES`] order.
    pub tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn shapes(input_dim: usize, hidden: usize, embed_dim: usize) -> [Vec<usize>; 9] {
        [
            vec![input_dim, hidden],
            vec![1, hidden],
            vec![hidden, hidden],
            vec![1, hidden],
            vec![hidden, hidden],
            vec![1, hidden],
            vec![hidden, 1],
            vec![hidden, embed_dim],
            vec![1, embed_dim],
        ]
    }

    /// Uniform init in `±sqrt(1 / fan_in)` per layer.
    pub fn init(seed: u64, input_dim: usize, hidden: usize, embed_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || embed_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut rng = rng_from(seed);
        let fan_in = [input_dim, input_dim, hidden, hidden, hidden, hidden, hidden, hidden, hidden];
        let tensors = Self::shapes(input_dim, hidden, embed_dim)
            .into_iter()
            .zip(fan_in)
            .map(|(shape, fan)| {
                let s = (1.0 / fan as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_dim,
            hidden,
            embed_dim,
            tensors,
        })
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Contract(format!(
                "expected {} encoder tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let input_dim = tensors[0].rows();
        let hidden = tensors[0].cols();
        let embed_dim = tensors[7].cols();
        for (t, shape) in tensors.iter().zip(Self::shapes(input_dim, hidden, embed_dim)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "encoder params",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            input_dim,
            hidden,
            embed_dim,
            tensors,
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Record the parameters on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        EncoderVars {
            vars: vars.try_into().expect("nine parameter tensors"),
            input_dim: self.input_dim,
        }
    }
}

/// Encoder parameters as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub vars: [Var; 9],
    input_dim: usize,
}

/// Output of [`encode_on_tape`] with the pooling weights exposed.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `1 × D` raw embedding.
    pub embedding: Var,
    /// `1 × T` attention weights.
    pub attention: Var,
}

pub fn encode_on_tape(tape: &mut Tape, p: &EncoderVars, mel: &MelSpectrogram) -> Result<Encoded> {
    let (t, d) = mel.frames.dims2("encode")?;
    if t == 0 {
        return Err(Error::TooShort {
            got: 0,
            needed: 1,
            what: "frames to encode".into(),
        });
    }
    if d != p.input_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: vec![t, p.input_dim],
            right: vec![t, d],
        });
    }
    let [w1, b1, w2, b2, ws, bs, q, wo, bo] = p.vars;
    let x = tape.constant(mel.frames.clone());
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add(h, b2)?;
    let h = tape.tanh(h)?;

    let u = tape.matmul(h, ws)?;
    let u = tape.add(u, bs)?;
    let u = tape.tanh(u)?;
    let scores = tape.matmul(u, q)?;
    let scores = tape.transpose(scores)?;
    let attention = tape.softmax_rows(scores)?;
    let pooled = tape.matmul(attention, h)?;

    let out = tape.matmul(pooled, wo)?;
    let embedding = tape.add(out, bo)?;
    Ok(Encoded {
        embedding,
        attention,
    })
}

/// Encode every spectrogram, stack the rows and take their l2-normalized view.
pub fn encode_batch_on_tape(
    tape: &mut Tape,
    p: &EncoderVars,
    mels: &[MelSpectrogram],
) -> Result<(Var, Var)> {
    if mels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let rows = mels
        .iter()
        .enumerate()
        .map(|(i, m)| {
            encode_on_tape(tape, p, m)
                .map(|e| e.embedding)
                .map_err(|e| Error::Contract(format!("encoding item {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = tape.concat_rows(&rows)?;
    let normalized = tape.l2_normalize_rows(raw)?;
    Ok((raw, normalized))
}

/// Raw and normalized embeddings for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub raw: Tensor,
    pub normalized: Tensor,
}

/// Forward-only embedding of one spectrogram.
pub fn encode(mel: &MelSpectrogram, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let out = encode_on_tape(&mut tape, &vars, mel)?;
    Ok(tape.value(out.embedding).clone())
}

/// Forward-only batch embedding.
pub fn encode_batch(mels: &[MelSpectrogram], params: &EncoderParams) -> Result<EmbeddingBatch> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let (raw, normalized) = encode_batch_on_tape(&mut tape, &vars, mels)?;
    Ok(EmbeddingBatch {
        raw: tape.value(raw).clone(),
        normalized: tape.value(normalized).clone(),
    })
}

/// SAP weights for one spectrogram, `1 × T`.
pub fn attention_weights(mel: &MelSpectrogram, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let out = encode_on_tape(&mut tape, &vars, mel)?;
    Ok(tape.value(out.attention).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(rows: Vec<Vec<f64>>) -> MelSpectrogram {
        MelSpectrogram {
            frames: Tensor::from_rows(&rows).unwrap(),
            frame_shift: 0.01,
            frame_length: 0.025,
        }
    }

    fn random_mel(t: usize, d: usize, seed: u64) -> MelSpectrogram {
        let mut rng = rng_from(seed);
        mel((0..t).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::init(1, 40, 16, 8).unwrap();
        assert_eq!(a, EncoderParams::init(1, 40, 16, 8).unwrap());
        assert_ne!(a, EncoderParams::init(2, 40, 16, 8).unwrap());
        let bounds = [40, 40, 16, 16, 16, 16, 16, 16, 16].map(|f: usize| (1.0 / f as f64).sqrt());
        for (t, s) in a.tensors.iter().zip(bounds) {
            assert!(t.data().iter().all(|v| v.abs() <= s));
        }
        assert!(EncoderParams::init(1, 40, 0, 8).is_err());
    }

    #[test]
    fn single_frame_attention_is_one() {
        let p = EncoderParams::init(3, 4, 6, 5).unwrap();
        let m = random_mel(1, 4, 1);
        let a = attention_weights(&m, &p).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn identical_frames_get_uniform_attention() {
        let p = EncoderParams::init(3, 4, 6, 5).unwrap();
        let m = mel(vec![vec![0.3, -1.0, 2.0, 0.5]; 7]);
        let a = attention_weights(&m, &p).unwrap();
        assert!(a.data().iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn attention_is_a_distribution() {
        let p = EncoderParams::init(4, 40, 16, 8).unwrap();
        let a = attention_weights(&random_mel(50, 40, 2), &p).unwrap();
        assert!(a.data().iter().all(|&w| w >= 0.0));
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_per_item_and_permutes() {
        let p = EncoderParams::init(5, 40, 16, 8).unwrap();
        let mels: Vec<_> = (0..4).map(|i| random_mel(10 + i, 40, i as u64)).collect();
        let batch = encode_batch(&mels, &p).unwrap();
        for (i, m) in mels.iter().enumerate() {
            let single = encode(m, &p).unwrap();
            let diff = single
                .data()
                .iter()
                .zip(batch.raw.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
            let norm: f64 = batch.normalized.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let perm = [2, 0, 3, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| mels[i].clone()).collect();
        let pb = encode_batch(&shuffled, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pb.raw.row(k), batch.raw.row(i));
        }
        let same = encode_batch(&[mels[0].clone(), mels[0].clone()], &p).unwrap();
        assert_eq!(same.raw.row(0), same.raw.row(1));
        assert!(matches!(encode_batch(&[], &p), Err(Error::EmptyBatch)));
    }
}
