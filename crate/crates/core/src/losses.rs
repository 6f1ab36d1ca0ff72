//! NT-Xent contrastive losses with an optional additive margin on the
//! positive pair.
//!
//! With `ℓ⁺(u, v) = exp((cos(u, v) − m) / τ)` and `ℓ⁻(u, v) = exp(cos(u, v) / τ)`
//! every variant averages, over anchors, the term
//!
//! ```text
//! −log( ℓ⁺(anchor, positive) / (ℓ⁺(anchor, positive) + Σ_neg ℓ⁻(anchor, neg)) )
//! ```
//!
//! and differs only in where the negatives come from:
//!
//! * [`nt_xent`]: anchors are the rows of `Z`, negatives the other rows of `Z'`.
//! * [`nt_xent_symmetric`]: all `2N` rows of `[Z; Z']` are anchors, negatives
//!   are every row except the anchor and its partner view.
//! * [`nt_xent_queue`]: negatives are the rows of a memory queue, which never
//!   receives gradient.
//!
//! Each term is evaluated as `logsumexp(logits) − positive_logit`. Summing the
//! denominator over all `a ∈ I` (the positive included) is the same quantity
//! when `m = 0`, so only this form is implemented.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Allowed deviation of an input row norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature τ; `1/τ` plays the role of the AM-Softmax scale.
    pub tau: f64,
    /// Additive margin `m` subtracted from the positive cosine.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0 / 30.0,
            margin: 0.0,
        }
    }
}

impl LossConfig {
    pub fn new(tau: f64, margin: f64) -> Result<Self> {
        let cfg = Self { tau, margin };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Contract(format!("{what} has norm {norm}, expected 1")));
    }
    Ok(())
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let (r, _) = t.dims2("loss input")?;
    (0..r).try_for_each(|i| check_unit(t.row(i), &format!("{what} row {i}")))
}

/// `ℓ⁺(u, v) = exp((cos − m) / τ)` for unit vectors.
pub fn sim_pos(u: &[f64], v: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_unit(u, "u")?;
    check_unit(v, "v")?;
    Ok(((dot(u, v) - cfg.margin) / cfg.tau).exp())
}

/// `ℓ⁻(u, v) = exp(cos / τ)` for unit vectors.
pub fn sim_neg(u: &[f64], v: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_unit(u, "u")?;
    check_unit(v, "v")?;
    Ok((dot(u, v) / cfg.tau).exp())
}

/// `logsumexp({positive} ∪ negatives) − positive`, the per-anchor loss term
/// in logit space.
pub fn contrastive_term(positive: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().copied().fold(positive, f64::max);
    let total: f64 = (positive - max).exp() + negatives.iter().map(|n| (n - max).exp()).sum::<f64>();
    max + total.ln() - positive
}

/// Cosine similarities of every anchor with its positive and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSimilarities {
    pub pos: Vec<f64>,
    /// One row of negative cosines per anchor.
    pub neg: Vec<Vec<f64>>,
}

impl PairSimilarities {
    fn validated(pos: Vec<f64>, neg: Vec<Vec<f64>>) -> Result<Self> {
        let out_of_range = |c: &f64| c.abs() > 1.0 + 1e-9;
        if pos.iter().any(out_of_range) || neg.iter().flatten().any(out_of_range) {
            return Err(Error::Contract("cosine outside [-1, 1]".into()));
        }
        Ok(Self { pos, neg })
    }

    /// Pairing used by [`nt_xent`].
    pub fn in_batch(z: &Tensor, zp: &Tensor) -> Result<Self> {
        check_pair(z, zp)?;
        let n = z.rows();
        let pos = (0..n).map(|i| dot(z.row(i), zp.row(i))).collect();
        let neg = (0..n)
            .map(|i| (0..n).filter(|&a| a != i).map(|a| dot(z.row(i), zp.row(a))).collect())
            .collect();
        Self::validated(pos, neg)
    }

    /// Pairing used by [`nt_xent_symmetric`].
    pub fn symmetric(z: &Tensor, zp: &Tensor) -> Result<Self> {
        check_pair(z, zp)?;
        let n = z.rows();
        let all: Vec<&[f64]> = (0..n).map(|i| z.row(i)).chain((0..n).map(|i| zp.row(i))).collect();
        let partner = |i: usize| (i + n) % (2 * n);
        let pos = (0..2 * n).map(|i| dot(all[i], all[partner(i)])).collect();
        let neg = (0..2 * n)
            .map(|i| {
                (0..2 * n)
                    .filter(|&a| a != i && a != partner(i))
                    .map(|a| dot(all[i], all[a]))
                    .collect()
            })
            .collect();
        Self::validated(pos, neg)
    }

    /// Pairing used by [`nt_xent_queue`].
    pub fn queue(z: &Tensor, zp: &Tensor, queue: &Tensor) -> Result<Self> {
        check_pair(z, zp)?;
        check_queue(z, queue)?;
        let n = z.rows();
        let pos = (0..n).map(|i| dot(z.row(i), zp.row(i))).collect();
        let neg = (0..n)
            .map(|i| (0..queue.rows()).map(|b| dot(z.row(i), queue.row(b))).collect())
            .collect();
        Self::validated(pos, neg)
    }

    pub fn anchor_losses(&self, cfg: &LossConfig) -> Vec<f64> {
        self.pos
            .iter()
            .zip(&self.neg)
            .map(|(&p, negs)| {
                let logits: Vec<f64> = negs.iter().map(|c| c / cfg.tau).collect();
                contrastive_term((p - cfg.margin) / cfg.tau, &logits)
            })
            .collect()
    }

    pub fn mean_loss(&self, cfg: &LossConfig) -> f64 {
        let l = self.anchor_losses(cfg);
        l.iter().sum::<f64>() / l.len() as f64
    }
}

fn check_pair(z: &Tensor, zp: &Tensor) -> Result<()> {
    let (n, _) = z.dims2("loss")?;
    if z.shape() != zp.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: z.shape().to_vec(),
            right: zp.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_unit_rows(z, "Z")?;
    check_unit_rows(zp, "Z'")
}

fn check_queue(z: &Tensor, queue: &Tensor) -> Result<()> {
    let (_, d) = queue.dims2("queue")?;
    if d != z.cols() {
        return Err(Error::ShapeMismatch {
            op: "queue loss",
            left: z.shape().to_vec(),
            right: queue.shape().to_vec(),
        });
    }
    check_unit_rows(queue, "queue")
}

/// `[n, n]` constant with `-margin/τ` at `(i, partner(i))`.
fn margin_offsets(tape: &mut Tape, rows: usize, cols: usize, partner: impl Fn(usize) -> usize, cfg: &LossConfig) -> Result<Var> {
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        data[i * cols + partner(i)] = -cfg.margin / cfg.tau;
    }
    Ok(tape.constant(Tensor::matrix(rows, cols, data)?))
}

/// NT-Xent(-AM) with negatives from the other rows of `Z'`.
pub fn nt_xent_on_tape(tape: &mut Tape, z: Var, zp: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape.value(z), tape.value(zp))?;
    let n = tape.value(z).rows();
    let zpt = tape.transpose(zp)?;
    let cos = tape.matmul(z, zpt)?;
    let logits = tape.scale(cos, 1.0 / cfg.tau)?;
    let offsets = margin_offsets(tape, n, n, |i| i, cfg)?;
    let logits = tape.add(logits, offsets)?;
    let lse = tape.logsumexp_rows(logits, None)?;
    let pos = tape.pick_columns(logits, (0..n).collect())?;
    let terms = tape.sub(lse, pos)?;
    tape.mean(terms)
}

/// Symmetric NT-Xent(-AM) over all `2N` views.
pub fn nt_xent_symmetric_on_tape(tape: &mut Tape, z: Var, zp: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape.value(z), tape.value(zp))?;
    let n = tape.value(z).rows();
    let m = 2 * n;
    let partner = move |i: usize| (i + n) % m;
    let all = tape.concat_rows(&[z, zp])?;
    let allt = tape.transpose(all)?;
    let cos = tape.matmul(all, allt)?;
    let logits = tape.scale(cos, 1.0 / cfg.tau)?;
    let offsets = margin_offsets(tape, m, m, partner, cfg)?;
    let logits = tape.add(logits, offsets)?;
    let mask = (0..m * m).map(|k| k / m != k % m).collect();
    let lse = tape.logsumexp_rows(logits, Some(mask))?;
    let pos = tape.pick_columns(logits, (0..m).map(partner).collect())?;
    let terms = tape.sub(lse, pos)?;
    tape.mean(terms)
}

/// Queue-based NT-Xent(-AM). `queue` (`K × D`, possibly `K = 0`) is
/// detached, so no gradient ever reaches it.
pub fn nt_xent_queue_on_tape(tape: &mut Tape, z: Var, zp: Var, queue: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_pair(tape.value(z), tape.value(zp))?;
    check_queue(tape.value(z), tape.value(queue))?;
    let queue = tape.detach(queue);
    let prod = tape.mul(z, zp)?;
    let cos = tape.sum_rows(prod)?;
    let pos = tape.scale(cos, 1.0 / cfg.tau)?;
    let pos = tape.add_scalar(pos, -cfg.margin / cfg.tau)?;
    let logits = if tape.value(queue).rows() == 0 {
        pos
    } else {
        let qt = tape.transpose(queue)?;
        let neg = tape.matmul(z, qt)?;
        let neg = tape.scale(neg, 1.0 / cfg.tau)?;
        tape.concat_cols(&[pos, neg])?
    };
    let lse = tape.logsumexp_rows(logits, None)?;
    let terms = tape.sub(lse, pos)?;
    tape.mean(terms)
}

fn evaluate(z: &Tensor, zp: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let zpv = tape.constant(zp.clone());
    let out = f(&mut tape, zv, zpv)?;
    tape.value(out).item()
}

pub fn nt_xent(z: &Tensor, zp: &Tensor, cfg: &LossConfig) -> Result<f64> {
    evaluate(z, zp, |t, a, b| nt_xent_on_tape(t, a, b, cfg))
}

pub fn nt_xent_symmetric(z: &Tensor, zp: &Tensor, cfg: &LossConfig) -> Result<f64> {
    evaluate(z, zp, |t, a, b| nt_xent_symmetric_on_tape(t, a, b, cfg))
}

pub fn nt_xent_queue(z: &Tensor, zp: &Tensor, queue: &Tensor, cfg: &LossConfig) -> Result<f64> {
    evaluate(z, zp, |t, a, b| {
        let q = t.constant(queue.clone());
        nt_xent_queue_on_tape(t, a, b, q, cfg)
    })
}
