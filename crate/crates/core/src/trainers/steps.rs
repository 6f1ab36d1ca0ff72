use crate::autodiff::{AdamState, Tape, Tensor};
use crate::encoder::{encode_batch_on_tape, EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::losses::{nt_xent_on_tape, nt_xent_queue_on_tape, nt_xent_symmetric_on_tape, LossConfig};

use super::queue::{EmaEncoder, MemoryQueue};
use super::views::Views;

/// Loss and gradients of one SimCLR batch, before any update.
#[derive(Clone, Debug)]
pub struct SimclrObjective {
    pub loss: f64,
    pub param_grads: Vec<Tensor>,
    /// Gradient w.r.t. the raw embeddings of the first and second views.
    pub view_grads: [Tensor; 2],
}

/// Loss and gradients of one MoCo batch, before any update.
#[derive(Clone, Debug)]
pub struct MocoObjective {
    pub loss: f64,
    pub query_grads: Vec<Tensor>,
    /// Gradient reaching the key-encoder parameters; all zeros by design.
    pub key_grads: Vec<Tensor>,
    /// Gradient reaching the queue rows; all zeros by design.
    pub queue_grad: Tensor,
    /// Normalized key embeddings used as positives, to be enqueued.
    pub keys: Tensor,
}

pub fn simclr_objective(
    params: &EncoderParams,
    views: &Views,
    cfg: &LossConfig,
    symmetric: bool,
) -> Result<SimclrObjective> {
    if views.len() < 2 {
        return Err(Error::Contract(format!(
            "SimCLR needs at least 2 utterances per batch, got {}",
            views.len()
        )));
    }
    let mut tape = Tape::new();
    let p = params.register(&mut tape, true);
    let (raw1, z) = encode_batch_on_tape(&mut tape, &p, &views.first)?;
    let (raw2, zp) = encode_batch_on_tape(&mut tape, &p, &views.second)?;
    let loss = if symmetric {
        nt_xent_symmetric_on_tape(&mut tape, z, zp, cfg)?
    } else {
        nt_xent_on_tape(&mut tape, z, zp, cfg)?
    };
    let value = tape.value(loss).item()?;
    let shape1 = tape.value(raw1).shape().to_vec();
    let shape2 = tape.value(raw2).shape().to_vec();
    let g = tape.backward(loss)?;
    Ok(SimclrObjective {
        loss: value,
        param_grads: p
            .vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, t)| g.get_or_zeros(*v, t.shape()))
            .collect(),
        view_grads: [g.get_or_zeros(raw1, &shape1), g.get_or_zeros(raw2, &shape2)],
    })
}

pub fn moco_objective(
    query: &EncoderParams,
    key: &EncoderParams,
    queue: &MemoryQueue,
    views: &Views,
    cfg: &LossConfig,
) -> Result<MocoObjective> {
    let mut tape = Tape::new();
    let qp = query.register(&mut tape, true);
    // Key parameters are recorded as differentiable leaves only so that the
    // absence of gradient is observable; the detach below cuts them off.
    let kp = key.register(&mut tape, true);
    let (_, z) = encode_batch_on_tape(&mut tape, &qp, &views.first)?;
    let (_, zk) = encode_batch_on_tape(&mut tape, &kp, &views.second)?;
    let zk = tape.detach(zk);
    let negatives = queue.negatives();
    let qshape = negatives.shape().to_vec();
    let qv = tape.leaf(negatives);
    let loss = nt_xent_queue_on_tape(&mut tape, z, zk, qv, cfg)?;
    let value = tape.value(loss).item()?;
    let keys = tape.value(zk).clone();
    let g = tape.backward(loss)?;
    let grads = |vars: &[crate::autodiff::Var], params: &EncoderParams| -> Vec<Tensor> {
        vars.iter()
            .zip(&params.tensors)
            .map(|(v, t)| g.get_or_zeros(*v, t.shape()))
            .collect()
    };
    Ok(MocoObjective {
        loss: value,
        query_grads: grads(&qp.vars, query),
        key_grads: grads(&kp.vars, key),
        queue_grad: g.get_or_zeros(qv, &qshape),
        keys,
    })
}

fn check_loss(loss: f64, batch_seed: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { seed: batch_seed })
    }
}

/// One SimCLR update: loss over both views, backward, Adam. Returns the loss.
pub fn simclr_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    views: &Views,
    cfg: &LossConfig,
    symmetric: bool,
    batch_seed: u64,
) -> Result<f64> {
    let obj = simclr_objective(params, views, cfg, symmetric)?;
    check_loss(obj.loss, batch_seed)?;
    adam.step(&PARAM_NAMES, &mut params.tensors, &obj.param_grads)?;
    Ok(obj.loss)
}

/// One MoCo update: Adam on the query encoder, then the EMA update of the key
/// encoder, then the key embeddings used in the loss are enqueued.
pub fn moco_step(
    query: &mut EncoderParams,
    adam: &mut AdamState,
    key: &mut EmaEncoder,
    queue: &mut MemoryQueue,
    views: &Views,
    cfg: &LossConfig,
    batch_seed: u64,
) -> Result<f64> {
    let obj = moco_objective(query, &key.params, queue, views, cfg)?;
    check_loss(obj.loss, batch_seed)?;
    adam.step(&PARAM_NAMES, &mut query.tensors, &obj.query_grads)?;
    key.update(query)?;
    queue.enqueue(&obj.keys)?;
    Ok(obj.loss)
}
