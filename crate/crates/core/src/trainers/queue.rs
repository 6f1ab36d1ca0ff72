use crate::autodiff::Tensor;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

/// FIFO ring buffer of unit-norm key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    buffer: Vec<f64>,
    dim: usize,
    capacity: usize,
    write_head: usize,
    filled: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            buffer: vec![0.0; capacity * dim],
            dim,
            capacity,
            write_head: 0,
            filled: 0,
        }
    }

    pub fn from_parts(buffer: Tensor, write_head: usize, filled: usize) -> Result<Self> {
        let (capacity, dim) = buffer.dims2("queue")?;
        if filled > capacity || (capacity > 0 && write_head >= capacity) {
            return Err(Error::Contract(format!(
                "queue state head={write_head} filled={filled} capacity={capacity}"
            )));
        }
        Ok(Self {
            buffer: buffer.into_data(),
            dim,
            capacity,
            write_head,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn write_head(&self) -> usize {
        self.write_head
    }

    /// Whole storage block, `capacity × dim`.
    pub fn storage(&self) -> Tensor {
        Tensor::from_parts(vec![self.capacity, self.dim], self.buffer.clone())
    }

    /// The `filled` valid rows in storage order.
    pub fn negatives(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.filled, self.dim],
            self.buffer[..self.filled * self.dim].to_vec(),
        )
    }

    /// Valid rows from oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<f64>> {
        let start = if self.filled < self.capacity { 0 } else { self.write_head };
        (0..self.filled)
            .map(|k| {
                let slot = (start + k) % self.capacity;
                self.buffer[slot * self.dim..(slot + 1) * self.dim].to_vec()
            })
            .collect()
    }

    /// Append rows in order, overwriting the oldest entries once full.
    pub fn enqueue(&mut self, rows: &Tensor) -> Result<()> {
        let (n, d) = rows.dims2("enqueue")?;
        if d != self.dim {
            return Err(Error::ShapeMismatch {
                op: "enqueue",
                left: vec![self.capacity, self.dim],
                right: rows.shape().to_vec(),
            });
        }
        for i in 0..n {
            let norm = rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("enqueued row {i} has norm {norm}")));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for i in 0..n {
            let slot = self.write_head;
            self.buffer[slot * d..(slot + 1) * d].copy_from_slice(rows.row(i));
            self.write_head = (slot + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Key encoder tracking the query encoder by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaEncoder {
    pub params: EncoderParams,
    pub momentum: f64,
}

impl EmaEncoder {
    pub fn new(params: EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("ema momentum {momentum} not in [0, 1]")));
        }
        Ok(Self { params, momentum })
    }

    /// `key ← momentum·key + (1 − momentum)·query`.
    pub fn update(&mut self, query: &EncoderParams) -> Result<()> {
        let m = self.momentum;
        for (k, q) in self.params.tensors.iter_mut().zip(&query.tensors) {
            if k.shape() != q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ema",
                    left: k.shape().to_vec(),
                    right: q.shape().to_vec(),
                });
            }
            for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fifo_overwrites_oldest() {
        let mut q = MemoryQueue::new(3, 2);
        q.enqueue(&unit_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(q.len(), 2);
        q.enqueue(&unit_rows(&[[-1.0, 0.0], [0.0, -1.0]])).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(
            q.ordered(),
            vec![vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]
        );
    }

    #[test]
    fn rejects_non_unit_rows() {
        let mut q = MemoryQueue::new(2, 2);
        assert!(q.enqueue(&unit_rows(&[[1.0, 1.0]])).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn ema_probes() {
        let query = EncoderParams::init(1, 4, 3, 2).unwrap();
        let key = EncoderParams::init(2, 4, 3, 2).unwrap();
        let mut frozen = EmaEncoder::new(key.clone(), 1.0).unwrap();
        frozen.update(&query).unwrap();
        assert_eq!(frozen.params, key);
        let mut copy = EmaEncoder::new(key, 0.0).unwrap();
        copy.update(&query).unwrap();
        assert_eq!(copy.params, query);
        assert!(EmaEncoder::new(query, 1.5).is_err());
    }
}
