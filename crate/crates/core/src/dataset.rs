//! Synthetic periodic-copy task.
//!
//! Each sequence draws `period` random tokens and repeats them until it has
//! `seq_len + 1` tokens; inputs are the first `seq_len`, targets the last
//! `seq_len`. Every target after the first `period - 1` positions equals
//! the input `period - 1` positions back, so the achievable loss is bounded
//! by `(period - 1) / seq_len · ln(vocab)`.

use crate::model::{ModelError, TokenBatch};
use crate::tensor::{derive_seed, GaussianStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub samples_per_client: usize,
    pub period: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples_per_client: 64,
            period: 2,
        }
    }
}

/// One client's sequences (each `seq_len + 1` tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    seq_len: usize,
    sequences: Vec<Vec<usize>>,
}

const TAG_DATA: u64 = 0xDA7A;

impl Shard {
    pub fn generate(spec: DatasetSpec, vocab_size: usize, seq_len: usize, client_id: u32, seed: u64) -> Self {
        let mut stream = GaussianStream::new(derive_seed(seed, &[TAG_DATA, client_id as u64]));
        let period = spec.period.max(1);
        let sequences = (0..spec.samples_per_client)
            .map(|_| {
                let motif: Vec<usize> = (0..period)
                    .map(|_| ((stream.next_uniform() * vocab_size as f64) as usize).min(vocab_size - 1))
                    .collect();
                (0..=seq_len).map(|i| motif[i % period]).collect()
            })
            .collect();
        Self { seq_len, sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// `batch` consecutive sequences starting at `start`, wrapping around.
    pub fn batch(&self, start: usize, batch: usize) -> Result<(TokenBatch, TokenBatch), ModelError> {
        let mut inputs = Vec::with_capacity(batch * self.seq_len);
        let mut targets = Vec::with_capacity(batch * self.seq_len);
        for i in 0..batch {
            let s = &self.sequences[(start + i) % self.sequences.len()];
            inputs.extend_from_slice(&s[..self.seq_len]);
            targets.extend_from_slice(&s[1..]);
        }
        Ok((
            TokenBatch::new(batch, self.seq_len, inputs)?,
            TokenBatch::new(batch, self.seq_len, targets)?,
        ))
    }

    /// Batch used at round `t` (1-based): round-robin over the shard.
    pub fn round_batch(&self, t: usize, batch: usize) -> Result<(TokenBatch, TokenBatch), ModelError> {
        self.batch((t.saturating_sub(1) * batch) % self.sequences.len().max(1), batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_shift_inputs_and_repeat() {
        let spec = DatasetSpec {
            samples_per_client: 5,
            period: 3,
        };
        let shard = Shard::generate(spec, 7, 8, 0, 1);
        assert_eq!(shard.len(), 5);
        let (x, y) = shard.batch(3, 4).unwrap();
        for b in 0..4 {
            let xs = &x.ids()[b * 8..(b + 1) * 8];
            let ys = &y.ids()[b * 8..(b + 1) * 8];
            assert_eq!(&xs[1..], &ys[..7]);
            for i in 2..8 {
                assert_eq!(ys[i], xs[i - 2]);
            }
            assert!(xs.iter().all(|&t| t < 7));
        }
        assert_eq!(shard, Shard::generate(spec, 7, 8, 0, 1));
        assert_ne!(shard, Shard::generate(spec, 7, 8, 1, 1));
    }
}
