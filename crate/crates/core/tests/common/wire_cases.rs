//! Seeded generator of valid wire messages.

use hetsplit::aggregation::AdapterUpload;
use hetsplit::model::{TokenBatch, WeightId, WeightKind};
use hetsplit::planner::Assignment;
use hetsplit::tensor::{GaussianStream, Matrix};
use hetsplit::wire::{Activations, AggUpdate, Barrier, CutGrad, PlanMessage, WireMessage};

pub struct MessageGen(GaussianStream);

impl MessageGen {
    pub fn new(seed: u64) -> Self {
        Self(GaussianStream::new(seed))
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.0.next_uniform() * n as f64) as usize).min(n - 1)
    }

    fn u32(&mut self) -> u32 {
        (self.0.next_uniform() * 4_294_967_296.0) as u32
    }

    fn value(&mut self) -> f64 {
        // mixes ordinary magnitudes with extremes and signed zeros
        match self.below(8) {
            0 => 0.0,
            1 => -0.0,
            2 => self.0.next_standard_normal() * 1e30,
            3 => self.0.next_standard_normal() * 1e-30,
            _ => self.0.next_standard_normal(),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |_, _| self.value() as f32)
    }

    fn weight(&mut self) -> WeightId {
        WeightId::new(self.below(64), WeightKind::ALL[self.below(4)])
    }

    fn weights(&mut self) -> Vec<WeightId> {
        let mut ids: Vec<WeightId> = (0..self.below(9)).map(|_| self.weight()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn next_message(&mut self) -> WireMessage {
        let d = 1 + self.below(12);
        match self.below(6) {
            0 => {
                let (batch, seq) = (1 + self.below(3), 1 + self.below(6));
                let ids = (0..batch * seq).map(|_| self.below(1000)).collect();
                WireMessage::Activations(Activations {
                    client_id: self.u32(),
                    round: self.u32(),
                    cut: self.matrix(batch * seq, d),
                    targets: TokenBatch::new(batch, seq, ids).unwrap(),
                })
            }
            1 => {
                let rows = 1 + self.below(20);
                WireMessage::CutGrad(CutGrad {
                    client_id: self.u32(),
                    round: self.u32(),
                    loss: self.value().abs(),
                    grad: self.matrix(rows, d),
                })
            }
            2 => {
                let r = 1 + self.below(8);
                WireMessage::AdapterUpload(AdapterUpload {
                    client_id: self.u32(),
                    weight_id: self.weight(),
                    b: self.matrix(d, r),
                    a: self.matrix(r, d),
                    n_samples: self.u32() as u64 * 3,
                })
            }
            3 => {
                let fresh_a = if self.below(2) == 0 {
                    None
                } else {
                    let r = 1 + self.below(8);
                    Some(self.matrix(r, d))
                };
                WireMessage::AggUpdate(AggUpdate {
                    weight_id: self.weight(),
                    delta: self.matrix(d, d),
                    fresh_a,
                })
            }
            4 => {
                let assignment: Assignment = self.weights().into_iter().map(|id| (id, 1 << self.below(6))).collect();
                WireMessage::Plan(PlanMessage {
                    round: self.u32(),
                    client_id: self.u32(),
                    split_j: 1 + self.below(8) as u16,
                    assignment,
                })
            }
            _ => {
                let numerators = self.weights().into_iter().map(|id| (id, self.value().abs())).collect();
                WireMessage::Barrier(Barrier {
                    round: self.u32(),
                    client_id: self.u32(),
                    numerators,
                })
            }
        }
    }
}
