//! Weight importance: the resource-normalized gradient-weight product and its
//! round-to-round blending.
//!
//! The table blends the cost-free numerator `Σ|w·∂L/∂w|` and divides by a
//! cost only when a `(weight, rank)` candidate is scored. Ranks change from
//! round to round, so blending the numerator keeps the history meaningful;
//! when the rank is fixed this is identical to blending the ratio.
//!
//! The first observation of a weight (or any observation while the blended
//! value is still zero) is taken as-is, since the balance parameter is
//! undefined with zero history.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::WeightId;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImportanceError {
    #[error("fine-tuning cost must be positive, got {0}")]
    NonPositiveCost(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `Σ_j |w_j · g_j|` over all entries.
pub fn gw_numerator<T: Scalar>(weights: &Matrix<T>, grads: &Matrix<T>) -> Result<f64, ImportanceError> {
    if weights.shape() != grads.shape() {
        return Err(TensorError::Shape {
            op: "gw_numerator",
            left: weights.shape(),
            right: grads.shape(),
        }
        .into());
    }
    Ok(weights
        .as_slice()
        .iter()
        .zip(grads.as_slice())
        .map(|(&w, &g)| (w * g).abs().to_f64().unwrap_or(0.0))
        .sum())
}

/// Importance per unit of cost: `numerator / cost`.
pub fn rngwp(numerator: f64, cost: f64) -> Result<f64, ImportanceError> {
    if cost <= 0.0 || cost.is_nan() {
        return Err(ImportanceError::NonPositiveCost(cost));
    }
    Ok(numerator / cost)
}

/// Largest `f64` below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Balance between history and the current observation at round `t` of `T`:
/// `γ_t = 1 - exp(-(current · t) / (hist · T))`.
///
/// Capped at the largest float below 1, where the exponential underflows,
/// so the current observation never loses all of its weight.
pub fn balance(current: f64, hist: f64, t: usize, total_rounds: usize) -> f64 {
    debug_assert!(hist > 0.0 && total_rounds >= 1);
    (-(-(current * t as f64) / (hist * total_rounds as f64)).exp_m1()).min(BELOW_ONE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceRecord {
    pub weight_id: WeightId,
    pub blended_numerator: f64,
    pub current_numerator: f64,
    pub last_update_round: usize,
}

impl ImportanceRecord {
    pub fn new(weight_id: WeightId) -> Self {
        Self {
            weight_id,
            blended_numerator: 0.0,
            current_numerator: 0.0,
            last_update_round: 0,
        }
    }
}

/// `Ī_t = γ_t·Ī_{t-1} + (1-γ_t)·Ĩ_t`, bootstrapped with `Ī = Ĩ` at `t = 1`
/// or while the history is zero.
pub fn update(record: &ImportanceRecord, current_numerator: f64, t: usize, total_rounds: usize) -> ImportanceRecord {
    let current = current_numerator.max(0.0);
    let prev = record.blended_numerator;
    let blended = if t <= 1 || prev <= 0.0 {
        current
    } else {
        let gamma = balance(current, prev, t, total_rounds);
        gamma * prev + (1.0 - gamma) * current
    };
    ImportanceRecord {
        weight_id: record.weight_id,
        blended_numerator: blended,
        current_numerator: current,
        last_update_round: t,
    }
}

/// One record per trainable weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    records: BTreeMap<WeightId, ImportanceRecord>,
    total_rounds: usize,
}

impl ImportanceTable {
    pub fn new(n_blocks: usize, total_rounds: usize) -> Self {
        Self {
            records: WeightId::all(n_blocks).map(|id| (id, ImportanceRecord::new(id))).collect(),
            total_rounds: total_rounds.max(1),
        }
    }

    /// Table with explicit blended numerators, e.g. for planner inspection.
    pub fn from_numerators(numerators: impl IntoIterator<Item = (WeightId, f64)>, total_rounds: usize) -> Self {
        Self {
            records: numerators
                .into_iter()
                .map(|(id, n)| {
                    (
                        id,
                        ImportanceRecord {
                            weight_id: id,
                            blended_numerator: n.max(0.0),
                            current_numerator: n.max(0.0),
                            last_update_round: 0,
                        },
                    )
                })
                .collect(),
            total_rounds: total_rounds.max(1),
        }
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    pub fn get(&self, id: WeightId) -> Option<&ImportanceRecord> {
        self.records.get(&id)
    }

    /// Blended numerator, zero for unknown weights.
    pub fn blended(&self, id: WeightId) -> f64 {
        self.records.get(&id).map_or(0.0, |r| r.blended_numerator)
    }

    pub fn records(&self) -> impl Iterator<Item = &ImportanceRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Folds round `t`'s observations into the table. Weights absent from
    /// `current` keep their record untouched.
    pub fn update_round(&mut self, current: &BTreeMap<WeightId, f64>, t: usize) {
        for (&id, &value) in current {
            let rec = self.records.entry(id).or_insert_with(|| ImportanceRecord::new(id));
            *rec = update(rec, value, t, self.total_rounds);
        }
    }

    /// Copy rescaled so that the mean blended numerator equals
    /// `reference_cost`. Under this scaling a weight of average importance
    /// configured at a reference cost scores exactly 1, which gives the
    /// global-importance difference a scale-free unit. Positive rescaling
    /// does not change any ordering or argmax. An all-zero table is returned
    /// unchanged.
    pub fn normalized(&self, reference_cost: f64) -> Self {
        let n = self.records.len().max(1) as f64;
        let mean = self.records.values().map(|r| r.blended_numerator).sum::<f64>() / n;
        if mean <= 0.0 || !mean.is_finite() {
            return self.clone();
        }
        let factor = reference_cost / mean;
        let mut out = self.clone();
        for r in out.records.values_mut() {
            r.blended_numerator *= factor;
            r.current_numerator *= factor;
        }
        out
    }
}

/// How per-client observations of one weight are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClientReduction {
    /// Plain sum over clients.
    #[default]
    Sum,
    /// Mean weighted by each client's sample count.
    WeightedMean,
}

impl ClientReduction {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::WeightedMean => "weighted_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Self::Sum),
            "weighted_mean" => Some(Self::WeightedMean),
            _ => None,
        }
    }
}

/// Combines `(n_samples, numerators)` pairs, one per client, into one map.
pub fn reduce_clients(per_client: &[(u64, BTreeMap<WeightId, f64>)], mode: ClientReduction) -> BTreeMap<WeightId, f64> {
    let total: u64 = per_client.iter().map(|(n, _)| *n).sum();
    let mut out = BTreeMap::new();
    for (n, obs) in per_client {
        let w = match mode {
            ClientReduction::Sum => 1.0,
            ClientReduction::WeightedMean if total > 0 => *n as f64 / total as f64,
            ClientReduction::WeightedMean => 1.0 / per_client.len() as f64,
        };
        for (&id, &v) in obs {
            *out.entry(id).or_insert(0.0) += w * v;
        }
    }
    out
}
