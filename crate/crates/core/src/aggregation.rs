//! Aggregation of client adapters that may have different ranks.
//!
//! NAA concatenates the `B` factors column-wise and the `A` factors row-wise
//! and multiplies once, which is exactly `Σ_n B_n·A_n` by the block-matrix
//! identity. HAA averages the factors separately and is only defined for
//! equal ranks; it is kept as the baseline.

use thiserror::Error;

use crate::lora::{LoraAdapter, LoraError};
use crate::model::{ModelError, ModelParams, WeightId};
use crate::scalar::Scalar;
use crate::tensor::{derive_seed, Matrix, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no uploads to aggregate")]
    Empty,
    #[error("upload from client {client_id} targets {got}, expected {expected}")]
    MixedWeights { client_id: u32, expected: WeightId, got: WeightId },
    #[error("upload from client {client_id} has B {b:?} / A {a:?}, inconsistent with {d_in}x{d_out}")]
    Dimensions {
        client_id: u32,
        b: (usize, usize),
        a: (usize, usize),
        d_in: usize,
        d_out: usize,
    },
    #[error("averaging needs equal ranks, got {0:?}")]
    RankMismatch(Vec<usize>),
    #[error("weighted aggregation needs a positive total sample count")]
    NoSamples,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// One client's trained factors for one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterUpload<T> {
    pub client_id: u32,
    pub weight_id: WeightId,
    pub b: Matrix<T>,
    pub a: Matrix<T>,
    pub n_samples: u64,
}

impl<T: Scalar> AdapterUpload<T> {
    pub fn from_adapter(client_id: u32, adapter: &LoraAdapter<T>, n_samples: u64) -> Self {
        Self {
            client_id,
            weight_id: adapter.weight_id(),
            b: adapter.b().clone(),
            a: adapter.a().clone(),
            n_samples,
        }
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    /// `Σ_n B_n·A_n`.
    Sum,
    /// `Σ_n (|D_n|/|D|)·B_n·A_n`.
    #[default]
    Weighted,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Self::Sum),
            "weighted" => Some(Self::Weighted),
            _ => None,
        }
    }
}

/// Which rule the fed server applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    #[default]
    Naa,
    Haa,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Naa => "naa",
            Self::Haa => "haa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "naa" => Some(Self::Naa),
            "haa" => Some(Self::Haa),
            _ => None,
        }
    }
}

/// Validates a nonempty set of uploads for one weight and returns them in
/// ascending client order.
fn sorted_checked<T: Scalar>(uploads: &[AdapterUpload<T>]) -> Result<Vec<&AdapterUpload<T>>> {
    let first = uploads.first().ok_or(AggregationError::Empty)?;
    let (d_in, d_out) = (first.b.rows(), first.a.cols());
    for u in uploads {
        if u.weight_id != first.weight_id {
            return Err(AggregationError::MixedWeights {
                client_id: u.client_id,
                expected: first.weight_id,
                got: u.weight_id,
            });
        }
        if u.b.rows() != d_in || u.a.cols() != d_out || u.b.cols() != u.a.rows() || u.b.cols() == 0 {
            return Err(AggregationError::Dimensions {
                client_id: u.client_id,
                b: u.b.shape(),
                a: u.a.shape(),
                d_in,
                d_out,
            });
        }
    }
    let mut sorted: Vec<&AdapterUpload<T>> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    Ok(sorted)
}

/// `(B_cat, A_cat)` with blocks in ascending client order.
pub fn concat<T: Scalar>(uploads: &[AdapterUpload<T>]) -> Result<(Matrix<T>, Matrix<T>)> {
    let sorted = sorted_checked(uploads)?;
    let bs: Vec<&Matrix<T>> = sorted.iter().map(|u| &u.b).collect();
    let as_: Vec<&Matrix<T>> = sorted.iter().map(|u| &u.a).collect();
    Ok((Matrix::hcat(&bs)?, Matrix::vcat(&as_)?))
}

/// `B_cat·A_cat`; in weighted mode each `B_n` is first scaled by
/// `n_samples_n / Σ n_samples`.
pub fn naa_delta<T: Scalar>(uploads: &[AdapterUpload<T>], mode: AggregationMode) -> Result<Matrix<T>> {
    let sorted = sorted_checked(uploads)?;
    let scaled: Vec<Matrix<T>>;
    let bs: Vec<&Matrix<T>> = match mode {
        AggregationMode::Sum => sorted.iter().map(|u| &u.b).collect(),
        AggregationMode::Weighted => {
            let total: u64 = sorted.iter().map(|u| u.n_samples).sum();
            if total == 0 {
                return Err(AggregationError::NoSamples);
            }
            let total = total as f64;
            scaled = sorted.iter().map(|u| u.b.scale(T::lit(u.n_samples as f64 / total))).collect();
            scaled.iter().collect()
        }
    };
    let as_: Vec<&Matrix<T>> = sorted.iter().map(|u| &u.a).collect();
    Ok(Matrix::hcat(&bs)?.matmul(&Matrix::vcat(&as_)?)?)
}

/// `mean(B_n)·mean(A_n)`; errors unless every upload has the same rank.
pub fn haa_delta<T: Scalar>(uploads: &[AdapterUpload<T>]) -> Result<Matrix<T>> {
    let sorted = sorted_checked(uploads)?;
    let r = sorted[0].rank();
    if sorted.iter().any(|u| u.rank() != r) {
        return Err(AggregationError::RankMismatch(sorted.iter().map(|u| u.rank()).collect()));
    }
    let n = T::from_count(sorted.len());
    let mut b = Matrix::zeros(sorted[0].b.rows(), r);
    let mut a = Matrix::zeros(r, sorted[0].a.cols());
    for u in &sorted {
        b.add_scaled_assign(T::one(), &u.b)?;
        a.add_scaled_assign(T::one(), &u.a)?;
    }
    Ok(b.scale(T::one() / n).matmul(&a.scale(T::one() / n))?)
}

/// Dispatches on the aggregator. HAA always averages.
pub fn aggregate<T: Scalar>(uploads: &[AdapterUpload<T>], aggregator: Aggregator, mode: AggregationMode) -> Result<Matrix<T>> {
    match aggregator {
        Aggregator::Naa => naa_delta(uploads, mode),
        Aggregator::Haa => haa_delta(uploads),
    }
}

/// `W ← W + delta` on `weight_id`, then every adapter in `adapters` is
/// reinitialized at its current rank (`B = 0`, fresh Gaussian `A`). The
/// `i`-th adapter draws from `derive_seed(seed, [i])`.
pub fn apply_and_reinit<T: Scalar>(
    params: &mut ModelParams<T>,
    weight_id: WeightId,
    delta: &Matrix<T>,
    adapters: &[LoraAdapter<T>],
    seed: u64,
) -> Result<Vec<LoraAdapter<T>>> {
    params.merge_update(weight_id, delta)?;
    Ok(adapters
        .iter()
        .enumerate()
        .map(|(i, ad)| ad.reinit(derive_seed(seed, &[i as u64])))
        .collect())
}
