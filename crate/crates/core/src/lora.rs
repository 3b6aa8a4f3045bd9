//! LoRA adapter algebra.
//!
//! An adapter attached to a frozen weight `W₀` (`d_i x d_o`) holds
//! `B` (`d_i x r`) and `A` (`r x d_o`); the adapted weight is
//! `W₀ + B·A`. There is no `alpha / r` scaling factor: the incremental
//! update is exactly `B·A`, which is what makes concatenation-based
//! aggregation exact. A weight without an adapter is rank 0.

use thiserror::Error;

use crate::model::WeightId;
use crate::scalar::Scalar;
use crate::tensor::{gaussian_init, Matrix, TensorError};

/// Standard deviation used when (re)initializing `A`.
pub const SIGMA_A: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoraError {
    #[error("rank {rank} outside [1, {max}] for a {d_in}x{d_out} weight")]
    RankOutOfRange {
        rank: usize,
        max: usize,
        d_in: usize,
        d_out: usize,
    },
    #[error("factor shapes B {b:?} and A {a:?} are inconsistent")]
    FactorShapes { b: (usize, usize), a: (usize, usize) },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LoraError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    weight_id: WeightId,
    b: Matrix<T>,
    a: Matrix<T>,
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    let max = d_in.min(d_out);
    if rank == 0 || rank > max {
        return Err(LoraError::RankOutOfRange {
            rank,
            max,
            d_in,
            d_out,
        });
    }
    Ok(())
}

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter: `B = 0`, `A ~ N(0, SIGMA_A²)` from `seed`.
    pub fn new(weight_id: WeightId, rank: usize, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        check_rank(rank, d_in, d_out)?;
        Ok(Self {
            weight_id,
            b: Matrix::zeros(d_in, rank),
            a: gaussian_init(rank, d_out, SIGMA_A, seed),
        })
    }

    /// Wraps trained (or received) factors.
    pub fn from_factors(weight_id: WeightId, b: Matrix<T>, a: Matrix<T>) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(LoraError::FactorShapes {
                b: b.shape(),
                a: a.shape(),
            });
        }
        check_rank(b.cols(), b.rows(), a.cols())?;
        Ok(Self { weight_id, b, a })
    }

    pub fn weight_id(&self) -> WeightId {
        self.weight_id
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn d_in(&self) -> usize {
        self.b.rows()
    }

    pub fn d_out(&self) -> usize {
        self.a.cols()
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    /// The incremental update `ΔW = B·A`.
    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul(&self.a).expect("factor shapes checked at construction")
    }

    /// `x·W₀ + (x·B)·A`, never materializing `B·A`.
    pub fn forward(&self, x: &Matrix<T>, w0: &Matrix<T>) -> Result<Matrix<T>> {
        if w0.shape() != (self.d_in(), self.d_out()) {
            return Err(TensorError::Shape {
                op: "adapted_forward",
                left: w0.shape(),
                right: (self.d_in(), self.d_out()),
            }
            .into());
        }
        let mut out = x.matmul(w0)?;
        let low = x.matmul(&self.b)?.matmul(&self.a)?;
        out.add_scaled_assign(T::one(), &low)?;
        Ok(out)
    }

    /// `(dB, dA)` for upstream gradient `g = ∂L/∂(output)` of
    /// [`forward`](Self::forward) with input `x`:
    /// `dB = xᵀ·g·Aᵀ`, `dA = Bᵀ·xᵀ·g`.
    pub fn grads(&self, x: &Matrix<T>, upstream: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        if x.cols() != self.d_in() || upstream.cols() != self.d_out() || x.rows() != upstream.rows() {
            return Err(TensorError::Shape {
                op: "adapter_grads",
                left: x.shape(),
                right: upstream.shape(),
            }
            .into());
        }
        // g·Aᵀ is n x r and xᵀ·... is d_i x r.
        let g_at = upstream.matmul_t(&self.a)?;
        let db = x.t_matmul(&g_at)?;
        // (x·B)ᵀ·g is r x d_o.
        let xb = x.matmul(&self.b)?;
        let da = xb.t_matmul(upstream)?;
        Ok((db, da))
    }

    /// Gradient flowing back to the input: `g·(W₀ + B·A)ᵀ`, factored.
    pub fn input_grad(&self, upstream: &Matrix<T>, w0: &Matrix<T>) -> Result<Matrix<T>> {
        let mut dx = upstream.matmul_t(w0)?;
        let low = upstream.matmul_t(&self.a)?.matmul_t(&self.b)?;
        dx.add_scaled_assign(T::one(), &low)?;
        Ok(dx)
    }

    /// Plain gradient-descent step on both factors.
    pub fn sgd_step(&mut self, lr: T, db: &Matrix<T>, da: &Matrix<T>) -> Result<()> {
        self.b.add_scaled_assign(-lr, db)?;
        self.a.add_scaled_assign(-lr, da)?;
        Ok(())
    }

    /// Same weight and rank, `B = 0`, fresh Gaussian `A`.
    pub fn reinit(&self, seed: u64) -> Self {
        Self {
            weight_id: self.weight_id,
            b: Matrix::zeros(self.d_in(), self.rank()),
            a: gaussian_init(self.rank(), self.d_out(), SIGMA_A, seed),
        }
    }

    /// Reinitialized at a new rank (the planner changed it).
    pub fn reinit_with_rank(&self, rank: usize, seed: u64) -> Result<Self> {
        Self::new(self.weight_id, rank, self.d_in(), self.d_out(), seed)
    }

    /// Trainable parameter count `r·(d_i + d_o)`.
    pub fn num_params(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }
}

/// Free-function form of [`LoraAdapter::new`].
pub fn new_adapter<T: Scalar>(
    weight_id: WeightId,
    rank: usize,
    d_in: usize,
    d_out: usize,
    seed: u64,
) -> Result<LoraAdapter<T>> {
    LoraAdapter::new(weight_id, rank, d_in, d_out, seed)
}

pub fn delta<T: Scalar>(adapter: &LoraAdapter<T>) -> Matrix<T> {
    adapter.delta()
}

pub fn adapted_forward<T: Scalar>(x: &Matrix<T>, w0: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    adapter.forward(x, w0)
}

pub fn adapter_grads<T: Scalar>(
    x: &Matrix<T>,
    upstream: &Matrix<T>,
    adapter: &LoraAdapter<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    adapter.grads(x, upstream)
}

pub fn reinit<T: Scalar>(adapter: &LoraAdapter<T>, seed: u64) -> LoraAdapter<T> {
    adapter.reinit(seed)
}
