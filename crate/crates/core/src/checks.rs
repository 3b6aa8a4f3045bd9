//! Self-check suites behind the `agg-check` and `grad-check` commands.

use std::time::{Duration, Instant};

use crate::aggregation::{haa_delta, naa_delta, AdapterUpload, AggregationError, AggregationMode};
use crate::gradcheck::{check_random_model, GradCheckReport, FD_STEP};
use crate::model::{ModelConfig, ModelError, SplitPoint, WeightId, WeightKind};
use crate::planner::RankSet;
use crate::tensor::{derive_seed, gaussian_init, GaussianStream, Matrix};

/// NAA must match the product-sum within this max-abs error.
pub const NAA_TOLERANCE: f64 = 1e-9;
/// HAA counts as noisy above this relative Frobenius deviation.
pub const HAA_NOISE_FLOOR: f64 = 0.01;
/// Finite-difference agreement required of every gradient.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn pick(s: &mut GaussianStream, lo: usize, hi: usize) -> usize {
    (lo + (s.next_uniform() * (hi - lo + 1) as f64) as usize).min(hi)
}

/// `n` uploads for one `d × d` weight with i.i.d. `N(0, 1)` factors.
pub fn random_uploads(ranks: &[usize], d: usize, seed: u64) -> Vec<AdapterUpload<f64>> {
    ranks
        .iter()
        .enumerate()
        .map(|(n, &r)| AdapterUpload {
            client_id: n as u32,
            weight_id: WeightId::new(0, WeightKind::Q),
            b: gaussian_init(d, r, 1.0, derive_seed(seed, &[n as u64, 0])),
            a: gaussian_init(r, d, 1.0, derive_seed(seed, &[n as u64, 1])),
            n_samples: 1 + n as u64,
        })
        .collect()
}

/// `Σ_n B_n A_n` by explicit loops.
pub fn product_sum(uploads: &[AdapterUpload<f64>]) -> Matrix<f64> {
    let (rows, cols) = (uploads[0].b.rows(), uploads[0].a.cols());
    Matrix::from_fn(rows, cols, |i, j| {
        uploads
            .iter()
            .map(|u| (0..u.rank()).map(|k| u.b[(i, k)] * u.a[(k, j)]).sum::<f64>())
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaaReport {
    pub trials: usize,
    pub max_error: f64,
    pub elapsed: Duration,
}

impl NaaReport {
    pub fn passed(&self) -> bool {
        self.max_error <= NAA_TOLERANCE
    }
}

/// Trial shapes: 2–5 clients, ranks from `Q` (capped at `d`), `d` in
/// 8..=64. Sum-mode NAA against [`product_sum`].
pub fn naa_exactness(trials: usize, seed: u64) -> Result<NaaReport, AggregationError> {
    let started = Instant::now();
    let q = RankSet::default();
    let mut max_error: f64 = 0.0;
    for trial in 0..trials {
        let ts = derive_seed(seed, &[trial as u64]);
        let mut s = GaussianStream::new(ts);
        let n = pick(&mut s, 2, 5);
        let d = pick(&mut s, 8, 64);
        let allowed: Vec<usize> = q.as_slice().iter().copied().filter(|&r| r <= d).collect();
        let ranks: Vec<usize> = (0..n).map(|_| allowed[pick(&mut s, 0, allowed.len() - 1)]).collect();
        let uploads = random_uploads(&ranks, d, derive_seed(ts, &[7]));
        let got = naa_delta(&uploads, AggregationMode::Sum)?;
        max_error = max_error.max(got.max_abs_diff(&product_sum(&uploads))?);
    }
    Ok(NaaReport {
        trials,
        max_error,
        elapsed: started.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaaReport {
    pub trials: usize,
    /// Trials whose deviation exceeded [`HAA_NOISE_FLOOR`].
    pub noisy: usize,
    pub min_deviation: f64,
    /// HAA refused uploads of differing ranks.
    pub rejects_mixed_ranks: bool,
}

impl HaaReport {
    /// At least 99% of trials noisy and mixed ranks rejected.
    pub fn passed(&self) -> bool {
        self.noisy * 100 >= self.trials * 99 && self.rejects_mixed_ranks
    }
}

/// `‖HAA − mean_n B_n A_n‖_F / ‖mean_n B_n A_n‖_F` on i.i.d. uploads of
/// a shared rank.
pub fn haa_noise(trials: usize, seed: u64) -> Result<HaaReport, AggregationError> {
    let q = RankSet::default();
    let mut noisy = 0;
    let mut min_deviation = f64::INFINITY;
    for trial in 0..trials {
        let ts = derive_seed(seed, &[trial as u64]);
        let mut s = GaussianStream::new(ts);
        let n = pick(&mut s, 2, 5);
        let d = pick(&mut s, 8, 32);
        let allowed: Vec<usize> = q.as_slice().iter().copied().filter(|&r| r <= d).collect();
        let r = allowed[pick(&mut s, 0, allowed.len() - 1)];
        let uploads = random_uploads(&vec![r; n], d, derive_seed(ts, &[7]));
        let truth = product_sum(&uploads).scale(1.0 / n as f64);
        let dev = haa_delta(&uploads)?.sub(&truth)?.frobenius_norm() / truth.frobenius_norm();
        min_deviation = min_deviation.min(dev);
        if dev > HAA_NOISE_FLOOR {
            noisy += 1;
        }
    }
    let mixed = random_uploads(&[1, 2], 8, seed);
    let rejects_mixed_ranks = matches!(haa_delta(&mixed), Err(AggregationError::RankMismatch(_)));
    Ok(HaaReport {
        trials,
        noisy,
        min_deviation,
        rejects_mixed_ranks,
    })
}

/// The model every gradient check uses: 2 blocks, `d_model = 8`.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        seq_len: 6,
    }
}

/// One finite-difference check per seed in `first_seed..first_seed + seeds`.
pub fn grad_check(seeds: usize, first_seed: u64) -> Result<Vec<GradCheckReport>, ModelError> {
    let cfg = grad_check_config();
    let split = SplitPoint::new(1, cfg.n_blocks)?;
    (0..seeds as u64).map(|i| check_random_model(cfg, 2, split, first_seed + i, FD_STEP)).collect()
}
