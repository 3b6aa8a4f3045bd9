//! Central finite-difference gradient checks.
//!
//! The numerical side only ever calls forward passes ([`loss_full`] and
//! [`forward_server`]); the analytic side goes through the split
//! client/server backward. A check therefore also exercises the cut.

use crate::lora::LoraAdapter;
use crate::model::{
    backward_client, forward_client, forward_server, loss_and_grad_server, loss_full, AdapterSet, ModelConfig,
    ModelParams, Result, SplitPoint, TokenBatch, WeightId,
};
use crate::tensor::{derive_seed, gaussian_init, GaussianStream, Matrix};

/// Default step `h`.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely instead of
/// relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn central_difference(h: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

fn perturbed(m: &Matrix<f64>, idx: usize, by: f64) -> Matrix<f64> {
    let mut out = m.clone();
    out.as_mut_slice()[idx] += by;
    out
}

/// Numerical `(dB, dA)` for every adapter in `adapters`.
pub fn fd_adapter_grads(
    params: &ModelParams<f64>,
    adapters: &AdapterSet<f64>,
    tokens: &TokenBatch,
    targets: &TokenBatch,
    h: f64,
) -> Result<Vec<(WeightId, Matrix<f64>, Matrix<f64>)>> {
    let mut out = Vec::new();
    for (&id, ad) in adapters {
        let mut db = Matrix::zeros(ad.b().rows(), ad.b().cols());
        let mut da = Matrix::zeros(ad.a().rows(), ad.a().cols());
        for idx in 0..db.as_slice().len() {
            db.as_mut_slice()[idx] = central_difference(h, |eps| {
                let mut trial = adapters.clone();
                trial.insert(id, LoraAdapter::from_factors(id, perturbed(ad.b(), idx, eps), ad.a().clone())?);
                loss_full(params, &trial, tokens, targets)
            })?;
        }
        for idx in 0..da.as_slice().len() {
            da.as_mut_slice()[idx] = central_difference(h, |eps| {
                let mut trial = adapters.clone();
                trial.insert(id, LoraAdapter::from_factors(id, ad.b().clone(), perturbed(ad.a(), idx, eps))?);
                loss_full(params, &trial, tokens, targets)
            })?;
        }
        out.push((id, db, da));
    }
    Ok(out)
}

/// Numerical gradient with respect to one frozen base weight.
pub fn fd_base_grad(
    params: &ModelParams<f64>,
    adapters: &AdapterSet<f64>,
    tokens: &TokenBatch,
    targets: &TokenBatch,
    id: WeightId,
    h: f64,
) -> Result<Matrix<f64>> {
    let w = params.weight(id)?.clone();
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    let mut trial = params.clone();
    for idx in 0..w.as_slice().len() {
        grad.as_mut_slice()[idx] = central_difference(h, |eps| {
            *trial.weight_mut(id)? = perturbed(&w, idx, eps);
            loss_full(&trial, adapters, tokens, targets)
        })?;
    }
    Ok(grad)
}

/// Numerical gradient of the loss with respect to the cut activations.
pub fn fd_cut_grad(
    params: &ModelParams<f64>,
    server_adapters: &AdapterSet<f64>,
    cut: &Matrix<f64>,
    split: SplitPoint,
    targets: &TokenBatch,
    h: f64,
) -> Result<Matrix<f64>> {
    let mut grad = Matrix::zeros(cut.rows(), cut.cols());
    for idx in 0..cut.as_slice().len() {
        grad.as_mut_slice()[idx] = central_difference(h, |eps| {
            let trial = perturbed(cut, idx, eps);
            let (logits, cache) = forward_server(params, server_adapters, &trial, split)?;
            Ok(loss_and_grad_server(params, &logits, targets, &cache, server_adapters)?.loss)
        })?;
    }
    Ok(grad)
}

fn max_rel(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst relative errors found by one check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub adapter: f64,
    pub base: f64,
    pub cut: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.adapter.max(self.base).max(self.cut)
    }
}

/// Random model, random non-trivial adapters on every weight (ranks cycle
/// through 1..=min(4, d)), random tokens. Compares split-path analytic
/// gradients with finite differences.
pub fn check_random_model(config: ModelConfig, batch: usize, split: SplitPoint, seed: u64, h: f64) -> Result<GradCheckReport> {
    let params = ModelParams::<f64>::build(config, derive_seed(seed, &[1]))?
        // larger weights than the 0.02 default so that every path carries
        // gradient signal well above the relative floor
        .scaled_for_gradcheck(derive_seed(seed, &[2]));
    let d = config.d_model;
    let mut adapters = AdapterSet::new();
    for (i, id) in WeightId::all(config.n_blocks).enumerate() {
        let rank = 1 + i % d.min(4);
        let ad = LoraAdapter::from_factors(
            id,
            gaussian_init(d, rank, 0.2, derive_seed(seed, &[3, i as u64])),
            gaussian_init(rank, d, 0.2, derive_seed(seed, &[4, i as u64])),
        )?;
        adapters.insert(id, ad);
    }
    let mut stream = GaussianStream::new(derive_seed(seed, &[5]));
    let mut draw = |n: usize| -> Vec<usize> {
        (0..n)
            .map(|_| ((stream.next_uniform() * config.vocab_size as f64) as usize).min(config.vocab_size - 1))
            .collect()
    };
    let n = batch * config.seq_len;
    let tokens = TokenBatch::new(batch, config.seq_len, draw(n))?;
    let targets = TokenBatch::new(batch, config.seq_len, draw(n))?;

    let (client_ads, server_ads): (AdapterSet<f64>, AdapterSet<f64>) =
        adapters.iter().map(|(k, v)| (*k, v.clone())).partition(|(id, _)| id.block < split.j());

    let (cut, client_cache) = forward_client(&params, &client_ads, &tokens, split)?;
    let (logits, server_cache) = forward_server(&params, &server_ads, &cut, split)?;
    let server = loss_and_grad_server(&params, &logits, &targets, &server_cache, &server_ads)?;
    let client = backward_client(&params, &server.cut_grad, &client_cache, &client_ads)?;

    let mut report = GradCheckReport {
        seed,
        adapter: 0.0,
        base: 0.0,
        cut: 0.0,
    };
    for (id, db, da) in fd_adapter_grads(&params, &adapters, &tokens, &targets, h)? {
        let g = client
            .adapter_grads
            .get(&id)
            .or_else(|| server.adapter_grads.get(&id))
            .expect("every adapter receives a gradient");
        report.adapter = report.adapter.max(max_rel(&g.b, &db)).max(max_rel(&g.a, &da));
    }
    for id in WeightId::all(config.n_blocks) {
        let numeric = fd_base_grad(&params, &adapters, &tokens, &targets, id, h)?;
        let analytic = client
            .base_grads
            .get(&id)
            .or_else(|| server.base_grads.get(&id))
            .expect("every base weight receives a gradient");
        report.base = report.base.max(max_rel(analytic, &numeric));
    }
    let numeric_cut = fd_cut_grad(&params, &server_ads, &cut, split, &targets, h)?;
    report.cut = max_rel(&server.cut_grad, &numeric_cut);
    Ok(report)
}

impl ModelParams<f64> {
    /// Copy with block weights redrawn at unit-order scale (`N(0, 0.5²)`),
    /// embeddings at `N(0, 1)`. Only used by gradient checks.
    pub fn scaled_for_gradcheck(mut self, seed: u64) -> Self {
        let cfg = *self.config();
        for (i, id) in WeightId::all(cfg.n_blocks).enumerate() {
            *self.weight_mut(id).expect("weight exists") =
                gaussian_init(cfg.d_model, cfg.d_model, 0.5, derive_seed(seed, &[i as u64]));
        }
        self.token_embedding = gaussian_init(cfg.vocab_size, cfg.d_model, 1.0, derive_seed(seed, &[100]));
        self.position_embedding = gaussian_init(cfg.seq_len, cfg.d_model, 1.0, derive_seed(seed, &[101]));
        self.output = gaussian_init(cfg.d_model, cfg.vocab_size, 0.5, derive_seed(seed, &[102]));
        self
    }
}
