//! Straight-line forward pass of the toy decoder over nested `Vec`s.
//!
//! Shares nothing with the library's tensor code: the adapted weight is
//! materialized as `W + B·A` and every contraction is an explicit loop.

use hetsplit::model::{
    backward_client, forward_client, forward_full, forward_server, loss_and_grad_full, loss_and_grad_server, AdapterSet,
    ModelConfig, ModelParams, SplitPoint, TokenBatch, WeightId, WeightKind, LAYER_NORM_EPS,
};
use hetsplit::tensor::{derive_seed, gaussian_init, GaussianStream, Matrix};
use hetsplit::LoraAdapter;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mul(x: &Rows, w: &Rows) -> Rows {
    let inner = w.len();
    let cols = w[0].len();
    x.iter()
        .map(|r| {
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += r[k] * w[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn effective_weight(params: &ModelParams<f64>, adapters: &AdapterSet<f64>, id: WeightId) -> Rows {
    let mut w = rows(params.weight(id).unwrap());
    if let Some(ad) = adapters.get(&id) {
        let delta = mul(&rows(ad.b()), &rows(ad.a()));
        for (wr, dr) in w.iter_mut().zip(&delta) {
            for (a, b) in wr.iter_mut().zip(dr) {
                *a += b;
            }
        }
    }
    w
}

fn normalize(x: &Rows) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
        })
        .collect()
}

/// Logits of the unsplit model, one row per token position.
pub fn reference_logits(params: &ModelParams<f64>, adapters: &AdapterSet<f64>, tokens: &TokenBatch) -> Rows {
    let cfg = *params.config();
    let (seq, heads) = (cfg.seq_len, cfg.n_heads);
    let hd = cfg.d_model / heads;
    let tok = rows(params.token_embedding());
    let pos = rows(params.position_embedding());
    let mut x: Rows = tokens
        .ids()
        .iter()
        .enumerate()
        .map(|(row, &id)| (0..cfg.d_model).map(|c| tok[id][c] + pos[row % seq][c]).collect())
        .collect();
    for block in 0..cfg.n_blocks {
        let u = normalize(&x);
        let w = |k| effective_weight(params, adapters, WeightId::new(block, k));
        let q = mul(&u, &w(WeightKind::Q));
        let k = mul(&u, &w(WeightKind::K));
        let v = mul(&u, &w(WeightKind::V));
        let mut ctx = vec![vec![0.0; cfg.d_model]; x.len()];
        for s in 0..tokens.batch() {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = s * seq + i;
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = s * seq + j;
                            (0..hd).map(|c| q[qi][h * hd + c] * k[kj][h * hd + c]).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for c in 0..hd {
                            ctx[qi][h * hd + c] += ej / z * v[s * seq + j][h * hd + c];
                        }
                    }
                }
            }
        }
        let out = mul(&ctx, &w(WeightKind::O));
        for (xr, or) in x.iter_mut().zip(&out) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
    }
    mul(&x, &rows(params.output_projection()))
}

pub fn four_block_config() -> ModelConfig {
    ModelConfig {
        n_blocks: 4,
        d_model: 8,
        n_heads: 2,
        vocab_size: 9,
        seq_len: 5,
    }
}

/// A model with non-trivial adapters on every weight and a random batch.
pub fn random_case(config: ModelConfig, batch: usize, seed: u64) -> (ModelParams<f64>, AdapterSet<f64>, TokenBatch, TokenBatch) {
    let params = ModelParams::<f64>::build(config, derive_seed(seed, &[1])).unwrap().scaled_for_gradcheck(derive_seed(seed, &[2]));
    let d = config.d_model;
    let adapters: AdapterSet<f64> = WeightId::all(config.n_blocks)
        .enumerate()
        .map(|(i, id)| {
            let r = 1 + i % 3;
            let b = gaussian_init(d, r, 0.3, derive_seed(seed, &[3, i as u64]));
            let a = gaussian_init(r, d, 0.3, derive_seed(seed, &[4, i as u64]));
            (id, LoraAdapter::from_factors(id, b, a).unwrap())
        })
        .collect();
    let mut s = GaussianStream::new(derive_seed(seed, &[5]));
    let n = batch * config.seq_len;
    let mut draw = || -> Vec<usize> {
        (0..n)
            .map(|_| ((s.next_uniform() * config.vocab_size as f64) as usize).min(config.vocab_size - 1))
            .collect()
    };
    let tokens = TokenBatch::new(batch, config.seq_len, draw()).unwrap();
    let targets = TokenBatch::new(batch, config.seq_len, draw()).unwrap();
    (params, adapters, tokens, targets)
}

/// Worst disagreements found over every split point of one random case.
#[derive(Debug, Clone, Copy, Default)]
pub struct Transparency {
    /// Unsplit logits against the reference forward.
    pub reference_logits: f64,
    /// Split logits against unsplit logits.
    pub split_logits: f64,
    /// Split adapter and base gradients against unsplit ones.
    pub split_grads: f64,
}

pub fn transparency(config: ModelConfig, batch: usize, seed: u64) -> Transparency {
    let (params, adapters, tokens, targets) = random_case(config, batch, seed);
    let full = forward_full(&params, &adapters, &tokens).unwrap();
    let reference = reference_logits(&params, &adapters, &tokens);
    let mut out = Transparency::default();
    for (i, r) in reference.iter().enumerate() {
        for (a, b) in full.row(i).iter().zip(r) {
            out.reference_logits = out.reference_logits.max((a - b).abs());
        }
    }
    let whole = loss_and_grad_full(&params, &adapters, &tokens, &targets).unwrap();
    for split in SplitPoint::all(config.n_blocks) {
        let (client_ads, server_ads): (AdapterSet<f64>, AdapterSet<f64>) =
            adapters.iter().map(|(k, v)| (*k, v.clone())).partition(|(id, _)| id.block < split.j());
        let (cut, cc) = forward_client(&params, &client_ads, &tokens, split).unwrap();
        let (logits, sc) = forward_server(&params, &server_ads, &cut, split).unwrap();
        out.split_logits = out.split_logits.max(logits.max_abs_diff(&full).unwrap());
        let server = loss_and_grad_server(&params, &logits, &targets, &sc, &server_ads).unwrap();
        let client = backward_client(&params, &server.cut_grad, &cc, &client_ads).unwrap();
        out.split_grads = out.split_grads.max((server.loss - whole.loss).abs());
        for (id, g) in &whole.adapter_grads {
            let s = client.adapter_grads.get(id).or_else(|| server.adapter_grads.get(id)).expect("adapter gradient");
            out.split_grads = out.split_grads.max(s.b.max_abs_diff(&g.b).unwrap()).max(s.a.max_abs_diff(&g.a).unwrap());
        }
        for (id, g) in &whole.base_grads {
            let s = client.base_grads.get(id).or_else(|| server.base_grads.get(id)).expect("base gradient");
            out.split_grads = out.split_grads.max(s.max_abs_diff(g).unwrap());
        }
    }
    out
}
