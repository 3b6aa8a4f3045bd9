//! A toy decoder-only transformer with hand-derived gradients that can be cut
//! at any block boundary.
//!
//! Architecture, per block (pre-norm, no MLP sublayer):
//!
//! ```text
//! u   = LayerNorm(x)                      (no learnable gain/bias)
//! q,k,v = u·(W_q + B_qA_q), u·(W_k + …), u·(W_v + …)
//! ctx = causal multi-head softmax(q kᵀ / √d_h) v
//! y   = x + ctx·(W_o + B_oA_o)
//! ```
//!
//! The input is `tok_emb[id] + pos_emb[pos]` and the logits are
//! `h_last · W_out`. Embeddings and `W_out` are frozen and not adaptable;
//! the only LoRA-addressable weights are `{Q, K, V, O}` of each block.
//!
//! Hidden states are `(batch·seq) x d_model` matrices, sequences stacked
//! row-wise; logits are `(batch·seq) x vocab` in the same row order.
//!
//! The client half runs blocks `0..j` and emits the cut activations; the
//! server half runs blocks `j..n_blocks` and the head. Backward passes also
//! produce gradients with respect to every frozen base weight, which feed
//! the importance metric.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use thiserror::Error;

use crate::lora::{LoraAdapter, LoraError};
use crate::scalar::Scalar;
use crate::tensor::{derive_seed, gaussian_init, Matrix, TensorError};

/// Standard deviation of every frozen per-block base weight at build time.
pub const BASE_INIT_SIGMA: f64 = 0.02;

/// Standard deviation of token and position embeddings: unit-variance
/// residual stream.
pub const EMBEDDING_INIT_SIGMA: f64 = 1.0;

/// Variance epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("split point {j} outside [1, {}]", .n_blocks - 1)]
    InvalidSplit { j: usize, n_blocks: usize },
    #[error("adapter on {weight} is on the wrong side of split {split}")]
    AdapterSide { weight: WeightId, split: usize },
    #[error("adapter on {weight} has shape {d_in}x{d_out}, base weight is {expected}x{expected}")]
    AdapterShape {
        weight: WeightId,
        d_in: usize,
        d_out: usize,
        expected: usize,
    },
    #[error("weight {0} does not exist in this model")]
    UnknownWeight(WeightId),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("token batch has {len} ids, expected {batch}x{seq}")]
    BatchShape { batch: usize, seq: usize, len: usize },
    #[error("expected {expected:?}, got {got:?}")]
    ActivationShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("activation cache does not match this backward call ({0})")]
    StaleCache(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lora(#[from] LoraError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which trainable projection inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WeightKind {
    Q,
    K,
    V,
    O,
}

impl WeightKind {
    pub const ALL: [WeightKind; 4] = [WeightKind::Q, WeightKind::K, WeightKind::V, WeightKind::O];

    /// Wire code: Q=0, K=1, V=2, O=3.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn letter(self) -> char {
        match self {
            WeightKind::Q => 'Q',
            WeightKind::K => 'K',
            WeightKind::V => 'V',
            WeightKind::O => 'O',
        }
    }
}

/// Address of a trainable weight. Orders by block, then `Q < K < V < O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightId {
    pub block: usize,
    pub kind: WeightKind,
}

impl WeightId {
    pub fn new(block: usize, kind: WeightKind) -> Self {
        Self { block, kind }
    }

    /// All `4·n_blocks` weights in canonical order.
    pub fn all(n_blocks: usize) -> impl Iterator<Item = WeightId> {
        (0..n_blocks).flat_map(|b| WeightKind::ALL.into_iter().map(move |k| WeightId::new(b, k)))
    }

    pub fn side(&self, split: SplitPoint) -> Side {
        if self.block < split.j() {
            Side::Client
        } else {
            Side::Server
        }
    }
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.block, self.kind.letter())
    }
}

impl FromStr for WeightId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (num, kind) = s.split_at(s.len().saturating_sub(1));
        let kind = match kind {
            "Q" | "q" => WeightKind::Q,
            "K" | "k" => WeightKind::K,
            "V" | "v" => WeightKind::V,
            "O" | "o" => WeightKind::O,
            _ => return Err(format!("bad weight id `{s}`: expected e.g. `0Q`")),
        };
        let block = num.parse().map_err(|_| format!("bad weight id `{s}`: expected e.g. `0Q`"))?;
        Ok(WeightId { block, kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Client,
    Server,
}

/// Cut between block `j-1` and block `j`; `1 <= j <= n_blocks - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitPoint(usize);

impl SplitPoint {
    pub fn new(j: usize, n_blocks: usize) -> Result<Self> {
        if j == 0 || j >= n_blocks {
            return Err(ModelError::InvalidSplit { j, n_blocks });
        }
        Ok(Self(j))
    }

    pub fn j(self) -> usize {
        self.0
    }

    /// Every valid split for a model with `n_blocks` blocks.
    pub fn all(n_blocks: usize) -> Vec<SplitPoint> {
        (1..n_blocks).map(SplitPoint).collect()
    }

    pub fn client_blocks(self) -> Range<usize> {
        0..self.0
    }

    pub fn server_blocks(self, n_blocks: usize) -> Range<usize> {
        self.0..n_blocks
    }
}

impl fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_blocks < 2 {
            return bad(format!("n_blocks must be at least 2, got {}", self.n_blocks));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("d_model, n_heads, vocab_size and seq_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids for `batch` sequences of length `seq`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(ModelError::BatchShape {
                batch,
                seq,
                len: ids.len(),
            });
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Frozen base weights.
///
/// Base weights only change through [`ModelParams::merge_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    pub(crate) token_embedding: Matrix<T>,
    pub(crate) position_embedding: Matrix<T>,
    blocks: Vec<[Matrix<T>; 4]>,
    pub(crate) output: Matrix<T>,
}

const TAG_TOKEN: u64 = 1;
const TAG_POSITION: u64 = 2;
const TAG_BLOCK: u64 = 3;
const TAG_OUTPUT: u64 = 4;

impl<T: Scalar> ModelParams<T> {
    /// Seeded Gaussian initialization standing in for a pre-trained
    /// checkpoint: block weights `N(0, 0.02²)`, embeddings `N(0, 1)`, output
    /// projection `N(0, 1/d_model)` so logits start at unit scale.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let sigma = BASE_INIT_SIGMA;
        let blocks = (0..config.n_blocks)
            .map(|b| {
                WeightKind::ALL.map(|k| {
                    gaussian_init(d, d, sigma, derive_seed(seed, &[TAG_BLOCK, b as u64, k.code() as u64]))
                })
            })
            .collect();
        Ok(Self {
            config,
            token_embedding: gaussian_init(config.vocab_size, d, EMBEDDING_INIT_SIGMA, derive_seed(seed, &[TAG_TOKEN])),
            position_embedding: gaussian_init(config.seq_len, d, EMBEDDING_INIT_SIGMA, derive_seed(seed, &[TAG_POSITION])),
            blocks,
            output: gaussian_init(d, config.vocab_size, (1.0 / d as f64).sqrt(), derive_seed(seed, &[TAG_OUTPUT])),
        })
    }

    /// Model with every weight set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.seq_len, d),
            blocks: (0..config.n_blocks).map(|_| WeightKind::ALL.map(|_| Matrix::zeros(d, d))).collect(),
            output: Matrix::zeros(d, config.vocab_size),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight(&self, id: WeightId) -> Result<&Matrix<T>> {
        self.blocks
            .get(id.block)
            .map(|b| &b[id.kind as usize])
            .ok_or(ModelError::UnknownWeight(id))
    }

    pub(crate) fn weight_mut(&mut self, id: WeightId) -> Result<&mut Matrix<T>> {
        self.blocks
            .get_mut(id.block)
            .map(|b| &mut b[id.kind as usize])
            .ok_or(ModelError::UnknownWeight(id))
    }

    pub fn token_embedding(&self) -> &Matrix<T> {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Matrix<T> {
        &self.position_embedding
    }

    pub fn output_projection(&self) -> &Matrix<T> {
        &self.output
    }

    /// `W ← W + delta` for one trainable weight.
    pub fn merge_update(&mut self, id: WeightId, delta: &Matrix<T>) -> Result<()> {
        let w = self.weight_mut(id)?;
        *w = merge_update(w, delta)?;
        Ok(())
    }
}

/// `W + delta`.
pub fn merge_update<T: Scalar>(w: &Matrix<T>, delta: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(w.add(delta)?)
}

/// `exp(mean cross-entropy)`.
pub fn perplexity(mean_ce_loss: f64) -> f64 {
    mean_ce_loss.exp()
}

pub type AdapterSet<T> = BTreeMap<WeightId, LoraAdapter<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad<T> {
    pub b: Matrix<T>,
    pub a: Matrix<T>,
}

pub type AdapterGrads<T> = BTreeMap<WeightId, AdapterGrad<T>>;
pub type BaseGrads<T> = BTreeMap<WeightId, Matrix<T>>;

struct BlockCache<T> {
    input: Matrix<T>,
    normed: Matrix<T>,
    inv_std: Vec<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Attention probabilities, one `seq x seq` row-major block per
    /// (sequence, head), sequence-major.
    probs: Vec<T>,
    ctx: Matrix<T>,
}

/// Stored intermediates of one forward half, consumed by its backward.
pub struct ActivationCache<T> {
    side: Side,
    split: SplitPoint,
    batch: usize,
    first_block: usize,
    blocks: Vec<BlockCache<T>>,
    adapter_fingerprint: u64,
    /// Input to the output projection (server side only).
    head_input: Option<Matrix<T>>,
}

impl<T> ActivationCache<T> {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn split(&self) -> SplitPoint {
        self.split
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T> fmt::Debug for ActivationCache<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActivationCache")
            .field("side", &self.side)
            .field("split", &self.split)
            .field("batch", &self.batch)
            .field("blocks", &(self.first_block..self.first_block + self.blocks.len()))
            .finish()
    }
}

/// Output of the server-side loss and backward pass.
#[derive(Debug, Clone)]
pub struct ServerGrads<T> {
    pub loss: f64,
    pub adapter_grads: AdapterGrads<T>,
    pub base_grads: BaseGrads<T>,
    pub cut_grad: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct ClientGrads<T> {
    pub adapter_grads: AdapterGrads<T>,
    pub base_grads: BaseGrads<T>,
}

/// Loss and gradients of the whole (unsplit) model.
#[derive(Debug, Clone)]
pub struct FullGrads<T> {
    pub loss: f64,
    pub adapter_grads: AdapterGrads<T>,
    pub base_grads: BaseGrads<T>,
}

fn fingerprint<T: Scalar>(adapters: &AdapterSet<T>, blocks: Range<usize>) -> u64 {
    const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut feed = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    for (id, ad) in adapters.range(WeightId::new(blocks.start, WeightKind::Q)..) {
        if id.block >= blocks.end {
            break;
        }
        feed(id.block as u64);
        feed(id.kind.code() as u64);
        feed(ad.rank() as u64);
        for v in ad.b().as_slice().iter().chain(ad.a().as_slice()) {
            feed(v.to_f64().unwrap_or(f64::NAN).to_bits());
        }
    }
    h
}

fn check_adapters<T: Scalar>(
    adapters: &AdapterSet<T>,
    d_model: usize,
    allowed: Range<usize>,
    split: SplitPoint,
) -> Result<()> {
    for (id, ad) in adapters {
        if !allowed.contains(&id.block) {
            return Err(ModelError::AdapterSide {
                weight: *id,
                split: split.j(),
            });
        }
        if ad.d_in() != d_model || ad.d_out() != d_model || ad.weight_id() != *id {
            return Err(ModelError::AdapterShape {
                weight: *id,
                d_in: ad.d_in(),
                d_out: ad.d_out(),
                expected: d_model,
            });
        }
    }
    Ok(())
}

fn embed<T: Scalar>(params: &ModelParams<T>, tokens: &TokenBatch) -> Result<Matrix<T>> {
    let cfg = params.config;
    if tokens.seq != cfg.seq_len {
        return Err(ModelError::BatchShape {
            batch: tokens.batch,
            seq: cfg.seq_len,
            len: tokens.len(),
        });
    }
    let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
    for (row, &id) in tokens.ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: id,
                vocab: cfg.vocab_size,
            });
        }
        let pos = row % tokens.seq;
        let tok = params.token_embedding.row(id);
        let pe = params.position_embedding.row(pos);
        for ((o, &a), &b) in x.row_mut(row).iter_mut().zip(tok).zip(pe) {
            *o = a + b;
        }
    }
    Ok(x)
}

fn layer_norm<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let d = T::from_count(x.cols());
    let eps = T::lit(LAYER_NORM_EPS);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_stds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
        let inv_std = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (out, inv_stds)
}

fn layer_norm_backward<T: Scalar>(d_normed: &Matrix<T>, normed: &Matrix<T>, inv_std: &[T]) -> Matrix<T> {
    let d = T::from_count(normed.cols());
    let mut dx = Matrix::zeros(normed.rows(), normed.cols());
    for i in 0..normed.rows() {
        let g = d_normed.row(i);
        let xhat = normed.row(i);
        let mean_g = g.iter().fold(T::zero(), |a, &v| a + v) / d;
        let mean_gx = g.iter().zip(xhat).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv) / d;
        for ((o, &gv), &xv) in dx.row_mut(i).iter_mut().zip(g).zip(xhat) {
            *o = inv_std[i] * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

fn project<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, adapter: Option<&LoraAdapter<T>>) -> Result<Matrix<T>> {
    Ok(match adapter {
        Some(ad) => ad.forward(x, w)?,
        None => x.matmul(w)?,
    })
}

/// Records base and adapter gradients of a projection and returns the
/// gradient with respect to its input.
fn project_backward<T: Scalar>(
    id: WeightId,
    x: &Matrix<T>,
    w: &Matrix<T>,
    adapter: Option<&LoraAdapter<T>>,
    upstream: &Matrix<T>,
    adapter_grads: &mut AdapterGrads<T>,
    base_grads: &mut BaseGrads<T>,
) -> Result<Matrix<T>> {
    base_grads.insert(id, x.t_matmul(upstream)?);
    Ok(match adapter {
        Some(ad) => {
            let (b, a) = ad.grads(x, upstream)?;
            adapter_grads.insert(id, AdapterGrad { b, a });
            ad.input_grad(upstream, w)?
        }
        None => upstream.matmul_t(w)?,
    })
}

struct AttentionShape {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, shape: &AttentionShape) -> (Matrix<T>, Vec<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        head_dim,
    } = *shape;
    let scale = T::one() / T::from_count(head_dim).sqrt();
    let mut ctx = Matrix::zeros(q.rows(), q.cols());
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for s in 0..batch {
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let p_block = &mut probs[(s * heads + h) * seq * seq..(s * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q.row(s * seq + i)[cols.clone()];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &k.row(s * seq + j)[cols.clone()];
                    scores[j] = dot(qi, kj) * scale;
                    max = max.max(scores[j]);
                }
                let mut total = T::zero();
                for sc in scores.iter_mut().take(i + 1) {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                for j in 0..=i {
                    let p = scores[j] / total;
                    p_block[i * seq + j] = p;
                    let vj = &v.row(s * seq + j)[cols.clone()];
                    let out = &mut ctx.row_mut(s * seq + i)[cols.clone()];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

fn attention_backward<T: Scalar>(
    d_ctx: &Matrix<T>,
    cache: &BlockCache<T>,
    shape: &AttentionShape,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let AttentionShape {
        batch,
        seq,
        heads,
        head_dim,
    } = *shape;
    let scale = T::one() / T::from_count(head_dim).sqrt();
    let (n, d) = d_ctx.shape();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut dp = vec![T::zero(); seq];
    for s in 0..batch {
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let p_block = &cache.probs[(s * heads + h) * seq * seq..(s * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let gi: Vec<T> = d_ctx.row(s * seq + i)[cols.clone()].to_vec();
                let p_row = &p_block[i * seq..i * seq + seq];
                let mut weighted = T::zero();
                for j in 0..=i {
                    dp[j] = dot(&gi, &cache.v.row(s * seq + j)[cols.clone()]);
                    weighted += p_row[j] * dp[j];
                    let dvj = &mut dv.row_mut(s * seq + j)[cols.clone()];
                    for (o, &g) in dvj.iter_mut().zip(&gi) {
                        *o += p_row[j] * g;
                    }
                }
                let qi: Vec<T> = cache.q.row(s * seq + i)[cols.clone()].to_vec();
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds.is_zero() {
                        continue;
                    }
                    let kj = &cache.k.row(s * seq + j)[cols.clone()];
                    let dqi = &mut dq.row_mut(s * seq + i)[cols.clone()];
                    for (o, &kv) in dqi.iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk.row_mut(s * seq + j)[cols.clone()];
                    for (o, &qv) in dkj.iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn block_forward<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    block: usize,
    x: Matrix<T>,
    batch: usize,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let cfg = params.config;
    let shape = AttentionShape {
        batch,
        seq: cfg.seq_len,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
    };
    let w = &params.blocks[block];
    let ad = |k: WeightKind| adapters.get(&WeightId::new(block, k));
    let (normed, inv_std) = layer_norm(&x);
    let q = project(&normed, &w[0], ad(WeightKind::Q))?;
    let k = project(&normed, &w[1], ad(WeightKind::K))?;
    let v = project(&normed, &w[2], ad(WeightKind::V))?;
    let (ctx, probs) = attention(&q, &k, &v, &shape);
    let out = project(&ctx, &w[3], ad(WeightKind::O))?;
    let y = x.add(&out)?;
    Ok((
        y,
        BlockCache {
            input: x,
            normed,
            inv_std,
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

fn block_backward<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    block: usize,
    cache: &BlockCache<T>,
    dy: &Matrix<T>,
    batch: usize,
    adapter_grads: &mut AdapterGrads<T>,
    base_grads: &mut BaseGrads<T>,
) -> Result<Matrix<T>> {
    let cfg = params.config;
    let shape = AttentionShape {
        batch,
        seq: cfg.seq_len,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
    };
    let w = &params.blocks[block];
    let id = |k: WeightKind| WeightId::new(block, k);
    let ad = |k: WeightKind| adapters.get(&id(k));

    let d_ctx = project_backward(
        id(WeightKind::O),
        &cache.ctx,
        &w[3],
        ad(WeightKind::O),
        dy,
        adapter_grads,
        base_grads,
    )?;
    let (dq, dk, dv) = attention_backward(&d_ctx, cache, &shape);
    let mut d_normed = project_backward(
        id(WeightKind::Q),
        &cache.normed,
        &w[0],
        ad(WeightKind::Q),
        &dq,
        adapter_grads,
        base_grads,
    )?;
    for (kind, g, wk) in [(WeightKind::K, &dk, &w[1]), (WeightKind::V, &dv, &w[2])] {
        let part = project_backward(id(kind), &cache.normed, wk, ad(kind), g, adapter_grads, base_grads)?;
        d_normed.add_scaled_assign(T::one(), &part)?;
    }
    let mut dx = dy.clone();
    dx.add_scaled_assign(T::one(), &layer_norm_backward(&d_normed, &cache.normed, &cache.inv_std))?;
    debug_assert_eq!(dx.shape(), cache.input.shape());
    Ok(dx)
}

fn run_blocks<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    blocks: Range<usize>,
    mut x: Matrix<T>,
    batch: usize,
) -> Result<(Matrix<T>, Vec<BlockCache<T>>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, cache) = block_forward(params, adapters, b, x, batch)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

fn backward_blocks<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    first_block: usize,
    caches: &[BlockCache<T>],
    mut grad: Matrix<T>,
    batch: usize,
    adapter_grads: &mut AdapterGrads<T>,
    base_grads: &mut BaseGrads<T>,
) -> Result<Matrix<T>> {
    for (offset, cache) in caches.iter().enumerate().rev() {
        grad = block_backward(
            params,
            adapters,
            first_block + offset,
            cache,
            &grad,
            batch,
            adapter_grads,
            base_grads,
        )?;
    }
    Ok(grad)
}

/// Client half: embeddings and blocks `0..j`. Returns the cut activations.
pub fn forward_client<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    tokens: &TokenBatch,
    split: SplitPoint,
) -> Result<(Matrix<T>, ActivationCache<T>)> {
    let cfg = params.config;
    SplitPoint::new(split.j(), cfg.n_blocks)?;
    check_adapters(adapters, cfg.d_model, split.client_blocks(), split)?;
    let x = embed(params, tokens)?;
    let (cut, blocks) = run_blocks(params, adapters, split.client_blocks(), x, tokens.batch)?;
    Ok((
        cut,
        ActivationCache {
            side: Side::Client,
            split,
            batch: tokens.batch,
            first_block: 0,
            blocks,
            adapter_fingerprint: fingerprint(adapters, split.client_blocks()),
            head_input: None,
        },
    ))
}

/// Server half: blocks `j..n_blocks` and the output projection.
pub fn forward_server<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    cut_activations: &Matrix<T>,
    split: SplitPoint,
) -> Result<(Matrix<T>, ActivationCache<T>)> {
    let cfg = params.config;
    SplitPoint::new(split.j(), cfg.n_blocks)?;
    let server_blocks = split.server_blocks(cfg.n_blocks);
    check_adapters(adapters, cfg.d_model, server_blocks.clone(), split)?;
    let (rows, cols) = cut_activations.shape();
    if cols != cfg.d_model || rows % cfg.seq_len != 0 {
        return Err(ModelError::ActivationShape {
            expected: ((rows / cfg.seq_len).max(1) * cfg.seq_len, cfg.d_model),
            got: (rows, cols),
        });
    }
    let batch = rows / cfg.seq_len;
    let (hidden, blocks) = run_blocks(params, adapters, server_blocks.clone(), cut_activations.clone(), batch)?;
    let logits = hidden.matmul(&params.output)?;
    Ok((
        logits,
        ActivationCache {
            side: Side::Server,
            split,
            batch,
            first_block: split.j(),
            blocks,
            adapter_fingerprint: fingerprint(adapters, server_blocks),
            head_input: Some(hidden),
        },
    ))
}

/// Mean token cross-entropy and `∂L/∂logits`.
fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &TokenBatch) -> Result<(f64, Matrix<T>)> {
    let (n, vocab) = logits.shape();
    if targets.len() != n {
        return Err(ModelError::ActivationShape {
            expected: (targets.len(), vocab),
            got: (n, vocab),
        });
    }
    let inv_n = T::one() / T::from_count(n);
    let mut total = T::zero();
    let mut grad = Matrix::zeros(n, vocab);
    for i in 0..n {
        let target = targets.ids[i];
        if target >= vocab {
            return Err(ModelError::TokenOutOfRange { token: target, vocab });
        }
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        total += lse - row[target];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv_n;
        }
        grad[(i, target)] -= inv_n;
    }
    Ok(((total * inv_n).to_f64().unwrap_or(f64::NAN), grad))
}

/// Mean cross-entropy plus gradients of every server-side adapter, every
/// server-side base weight and the cut activations.
pub fn loss_and_grad_server<T: Scalar>(
    params: &ModelParams<T>,
    logits: &Matrix<T>,
    targets: &TokenBatch,
    cache: &ActivationCache<T>,
    adapters: &AdapterSet<T>,
) -> Result<ServerGrads<T>> {
    if cache.side != Side::Server {
        return Err(ModelError::StaleCache("client cache passed to server backward"));
    }
    let server_blocks = cache.split.server_blocks(params.config.n_blocks);
    if cache.adapter_fingerprint != fingerprint(adapters, server_blocks) {
        return Err(ModelError::StaleCache("server adapters changed since forward"));
    }
    if targets.batch != cache.batch {
        return Err(ModelError::BatchShape {
            batch: cache.batch,
            seq: params.config.seq_len,
            len: targets.len(),
        });
    }
    let (loss, d_logits) = cross_entropy(logits, targets)?;
    let head_input = cache
        .head_input
        .as_ref()
        .ok_or(ModelError::StaleCache("server cache without head input"))?;
    if head_input.rows() != logits.rows() {
        return Err(ModelError::StaleCache("logits do not match cached forward"));
    }
    let d_hidden = d_logits.matmul_t(&params.output)?;
    let mut adapter_grads = AdapterGrads::new();
    let mut base_grads = BaseGrads::new();
    let cut_grad = backward_blocks(
        params,
        adapters,
        cache.first_block,
        &cache.blocks,
        d_hidden,
        cache.batch,
        &mut adapter_grads,
        &mut base_grads,
    )?;
    Ok(ServerGrads {
        loss,
        adapter_grads,
        base_grads,
        cut_grad,
    })
}

/// Backward through the client half from the gradient at the cut.
pub fn backward_client<T: Scalar>(
    params: &ModelParams<T>,
    cut_activation_grad: &Matrix<T>,
    cache: &ActivationCache<T>,
    adapters: &AdapterSet<T>,
) -> Result<ClientGrads<T>> {
    if cache.side != Side::Client {
        return Err(ModelError::StaleCache("server cache passed to client backward"));
    }
    if cache.adapter_fingerprint != fingerprint(adapters, cache.split.client_blocks()) {
        return Err(ModelError::StaleCache("client adapters changed since forward"));
    }
    let expected = (cache.batch * params.config.seq_len, params.config.d_model);
    if cut_activation_grad.shape() != expected {
        return Err(ModelError::ActivationShape {
            expected,
            got: cut_activation_grad.shape(),
        });
    }
    let mut adapter_grads = AdapterGrads::new();
    let mut base_grads = BaseGrads::new();
    backward_blocks(
        params,
        adapters,
        0,
        &cache.blocks,
        cut_activation_grad.clone(),
        cache.batch,
        &mut adapter_grads,
        &mut base_grads,
    )?;
    Ok(ClientGrads {
        adapter_grads,
        base_grads,
    })
}

/// Logits of the whole model in one pass, no cut.
pub fn forward_full<T: Scalar>(params: &ModelParams<T>, adapters: &AdapterSet<T>, tokens: &TokenBatch) -> Result<Matrix<T>> {
    let cfg = params.config;
    check_adapters(adapters, cfg.d_model, 0..cfg.n_blocks, SplitPoint(0))?;
    let x = embed(params, tokens)?;
    let (hidden, _) = run_blocks(params, adapters, 0..cfg.n_blocks, x, tokens.batch)?;
    Ok(hidden.matmul(&params.output)?)
}

/// Mean cross-entropy of the whole model.
pub fn loss_full<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    tokens: &TokenBatch,
    targets: &TokenBatch,
) -> Result<f64> {
    let logits = forward_full(params, adapters, tokens)?;
    Ok(cross_entropy(&logits, targets)?.0)
}

/// Loss and all gradients of the unsplit model.
pub fn loss_and_grad_full<T: Scalar>(
    params: &ModelParams<T>,
    adapters: &AdapterSet<T>,
    tokens: &TokenBatch,
    targets: &TokenBatch,
) -> Result<FullGrads<T>> {
    let cfg = params.config;
    check_adapters(adapters, cfg.d_model, 0..cfg.n_blocks, SplitPoint(0))?;
    let x = embed(params, tokens)?;
    let (hidden, caches) = run_blocks(params, adapters, 0..cfg.n_blocks, x, tokens.batch)?;
    let logits = hidden.matmul(&params.output)?;
    let (loss, d_logits) = cross_entropy(&logits, targets)?;
    let mut adapter_grads = AdapterGrads::new();
    let mut base_grads = BaseGrads::new();
    backward_blocks(
        params,
        adapters,
        0,
        &caches,
        d_logits.matmul_t(&params.output)?,
        tokens.batch,
        &mut adapter_grads,
        &mut base_grads,
    )?;
    Ok(FullGrads {
        loss,
        adapter_grads,
        base_grads,
    })
}
