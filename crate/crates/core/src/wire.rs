//! Binary codec for the messages exchanged in networked mode.
//!
//! Frame: `[u32 LE payload length][u8 tag][payload]`. Matrices travel as
//! `[u32 LE rows][u32 LE cols][rows·cols f32 LE, row-major]`; in-memory
//! `f64` values lose precision on the way (relative error ≤ 2⁻²⁴).
//! Scalars that are not matrix entries (loss, importance numerators) are
//! sent as `f64`.
//!
//! Payloads by tag:
//! - `ACTIVATIONS` (1): client u32, round u32, cut matrix, target batch
//!   u32, target seq u32, batch·seq token ids u32.
//! - `CUT_GRAD` (2): client u32, round u32, loss f64, gradient matrix.
//! - `ADAPTER_UPLOAD` (3): client u32, block u16, kind u8, samples u64,
//!   `B` matrix, `A` matrix.
//! - `AGG_UPDATE` (4): block u16, kind u8, delta matrix, flag u8, and when
//!   the flag is 1 the freshly initialized `A` for the recipient.
//! - `PLAN` (5): round u32, client u32, split u16, count u16, then count ×
//!   (block u16, kind u8, rank u16) in increasing weight order.
//! - `BARRIER` (6): round u32, client u32, count u16, then count × (block
//!   u16, kind u8, numerator f64) in increasing weight order.
//!
//! Decoding never panics: truncated input, an unknown tag, a payload whose
//! contents disagree with its declared length and semantically invalid
//! contents are distinct errors.

use std::io::{Read, Write};

use thiserror::Error;

use crate::aggregation::AdapterUpload;
use crate::model::{TokenBatch, WeightId, WeightKind};
use crate::planner::Assignment;
use crate::tensor::Matrix;

pub const TAG_ACTIVATIONS: u8 = 1;
pub const TAG_CUT_GRAD: u8 = 2;
pub const TAG_ADAPTER_UPLOAD: u8 = 3;
pub const TAG_AGG_UPDATE: u8 = 4;
pub const TAG_PLAN: u8 = 5;
pub const TAG_BARRIER: u8 = 6;

/// Frame header bytes: length and tag.
pub const HEADER_LEN: usize = 5;

/// Largest payload accepted by the stream reader.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("payload declares {declared} bytes but its contents {detail}")]
    LengthMismatch { declared: usize, detail: String },
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub client_id: u32,
    pub round: u32,
    pub cut: Matrix<f32>,
    pub targets: TokenBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutGrad {
    pub client_id: u32,
    pub round: u32,
    pub loss: f64,
    pub grad: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggUpdate {
    pub weight_id: WeightId,
    /// Aggregated `ΔW` to merge into the base weight.
    pub delta: Matrix<f32>,
    /// Reinitialized `A` when the recipient holds an adapter for the weight.
    pub fresh_a: Option<Matrix<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanMessage {
    pub round: u32,
    pub client_id: u32,
    pub split_j: u16,
    pub assignment: Assignment,
}

/// End of a round's work for one client; carries the client-side
/// importance numerators.
#[derive(Debug, Clone, PartialEq)]
pub struct Barrier {
    pub round: u32,
    pub client_id: u32,
    pub numerators: Vec<(WeightId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Activations(Activations),
    CutGrad(CutGrad),
    AdapterUpload(AdapterUpload<f32>),
    AggUpdate(AggUpdate),
    Plan(PlanMessage),
    Barrier(Barrier),
}

impl WireMessage {
    pub fn tag(&self) -> u8 {
        match self {
            Self::Activations(_) => TAG_ACTIVATIONS,
            Self::CutGrad(_) => TAG_CUT_GRAD,
            Self::AdapterUpload(_) => TAG_ADAPTER_UPLOAD,
            Self::AggUpdate(_) => TAG_AGG_UPDATE,
            Self::Plan(_) => TAG_PLAN,
            Self::Barrier(_) => TAG_BARRIER,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Activations(_) => "ACTIVATIONS",
            Self::CutGrad(_) => "CUT_GRAD",
            Self::AdapterUpload(_) => "ADAPTER_UPLOAD",
            Self::AggUpdate(_) => "AGG_UPDATE",
            Self::Plan(_) => "PLAN",
            Self::Barrier(_) => "BARRIER",
        }
    }
}

/// Rounds every entry to `f32`. Fails if an entry overflows `f32`.
pub fn to_wire(m: &Matrix<f64>) -> Result<Matrix<f32>> {
    let data = m.as_slice().iter().map(|&v| v as f32).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).map_err(|e| WireError::Invalid(e.to_string()))
}

pub fn from_wire(m: &Matrix<f32>) -> Matrix<f64> {
    m.cast()
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| WireError::Invalid(format!("{what} {v} does not fit in u32")))?;
    put_u32(out, v);
    Ok(())
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix<f32>) -> Result<()> {
    put_len(out, m.rows(), "rows")?;
    put_len(out, m.cols(), "cols")?;
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_weight(out: &mut Vec<u8>, id: WeightId) -> Result<()> {
    let block = u16::try_from(id.block).map_err(|_| WireError::Invalid(format!("block {} does not fit in u16", id.block)))?;
    put_u16(out, block);
    out.push(id.kind.code());
    Ok(())
}

fn put_count(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u16::try_from(n).map_err(|_| WireError::Invalid(format!("{n} entries do not fit in u16")))?;
    put_u16(out, n);
    Ok(())
}

fn encode_payload(m: &WireMessage, out: &mut Vec<u8>) -> Result<()> {
    match m {
        WireMessage::Activations(a) => {
            put_u32(out, a.client_id);
            put_u32(out, a.round);
            put_matrix(out, &a.cut)?;
            put_len(out, a.targets.batch(), "batch")?;
            put_len(out, a.targets.seq(), "seq")?;
            for &id in a.targets.ids() {
                put_len(out, id, "token id")?;
            }
        }
        WireMessage::CutGrad(g) => {
            put_u32(out, g.client_id);
            put_u32(out, g.round);
            out.extend_from_slice(&g.loss.to_le_bytes());
            put_matrix(out, &g.grad)?;
        }
        WireMessage::AdapterUpload(u) => {
            put_u32(out, u.client_id);
            put_weight(out, u.weight_id)?;
            out.extend_from_slice(&u.n_samples.to_le_bytes());
            put_matrix(out, &u.b)?;
            put_matrix(out, &u.a)?;
        }
        WireMessage::AggUpdate(u) => {
            put_weight(out, u.weight_id)?;
            put_matrix(out, &u.delta)?;
            match &u.fresh_a {
                Some(a) => {
                    out.push(1);
                    put_matrix(out, a)?;
                }
                None => out.push(0),
            }
        }
        WireMessage::Plan(p) => {
            put_u32(out, p.round);
            put_u32(out, p.client_id);
            put_u16(out, p.split_j);
            put_count(out, p.assignment.len())?;
            for (&id, &r) in &p.assignment {
                put_weight(out, id)?;
                let r = u16::try_from(r).map_err(|_| WireError::Invalid(format!("rank {r} does not fit in u16")))?;
                put_u16(out, r);
            }
        }
        WireMessage::Barrier(b) => {
            put_u32(out, b.round);
            put_u32(out, b.client_id);
            put_count(out, b.numerators.len())?;
            for &(id, v) in &b.numerators {
                put_weight(out, id)?;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// One complete frame.
pub fn encode_message(m: &WireMessage) -> Result<Vec<u8>> {
    let mut out = vec![0; HEADER_LEN];
    out[4] = m.tag();
    encode_payload(m, &mut out)?;
    let len = out.len() - HEADER_LEN;
    let len = u32::try_from(len).map_err(|_| WireError::TooLarge(len))?;
    out[..4].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

/// Cursor over one payload; running past its end is a length mismatch.
struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(WireError::LengthMismatch {
                declared: self.bytes.len(),
                detail: format!("need {n} more bytes for {what} at offset {}", self.pos),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn matrix(&mut self, what: &str) -> Result<Matrix<f32>> {
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
        let n = match n {
            Some(n) if n <= self.remaining() => n,
            _ => {
                return Err(WireError::LengthMismatch {
                    declared: self.bytes.len(),
                    detail: format!("cannot hold a {rows}x{cols} {what} at offset {}", self.pos),
                })
            }
        };
        let data = self.take(n, what)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| WireError::Invalid(format!("{what}: {e}")))
    }

    fn weight(&mut self) -> Result<WeightId> {
        let block = self.u16("block")? as usize;
        let code = self.u8("kind")?;
        let kind = WeightKind::from_code(code).ok_or_else(|| WireError::Invalid(format!("unknown weight kind {code}")))?;
        Ok(WeightId::new(block, kind))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(WireError::LengthMismatch {
                declared: self.bytes.len(),
                detail: format!("end after {} bytes", self.pos),
            })
        }
    }
}

/// Parses the payload of a frame with tag `tag`.
pub fn decode_payload(tag: u8, bytes: &[u8]) -> Result<WireMessage> {
    let mut p = Payload { bytes, pos: 0 };
    let msg = match tag {
        TAG_ACTIVATIONS => {
            let client_id = p.u32("client")?;
            let round = p.u32("round")?;
            let cut = p.matrix("cut")?;
            let batch = p.u32("batch")? as usize;
            let seq = p.u32("seq")? as usize;
            let n = batch.checked_mul(seq).filter(|n| n.checked_mul(4).is_some_and(|b| b <= p.remaining()));
            let n = n.ok_or_else(|| WireError::LengthMismatch {
                declared: bytes.len(),
                detail: format!("cannot hold {batch}x{seq} token ids"),
            })?;
            let ids = (0..n).map(|_| p.u32("token id").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let targets = TokenBatch::new(batch, seq, ids).map_err(|e| WireError::Invalid(e.to_string()))?;
            WireMessage::Activations(Activations { client_id, round, cut, targets })
        }
        TAG_CUT_GRAD => WireMessage::CutGrad(CutGrad {
            client_id: p.u32("client")?,
            round: p.u32("round")?,
            loss: p.f64("loss")?,
            grad: p.matrix("gradient")?,
        }),
        TAG_ADAPTER_UPLOAD => {
            let client_id = p.u32("client")?;
            let weight_id = p.weight()?;
            let n_samples = p.u64("samples")?;
            let b = p.matrix("B")?;
            let a = p.matrix("A")?;
            if b.cols() != a.rows() {
                return Err(WireError::Invalid(format!("B has {} columns but A has {} rows", b.cols(), a.rows())));
            }
            WireMessage::AdapterUpload(AdapterUpload {
                client_id,
                weight_id,
                b,
                a,
                n_samples,
            })
        }
        TAG_AGG_UPDATE => {
            let weight_id = p.weight()?;
            let delta = p.matrix("delta")?;
            let fresh_a = match p.u8("flag")? {
                0 => None,
                1 => Some(p.matrix("A")?),
                f => return Err(WireError::Invalid(format!("bad adapter flag {f}"))),
            };
            WireMessage::AggUpdate(AggUpdate { weight_id, delta, fresh_a })
        }
        TAG_PLAN => {
            let round = p.u32("round")?;
            let client_id = p.u32("client")?;
            let split_j = p.u16("split")?;
            let n = p.u16("count")?;
            let mut assignment = Assignment::new();
            let mut last = None;
            for _ in 0..n {
                let id = p.weight()?;
                let r = p.u16("rank")? as usize;
                if last.is_some_and(|l| l >= id) {
                    return Err(WireError::Invalid("plan entries out of order".into()));
                }
                if r == 0 {
                    return Err(WireError::Invalid(format!("rank 0 for {id}")));
                }
                last = Some(id);
                assignment.insert(id, r);
            }
            WireMessage::Plan(PlanMessage {
                round,
                client_id,
                split_j,
                assignment,
            })
        }
        TAG_BARRIER => {
            let round = p.u32("round")?;
            let client_id = p.u32("client")?;
            let n = p.u16("count")?;
            let mut numerators = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let id = p.weight()?;
                let v = p.f64("numerator")?;
                if numerators.last().is_some_and(|&(l, _)| l >= id) {
                    return Err(WireError::Invalid("barrier entries out of order".into()));
                }
                numerators.push((id, v));
            }
            WireMessage::Barrier(Barrier {
                round,
                client_id,
                numerators,
            })
        }
        other => return Err(WireError::UnknownTag(other)),
    };
    p.finish()?;
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(WireMessage, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let end = HEADER_LEN + len;
    if bytes.len() < end {
        return Err(WireError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok((decode_payload(bytes[4], &bytes[HEADER_LEN..end])?, end))
}

/// Decodes exactly one frame; trailing bytes are a length mismatch.
pub fn decode_message(bytes: &[u8]) -> Result<WireMessage> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(WireError::LengthMismatch {
            declared: used - HEADER_LEN,
            detail: format!("are followed by {} trailing bytes", bytes.len() - used),
        });
    }
    Ok(msg)
}

pub fn write_message<W: Write>(w: &mut W, m: &WireMessage) -> Result<()> {
    w.write_all(&encode_message(m)?)?;
    w.flush()?;
    Ok(())
}

/// Blocks until one whole frame has been read.
pub fn read_message<R: Read>(r: &mut R) -> Result<WireMessage> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(header[4], &payload)
}
