//! Multi-head attention with per-head RMS-normalized queries/keys, optional
//! rotary phases on queries and keys (values stay unrotated), and additive
//! masking. One routine serves all three pathways of the denoiser:
//!
//! * self-attention over video tokens (rotary on both sides, no mask),
//! * global cross-attention to the whole-video caption (key padding mask),
//! * chunk-local cross-attention to concatenated per-chunk captions (rotary
//!   on both sides, key padding mask, and attention left unmasked across
//!   chunks — locality comes from phase alignment, not structure).
//!
//! A hard same-chunk mask is available as an ablation, and the softmax
//! weights are always returned so probes can measure where attention lands.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var, MASK_NEG};

/// Options for [`attend`]. Phase tables are `(cos, sin)` slices laid out
/// `[token][head_dim/2]` as produced by the rotary basis.
pub struct AttendSpec<'a, T> {
    pub heads: usize,
    pub q_phases: Option<(&'a [T], &'a [T])>,
    pub k_phases: Option<(&'a [T], &'a [T])>,
    /// Additive per-key bias `[batch*heads, keys]`, broadcast over queries.
    pub key_bias: Option<Var>,
    /// Additive per-pair bias `[batch*heads, queries, keys]`.
    pub pair_bias: Option<Var>,
}

impl<'a, T> AttendSpec<'a, T> {
    pub fn new(heads: usize) -> Self {
        AttendSpec {
            heads,
            q_phases: None,
            k_phases: None,
            key_bias: None,
            pair_bias: None,
        }
    }
}

pub struct AttendOutput {
    /// `[batch, queries, dim]` mixed values.
    pub out: Var,
    /// `[batch*heads, queries, keys]` post-softmax attention weights.
    pub weights: Var,
}

/// Scaled dot-product attention over `q/k/v` of shape `[batch, len, dim]`.
/// When `gains` is given, queries and keys are RMS-normalized per head with
/// the two `[dim/heads]` gain vectors before any rotation.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    gains: Option<(Var, Var)>,
    spec: &AttendSpec<'_, T>,
) -> Result<AttendOutput> {
    let (b, lq, d) = dims3("attend", tape.shape(q))?;
    let (bk, lk, dk) = dims3("attend", tape.shape(k))?;
    let (bv, lv, dv) = dims3("attend", tape.shape(v))?;
    if bk != b || bv != b || dk != d || dv != d || lv != lk {
        return Err(Error::ShapeMismatch {
            op: "attend",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let h = spec.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Dimension {
            op: "attend",
            msg: format!("dim {d} not divisible by {h} heads"),
        });
    }
    let dh = d / h;

    // [b, l, d] -> [b, l, h, dh]
    let mut qh = tape.reshape(q, &[b, lq, h, dh])?;
    let mut kh = tape.reshape(k, &[b, lk, h, dh])?;
    let vh = tape.reshape(v, &[b, lk, h, dh])?;
    if let Some((qg, kg)) = gains {
        qh = tape.rms_norm(qh, qg)?;
        kh = tape.rms_norm(kh, kg)?;
    }
    if let Some((cos, sin)) = spec.q_phases {
        qh = tape.rope(qh, cos, sin)?;
    }
    if let Some((cos, sin)) = spec.k_phases {
        kh = tape.rope(kh, cos, sin)?;
    }

    // [b, l, h, dh] -> [b*h, l, dh]
    let qh = tape.permute(qh, &[0, 2, 1, 3])?;
    let qh = tape.reshape(qh, &[b * h, lq, dh])?;
    let qh = tape.scale(qh, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let kh = tape.permute(kh, &[0, 2, 1, 3])?;
    let kh = tape.reshape(kh, &[b * h, lk, dh])?;
    let kt = tape.permute(kh, &[0, 2, 1])?; // [b*h, dh, lk]
    let vh = tape.permute(vh, &[0, 2, 1, 3])?;
    let vh = tape.reshape(vh, &[b * h, lk, dh])?;

    let mut scores = tape.matmul(qh, kt)?; // [b*h, lq, lk]
    if let Some(bias) = spec.key_bias {
        if tape.shape(bias) != [b * h, lk] {
            return Err(Error::ShapeMismatch {
                op: "attend",
                lhs: vec![b * h, lk],
                rhs: tape.shape(bias).to_vec(),
            });
        }
        scores = tape.add_axis1(scores, bias)?;
    }
    if let Some(bias) = spec.pair_bias {
        if tape.shape(bias) != [b * h, lq, lk] {
            return Err(Error::ShapeMismatch {
                op: "attend",
                lhs: vec![b * h, lq, lk],
                rhs: tape.shape(bias).to_vec(),
            });
        }
        scores = tape.add(scores, bias)?;
    }
    let weights = tape.softmax_lastdim(scores)?;
    let mixed = tape.matmul(weights, vh)?; // [b*h, lq, dh]
    let mixed = tape.reshape(mixed, &[b, h, lq, dh])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let out = tape.reshape(mixed, &[b, lq, d])?;
    Ok(AttendOutput { out, weights })
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op,
            msg: format!("expected [batch, len, dim], got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Additive key bias hiding padded text positions: 0 for live tokens, a large
/// negative number for padding. `masks` holds one validity vector per batch
/// item; the bias is replicated across heads.
pub fn key_padding_bias<T: Scalar>(
    tape: &mut Tape<T>,
    masks: &[Vec<bool>],
    heads: usize,
) -> Result<Var> {
    let batch = masks.len();
    let lk = masks.first().map(Vec::len).ok_or(Error::Contract(
        "key padding bias needs at least one batch item".into(),
    ))?;
    if masks.iter().any(|m| m.len() != lk) {
        return Err(Error::Contract("ragged key masks".into()));
    }
    let neg = T::from_f64(MASK_NEG);
    let mut data = Vec::with_capacity(batch * heads * lk);
    for mask in masks {
        for _ in 0..heads {
            data.extend(mask.iter().map(|&m| if m { T::zero() } else { neg }));
        }
    }
    Ok(tape.constant(&[batch * heads, lk], data))
}

/// Ablation mask: bias that zeroes attention across chunk boundaries.
/// `q_chunks[i]` / `k_chunks[j]` give each token's chunk index; pairs from
/// different chunks get a large negative bias, replicated over batch×heads.
pub fn same_chunk_pair_bias<T: Scalar>(
    tape: &mut Tape<T>,
    q_chunks: &[usize],
    k_chunks: &[usize],
    batch: usize,
    heads: usize,
) -> Result<Var> {
    if q_chunks.is_empty() || k_chunks.is_empty() {
        return Err(Error::Contract("chunk maps must be non-empty".into()));
    }
    let (lq, lk) = (q_chunks.len(), k_chunks.len());
    let neg = T::from_f64(MASK_NEG);
    let mut tile = Vec::with_capacity(lq * lk);
    for &qc in q_chunks {
        for &kc in k_chunks {
            tile.push(if qc == kc { T::zero() } else { neg });
        }
    }
    let mut data = Vec::with_capacity(batch * heads * lq * lk);
    for _ in 0..batch * heads {
        data.extend_from_slice(&tile);
    }
    Ok(tape.constant(&[batch * heads, lq, lk], data))
}

/// Fraction of attention mass each query places on keys of its own chunk,
/// averaged over every (batch, head, query) row. `weights` are post-softmax
/// values of shape `[rows, lq, lk]` flattened.
pub fn same_chunk_mass<T: Scalar>(
    weights: &[T],
    q_chunks: &[usize],
    k_chunks: &[usize],
) -> Result<f64> {
    let (lq, lk) = (q_chunks.len(), k_chunks.len());
    if lq == 0 || lk == 0 || weights.is_empty() || weights.len() % (lq * lk) != 0 {
        return Err(Error::Contract(format!(
            "weight buffer of {} values does not tile {}x{} maps",
            weights.len(),
            lq,
            lk
        )));
    }
    let rows = weights.len() / (lq * lk);
    let mut total = 0.0;
    for r in 0..rows {
        for (qi, &qc) in q_chunks.iter().enumerate() {
            let row = &weights[(r * lq + qi) * lk..(r * lq + qi + 1) * lk];
            for (ki, &kc) in k_chunks.iter().enumerate() {
                if kc == qc {
                    total += row[ki].as_f64();
                }
            }
        }
    }
    Ok(total / (rows * lq) as f64)
}
