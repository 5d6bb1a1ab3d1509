//! Exact attention, partial attention with log-sum-exp statistics, and the
//! rule that merges partials computed over disjoint key sets.
//!
//! A [`PartialAttention`] carries a locally normalized output `A_h` and, per
//! query row, `lse = ln s_h` where `s_h` is the local softmax denominator.
//! Merging in the log domain:
//!
//! ```text
//! s   = LSE(lse_1, ..., lse_H)
//! out = Σ_h exp(lse_h - s) · A_h
//! ```
//!
//! which equals attention over the concatenated keys and values.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2D};

/// Relative tolerance used for exactness checks at the build's precision.
#[cfg(not(feature = "f64"))]
pub const EXACTNESS_TOLERANCE: f64 = 1e-5;
#[cfg(feature = "f64")]
pub const EXACTNESS_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnScale {
    pub head_dim: usize,
    pub scale: Scalar,
}

impl AttnScale {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            scale: (1.0 / (head_dim as f64).sqrt()) as Scalar,
        }
    }
}

/// Which keys each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyMask {
    /// Every key.
    Full,
    /// Row `i` attends to keys `0..=q_offset + i`.
    Causal { q_offset: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttention {
    pub out: Tensor2D,
    pub lse: Vec<Scalar>,
}

impl PartialAttention {
    pub fn new(out: Tensor2D, lse: Vec<Scalar>) -> Result<Self> {
        if out.rows() != lse.len() {
            return Err(Error::shape(format!(
                "partial has {} output rows but {} lse values",
                out.rows(),
                lse.len()
            )));
        }
        if let Some(i) = lse.iter().position(|x| !x.is_finite()) {
            return Err(Error::domain(format!("lse[{i}] is not finite")));
        }
        Ok(Self { out, lse })
    }

    pub fn rows(&self) -> usize {
        self.out.rows()
    }
}

fn check_qkv(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<()> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension {
            op: "attention keys/values",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attention query/keys",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::domain("attention over zero keys"));
    }
    Ok(())
}

fn key_range(mask: KeyMask, row: usize, k_rows: usize) -> Range<usize> {
    match mask {
        KeyMask::Full => 0..k_rows,
        KeyMask::Causal { q_offset } => 0..(q_offset + row + 1).min(k_rows),
    }
}

/// Attends one query row to `keys` (non-empty), writing the normalized output
/// into `out` and returning the row's log-sum-exp.
fn attend_row(
    q_row: &[Scalar],
    k: &Tensor2D,
    v: &Tensor2D,
    keys: Range<usize>,
    scale: Scalar,
    out: &mut [Scalar],
) -> Scalar {
    let scores: Vec<Scalar> = keys
        .clone()
        .map(|j| {
            q_row
                .iter()
                .zip(k.row(j))
                .map(|(a, b)| a * b)
                .sum::<Scalar>()
                * scale
        })
        .collect();
    let max = scores
        .iter()
        .copied()
        .fold(Scalar::NEG_INFINITY, Scalar::max);
    out.fill(0.0);
    let mut denom = 0.0;
    for (s, j) in scores.iter().zip(keys) {
        let p = (s - max).exp();
        denom += p;
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += p * x;
        }
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    max + denom.ln()
}

/// Locally normalized attention of `q` over `k`/`v` plus per-row log-sum-exp.
pub fn partial_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: KeyMask,
) -> Result<PartialAttention> {
    check_qkv(q, k, v)?;
    if let KeyMask::Causal { q_offset } = mask {
        if q_offset + q.rows() > k.rows() {
            return Err(Error::shape(format!(
                "causal queries end at key {} but only {} keys exist",
                q_offset + q.rows(),
                k.rows()
            )));
        }
    }
    let scale = AttnScale::new(q.cols()).scale;
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    let mut lse = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let keys = key_range(mask, i, k.rows());
        lse.push(attend_row(q.row(i), k, v, keys, scale, out.row_mut(i)));
    }
    Ok(PartialAttention { out, lse })
}

/// Exact causal attention; row `i` of `q` sits at key index `q_offset + i`.
pub fn causal_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    q_offset: usize,
) -> Result<Tensor2D> {
    Ok(partial_attention(q, k, v, KeyMask::Causal { q_offset })?.out)
}

/// Folds one row of `next` into the running `(lse, out)` accumulator.
fn fold_row(acc_lse: &mut Scalar, acc_out: &mut [Scalar], lse: Scalar, out: &[Scalar]) {
    let hi = acc_lse.max(lse);
    let merged = hi + ((*acc_lse - hi).exp() + (lse - hi).exp()).ln();
    let w_acc = (*acc_lse - merged).exp();
    let w_new = (lse - merged).exp();
    for (a, &x) in acc_out.iter_mut().zip(out) {
        *a = w_acc * *a + w_new * x;
    }
    *acc_lse = merged;
}

/// Merges two partials over disjoint key sets.
pub fn merge_pair(acc: &PartialAttention, next: &PartialAttention) -> Result<PartialAttention> {
    merge_partials(&[acc.clone(), next.clone()])
}

/// Merges partials in the given order. The fold is sequential so a fixed order
/// gives bit-identical results.
pub fn merge_partials(parts: &[PartialAttention]) -> Result<PartialAttention> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::domain("merge of zero partials"))?;
    for (h, p) in rest.iter().enumerate() {
        if p.out.shape() != first.out.shape() || p.lse.len() != first.lse.len() {
            return Err(Error::shape(format!(
                "partial {} has shape {:?} with {} lse values, partial 0 has {:?}",
                h + 1,
                p.out.shape(),
                p.lse.len(),
                first.out.shape()
            )));
        }
    }
    let mut acc = first.clone();
    for p in rest {
        for i in 0..acc.rows() {
            fold_row(&mut acc.lse[i], acc.out.row_mut(i), p.lse[i], p.out.row(i));
        }
    }
    Ok(acc)
}

/// Causal attention computed tile by tile over the keys, each tile folded in
/// with the merge rule. Only `tile` keys are scored at a time.
pub fn streaming_causal_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    q_offset: usize,
    tile: usize,
) -> Result<Tensor2D> {
    if tile == 0 {
        return Err(Error::config("tile size must be at least 1"));
    }
    check_qkv(q, k, v)?;
    if q_offset + q.rows() > k.rows() {
        return Err(Error::shape(format!(
            "causal queries end at key {} but only {} keys exist",
            q_offset + q.rows(),
            k.rows()
        )));
    }
    let scale = AttnScale::new(q.cols()).scale;
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    let mut lse: Vec<Option<Scalar>> = vec![None; q.rows()];
    let mut scratch = vec![0.0; v.cols()];
    for start in (0..k.rows()).step_by(tile) {
        let end = (start + tile).min(k.rows());
        for (i, slot) in lse.iter_mut().enumerate() {
            let visible = key_range(KeyMask::Causal { q_offset }, i, k.rows());
            let keys = start..end.min(visible.end);
            if keys.is_empty() {
                continue;
            }
            match slot.as_mut() {
                None => *slot = Some(attend_row(q.row(i), k, v, keys, scale, out.row_mut(i))),
                Some(acc) => {
                    let t = attend_row(q.row(i), k, v, keys, scale, &mut scratch);
                    fold_row(acc, out.row_mut(i), t, &scratch);
                }
            }
        }
    }
    Ok(out)
}
