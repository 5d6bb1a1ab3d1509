//! Ground-truth oracle, analytic cost models for star and ring attention,
//! output divergence, and attention-mass profiles.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2D};

/// Exact causal attention computed in 64-bit, rounded to [`Scalar`] at the end.
/// Row `i` of `q` sees keys `0..=q_offset + i`.
pub fn global_oracle(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    q_offset: usize,
) -> Result<Tensor2D> {
    if k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "global_oracle",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() == 0 || q_offset + q.rows() > k.rows() {
        return Err(Error::shape(format!(
            "{} causal queries at offset {q_offset} over {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let visible = q_offset + i + 1;
        let scores: Vec<f64> = (0..visible)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = weights.iter().sum();
        for c in 0..v.cols() {
            let acc: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * v[(j, c)] as f64)
                .sum();
            out[(i, c)] = (acc / denom) as Scalar;
        }
    }
    Ok(out)
}

/// `max |got - want| / max |want|`.
pub fn relative_error(got: &Tensor2D, want: &Tensor2D) -> Result<f64> {
    let diff = got.max_abs_diff(want)? as f64;
    let norm = want.max_abs() as f64;
    Ok(if norm > 0.0 { diff / norm } else { diff })
}

/// Score-pair and scalar-traffic accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    /// Context-encoding score pairs.
    pub score_pairs: u64,
    /// All inter-host scalars.
    pub comm_scalars: u64,
    pub phases: PhaseCost,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PhaseCost {
    pub context_pairs: u64,
    pub query_pairs: u64,
    pub context_comm: u64,
    pub query_comm: u64,
}

/// Causal score pairs for `len` tokens attending to themselves.
pub fn causal_pairs(len: u64) -> u64 {
    len * (len + 1) / 2
}

/// Ring attention context encoding, one layer. `L` is padded up to a multiple
/// of `hosts` for the traffic count: each host forwards its K and V shard
/// `hosts - 1` times.
pub fn ring_model(
    context_len: usize,
    hosts: usize,
    head_dim: usize,
    heads: usize,
) -> Result<FlopReport> {
    if hosts == 0 {
        return Err(Error::config("ring_model needs at least one host"));
    }
    let (l, h) = (context_len as u64, hosts as u64);
    let shard = l.div_ceil(h);
    let comm = h * (h - 1) * 2 * shard * head_dim as u64 * heads as u64;
    let pairs = causal_pairs(l);
    Ok(FlopReport {
        score_pairs: pairs,
        comm_scalars: comm,
        phases: PhaseCost {
            context_pairs: pairs,
            context_comm: comm,
            ..PhaseCost::default()
        },
    })
}

/// Parameters of a star-attention run for [`star_model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StarModel {
    pub context_len: usize,
    pub block_size: usize,
    /// Zero means no anchor.
    pub anchor_len: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub hosts: usize,
    pub query_len: usize,
    pub n_generated: usize,
    pub layers: usize,
}

/// Star attention cost. Context pairs are enumerated block by block (block 0
/// alone, later blocks behind their anchor); Phase-2 traffic is one `head_dim`
/// vector plus one scalar per token, head, layer and non-query host.
pub fn star_model(p: &StarModel) -> Result<FlopReport> {
    if p.block_size == 0 || p.block_size > p.context_len {
        return Err(Error::config(format!(
            "block_size {} must be in 1..={}",
            p.block_size, p.context_len
        )));
    }
    if p.anchor_len > p.block_size {
        return Err(Error::config("anchor_len exceeds block_size"));
    }
    if p.hosts == 0 {
        return Err(Error::config("star_model needs at least one host"));
    }
    let (l, b, a) = (
        p.context_len as u64,
        p.block_size as u64,
        p.anchor_len as u64,
    );
    let context_pairs: u64 = (0..l.div_ceil(b))
        .map(|i| {
            let own = b.min(l - i * b);
            causal_pairs(if i == 0 { own } else { a + own })
        })
        .sum();
    let steps = (p.query_len + p.n_generated) as u64;
    let query_pairs: u64 = (0..steps).map(|j| l + j + 1).sum();
    let query_comm =
        p.layers as u64 * (p.hosts as u64 - 1) * steps * (p.head_dim as u64 + 1) * p.heads as u64;
    Ok(FlopReport {
        score_pairs: context_pairs,
        comm_scalars: query_comm,
        phases: PhaseCost {
            context_pairs,
            query_pairs,
            context_comm: 0,
            query_comm,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Smallest per-row cosine similarity. Two zero rows count as 1, one zero
    /// row as 0.
    pub cosine_per_row_min: f64,
}

pub fn divergence(a: &Tensor2D, b: &Tensor2D) -> Result<DivergenceReport> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "divergence",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = a.data().len();
    let (mut max_abs, mut sum_abs) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x as f64 - y as f64).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
    }
    let mut cos_min = 1.0f64;
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = rb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let cos = match (na > 0.0, nb > 0.0) {
            (true, true) => (dot / (na * nb)).clamp(-1.0, 1.0),
            (false, false) => 1.0,
            _ => 0.0,
        };
        cos_min = cos_min.min(cos);
    }
    Ok(DivergenceReport {
        max_abs,
        mean_abs: if n == 0 { 0.0 } else { sum_abs / n as f64 },
        cosine_per_row_min: cos_min,
    })
}

/// How context rows are encoded when measuring attention mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    Global,
    BlockwiseNoAnchor {
        block_size: usize,
    },
    /// Block `i > 0` attends to a copy of the first block's keys followed by
    /// its own keys; mass landing on the copy is reported separately.
    BlockwiseAnchor {
        block_size: usize,
    },
}

impl MassMode {
    pub fn name(&self) -> &'static str {
        match self {
            MassMode::Global => "global",
            MassMode::BlockwiseNoAnchor { .. } => "blockwise_no_anchor",
            MassMode::BlockwiseAnchor { .. } => "blockwise_anchor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MassProfile {
    /// Mass per key position `0..L`.
    pub retained: Vec<f64>,
    /// Mass that landed on the anchor copy, per anchor column; its KVs are
    /// discarded. Empty unless the mode uses anchors.
    pub anchor: Vec<f64>,
}

impl MassProfile {
    pub fn total(&self) -> f64 {
        self.retained.iter().sum::<f64>() + self.anchor.iter().sum::<f64>()
    }
}

/// Per-key attention probability summed over query rows of the causal
/// self-attention of `q` over `k` (same length), encoded per `mode`.
/// `sink_bias` is added to the logit of the first key of every attention
/// window, the way a trained model treats the start of whatever sequence it
/// sees.
pub fn attention_mass_profile(
    q: &Tensor2D,
    k: &Tensor2D,
    mode: MassMode,
    sink_bias: f64,
) -> Result<MassProfile> {
    if q.shape() != k.shape() {
        return Err(Error::Dimension {
            op: "attention_mass_profile",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let len = q.rows();
    let block = match mode {
        MassMode::Global => len.max(1),
        MassMode::BlockwiseNoAnchor { block_size } | MassMode::BlockwiseAnchor { block_size } => {
            if block_size == 0 {
                return Err(Error::config("block_size must be at least 1"));
            }
            block_size
        }
    };
    let anchored = matches!(mode, MassMode::BlockwiseAnchor { .. });
    let anchor_len = if anchored { block.min(len) } else { 0 };
    let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
    let dot = |i: usize, j: usize| -> f64 {
        q.row(i)
            .iter()
            .zip(k.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
            * scale
    };
    let mut profile = MassProfile {
        retained: vec![0.0; len],
        anchor: vec![0.0; anchor_len],
    };
    for i in 0..len {
        let start = (i / block) * block;
        // (is_anchor_copy, key index)
        let mut window: Vec<(bool, usize)> = Vec::new();
        if anchored && start > 0 {
            window.extend((0..anchor_len).map(|j| (true, j)));
        }
        window.extend((start..=i).map(|j| (false, j)));
        let logits: Vec<f64> = window
            .iter()
            .enumerate()
            .map(|(w, &(_, j))| dot(i, j) + if w == 0 { sink_bias } else { 0.0 })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = weights.iter().sum();
        for (&(is_anchor, j), w) in window.iter().zip(weights) {
            let target = if is_anchor {
                &mut profile.anchor[j]
            } else {
                &mut profile.retained[j]
            };
            *target += w / denom;
        }
    }
    Ok(profile)
}
