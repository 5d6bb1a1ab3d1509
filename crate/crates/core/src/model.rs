//! Seeded byte-level decoder used to drive both phases end to end.
//!
//! Architecture (pre-norm):
//!
//! ```text
//! x = E[tokens]
//! for each layer:
//!     h = rms(x) * attn_gain
//!     q, k = rope(h Wq), rope(h Wk) per head;  v = h Wv
//!     x = x + concat_heads(attention(q, k, v)) Wo
//!     h = rms(x) * ffn_gain
//!     x = x + silu(h Wup) Wdown
//! logits = (rms(x) * final_gain) Eᵀ
//! ```
//!
//! `rms(x) = x / sqrt(mean(x²) + 1e-6)`. Every weight is drawn from one
//! [`Prng`] seeded with `cfg.seed`, in declaration order: embedding, then per
//! layer `attn_gain, Wq, Wk, Wv, Wo, ffn_gain, Wup, Wdown`, then `final_gain`.
//! Matrices are uniform in `±1/√d_model`; gains are `1 + u` with `u` uniform
//! in `±0.1`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::causal_attention;
use crate::error::{Error, Result};
use crate::numerics::{matmul, prng_fill, rotate_row, Prng, RopeConfig, Scalar, Tensor2D};

pub type TokenId = u32;

const RMS_EPS: f64 = 1e-6;
const GAIN_JITTER: Scalar = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub seed: u64,
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 32,
            heads: 4,
            layers: 2,
            ff_mult: 2,
            seed: 0,
            rope_theta: RopeConfig::DEFAULT_THETA,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff_mult", self.ff_mult),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.heads ({}) must divide model.d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.vocab > TokenId::MAX as usize {
            return Err(Error::config("model.vocab exceeds token id range"));
        }
        self.rope().map(|_| ())
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::with_theta(self.head_dim(), self.rope_theta)
            .map_err(|e| Error::config(format!("model head_dim (d_model / heads): {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Tensor2D,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub ffn_gain: Tensor2D,
    pub w_up: Tensor2D,
    pub w_down: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    cfg: ModelConfig,
    rope: RopeConfig,
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor2D,
}

/// Keys (already rotated) and values for one layer, all heads side by side:
/// head `h` occupies columns `h * head_dim..(h + 1) * head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor2D,
    pub values: Tensor2D,
}

impl LayerKv {
    pub fn empty(width: usize) -> Self {
        Self {
            keys: Tensor2D::zeros(0, width),
            values: Tensor2D::zeros(0, width),
        }
    }

    pub fn rows(&self) -> usize {
        self.keys.rows()
    }

    pub fn slice_rows(&self, rows: std::ops::Range<usize>) -> Self {
        Self {
            keys: self.keys.slice_rows(rows.clone()),
            values: self.values.slice_rows(rows),
        }
    }

    pub fn append(&mut self, keys: &Tensor2D, values: &Tensor2D) -> Result<()> {
        self.keys.append_rows(keys)?;
        self.values.append_rows(values)
    }
}

/// Builds deterministic weights from `cfg`.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let d = cfg.d_model;
    let ff = d * cfg.ff_mult;
    let scale = (1.0 / (d as f64).sqrt()) as Scalar;
    let mut prng = Prng::new(cfg.seed);
    let gain = |prng: &mut Prng| prng_fill(prng, 1, d, GAIN_JITTER).map(|u| 1.0 + u);
    let embedding = prng_fill(&mut prng, cfg.vocab, d, scale);
    let layers = (0..cfg.layers)
        .map(|_| LayerWeights {
            attn_gain: gain(&mut prng),
            wq: prng_fill(&mut prng, d, d, scale),
            wk: prng_fill(&mut prng, d, d, scale),
            wv: prng_fill(&mut prng, d, d, scale),
            wo: prng_fill(&mut prng, d, d, scale),
            ffn_gain: gain(&mut prng),
            w_up: prng_fill(&mut prng, d, ff, scale),
            w_down: prng_fill(&mut prng, ff, d, scale),
        })
        .collect();
    let final_gain = gain(&mut prng);
    Ok(ModelWeights {
        rope: cfg.rope()?,
        cfg: cfg.clone(),
        embedding,
        layers,
        final_gain,
    })
}

fn rms_norm(x: &Tensor2D, gain: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    let g = gain.row(0);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len() as f64;
        let inv = (1.0 / (ms + RMS_EPS).sqrt()) as Scalar;
        for (v, &gj) in row.iter_mut().zip(g) {
            *v *= inv * gj;
        }
    }
    out
}

fn silu(x: Scalar) -> Scalar {
    x / (1.0 + (-x).exp())
}

/// Greedy choice; ties go to the lowest token id.
pub fn argmax(logits: &[Scalar]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor2D> {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.cfg.vocab {
                return Err(Error::domain(format!(
                    "token {t} at index {i} is outside vocab {}",
                    self.cfg.vocab
                )));
            }
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Tensor2D::new(tokens.len(), d, data)
    }

    fn rotate_heads(&self, x: &mut Tensor2D, positions: &[usize]) {
        let hd = self.cfg.head_dim();
        for (r, &pos) in positions.iter().enumerate() {
            for head in x.row_mut(r).chunks_exact_mut(hd) {
                rotate_row(head, pos, &self.rope);
            }
        }
    }

    /// Runs the layer stack over `tokens` placed at `positions`. For every
    /// layer `attend(layer, q, k, v)` receives the new rows' rotated queries and
    /// keys plus values (all heads side by side) and must return the
    /// concatenated per-head attention output, one row per query.
    pub fn run_layers<F>(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mut attend: F,
    ) -> Result<Tensor2D>
    where
        F: FnMut(usize, &Tensor2D, &Tensor2D, &Tensor2D) -> Result<Tensor2D>,
    {
        if positions.len() != tokens.len() {
            return Err(Error::shape(format!(
                "{} positions for {} tokens",
                positions.len(),
                tokens.len()
            )));
        }
        let mut x = self.embed(tokens)?;
        for (l, w) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &w.attn_gain);
            let mut q = matmul(&h, &w.wq)?;
            let mut k = matmul(&h, &w.wk)?;
            let v = matmul(&h, &w.wv)?;
            self.rotate_heads(&mut q, positions);
            self.rotate_heads(&mut k, positions);
            let attn = attend(l, &q, &k, &v)?;
            x.add_assign(&matmul(&attn, &w.wo)?)?;
            let h = rms_norm(&x, &w.ffn_gain);
            let up = matmul(&h, &w.w_up)?.map(silu);
            x.add_assign(&matmul(&up, &w.w_down)?)?;
        }
        Ok(x)
    }

    pub fn logits(&self, hidden: &Tensor2D) -> Result<Tensor2D> {
        let h = rms_norm(hidden, &self.final_gain);
        matmul(&h, &self.embedding.transpose())
    }

    /// Applies `f` to each head's column slice of `q`, `k`, `v` and
    /// concatenates the per-head outputs.
    pub fn per_head<F>(
        &self,
        q: &Tensor2D,
        k: &Tensor2D,
        v: &Tensor2D,
        mut f: F,
    ) -> Result<Tensor2D>
    where
        F: FnMut(&Tensor2D, &Tensor2D, &Tensor2D) -> Result<Tensor2D>,
    {
        let hd = self.cfg.head_dim();
        let mut out = Tensor2D::zeros(q.rows(), self.cfg.d_model);
        for h in 0..self.cfg.heads {
            let cols = h * hd..(h + 1) * hd;
            let o = f(
                &q.columns(cols.clone()),
                &k.columns(cols.clone()),
                &v.columns(cols),
            )?;
            out.set_columns(h * hd, &o)?;
        }
        Ok(out)
    }

    /// Causal self-attention pass over `tokens` at `positions`, returning the
    /// final hidden states and every layer's keys and values.
    pub fn encode(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
    ) -> Result<(Tensor2D, Vec<LayerKv>)> {
        let mut kv = Vec::with_capacity(self.layers.len());
        let hidden = self.run_layers(tokens, positions, |_, q, k, v| {
            kv.push(LayerKv {
                keys: k.clone(),
                values: v.clone(),
            });
            self.per_head(q, k, v, |q, k, v| causal_attention(q, k, v, 0))
        })?;
        Ok((hidden, kv))
    }

    /// Plain causal forward pass at positions `0..len`.
    pub fn forward_global(&self, tokens: &[TokenId]) -> Result<Tensor2D> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (hidden, _) = self.encode(tokens, &positions)?;
        self.logits(&hidden)
    }

    /// Greedy decode by re-running the full global pass every step.
    pub fn generate_global(&self, prompt: &[TokenId], n_tokens: usize) -> Result<Vec<TokenId>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let logits = self.forward_global(&seq)?;
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    fn matrices(&self) -> Vec<&Tensor2D> {
        let mut m = vec![&self.embedding];
        for l in &self.layers {
            m.extend([
                &l.attn_gain,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_gain,
                &l.w_up,
                &l.w_down,
            ]);
        }
        m.push(&self.final_gain);
        m
    }

    /// Serializes to the flat weight format (see [`WEIGHTS_MAGIC`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(std::mem::size_of::<Scalar>() as u32).to_le_bytes());
        for v in [c.vocab, c.d_model, c.heads, c.layers, c.ff_mult] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.rope_theta.to_le_bytes());
        for m in self.matrices() {
            for &x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Format("weight file truncated".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weight file magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version}"
            )));
        }
        let width = u32_at(take(4)?) as usize;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported scalar width {width}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = u32_at(take(4)?) as usize;
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let rope_theta = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let cfg = ModelConfig {
            vocab: dims[0],
            d_model: dims[1],
            heads: dims[2],
            layers: dims[3],
            ff_mult: dims[4],
            seed,
            rope_theta,
        };
        cfg.validate()?;
        // shapes come from the config; reuse init for the layout, then overwrite
        let mut weights = init_model(&cfg)?;
        let shapes: Vec<(usize, usize)> = weights.matrices().iter().map(|m| m.shape()).collect();
        let mut loaded = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            let raw = take(rows * cols * width)?;
            let data = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => f32::from_le_bytes(c.try_into().unwrap()) as Scalar,
                    _ => f64::from_le_bytes(c.try_into().unwrap()) as Scalar,
                })
                .collect();
            loaded.push(Tensor2D::new(rows, cols, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes in weight file",
                r.len()
            )));
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("one tensor per shape");
        weights.embedding = next();
        for l in weights.layers.iter_mut() {
            l.attn_gain = next();
            l.wq = next();
            l.wk = next();
            l.wv = next();
            l.wo = next();
            l.ffn_gain = next();
            l.w_up = next();
            l.w_down = next();
        }
        weights.final_gain = next();
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Weight file layout, all little-endian: 8-byte magic, `u32` version,
/// `u32` scalar width in bytes (4 or 8), `u32` vocab, d_model, heads, layers,
/// ff_mult, `u64` seed, `f64` rope theta, then every matrix row-major in
/// declaration order with no per-matrix header.
pub const WEIGHTS_MAGIC: &[u8; 8] = b"STARSIMW";
pub const WEIGHTS_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 32,
            d_model: 16,
            heads: 2,
            layers: 2,
            ff_mult: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_model(&tiny()).unwrap(), init_model(&tiny()).unwrap());
        let w = init_model(&tiny()).unwrap();
        assert_eq!(w.embedding.shape(), (32, 16));
    }

    #[test]
    fn seeds_change_weights() {
        let a = init_model(&tiny()).unwrap();
        let b = init_model(&ModelConfig { seed: 6, ..tiny() }).unwrap();
        assert_ne!(a.embedding, b.embedding);
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(init_model(&bad), Err(Error::Config(_))));
        let odd_head = ModelConfig {
            d_model: 6,
            heads: 2,
            ..tiny()
        };
        assert!(matches!(init_model(&odd_head), Err(Error::Config(_))));
        let zero = ModelConfig {
            layers: 0,
            ..tiny()
        };
        assert!(init_model(&zero)
            .unwrap_err()
            .to_string()
            .contains("layers"));
    }

    #[test]
    fn single_token_logits_shape() {
        let w = init_model(&tiny()).unwrap();
        assert_eq!(w.forward_global(&[3]).unwrap().shape(), (1, 32));
        assert!(matches!(w.forward_global(&[32]), Err(Error::Domain(_))));
    }

    #[test]
    fn prefix_logits_unchanged_by_suffix() {
        let w = init_model(&tiny()).unwrap();
        let short = w.forward_global(&[1, 2, 3, 4]).unwrap();
        let long = w.forward_global(&[1, 2, 3, 4, 9, 9, 30]).unwrap();
        for i in 0..4 {
            for (a, b) in short.row(i).iter().zip(long.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn weight_file_round_trip() {
        let w = init_model(&tiny()).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..8], WEIGHTS_MAGIC);
        assert_eq!(ModelWeights::from_bytes(&bytes).unwrap(), w);
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelWeights::from_bytes(&extra).is_err());
    }
}
