//! Block plans, anchor-augmented blocks and per-block KV encoding.
//!
//! A context of `L` tokens is cut into `n = ⌈L/b⌉` contiguous blocks. Every
//! block after the first is prefixed with an anchor (by default the first
//! `anchor_len` tokens of the context at their original positions); the whole
//! augmented block is encoded causally and only the own-block KV rows are kept.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKv, ModelWeights, TokenId};
use crate::numerics::Prng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockPlan {
    pub context_len: usize,
    pub block_size: usize,
    pub num_blocks: usize,
    pub num_hosts: usize,
    /// `host_assignment[i]` is the host that encodes block `i`.
    pub host_assignment: Vec<usize>,
}

/// Splits `[0, L)` into `⌈L/b⌉` blocks, one host per block.
pub fn partition(context_len: usize, block_size: usize) -> Result<BlockPlan> {
    if context_len == 0 {
        return Err(Error::config("context length must be at least 1"));
    }
    if block_size == 0 {
        return Err(Error::config("block_size must be at least 1"));
    }
    let num_blocks = context_len.div_ceil(block_size);
    Ok(BlockPlan {
        context_len,
        block_size,
        num_blocks,
        num_hosts: num_blocks,
        host_assignment: (0..num_blocks).collect(),
    })
}

impl BlockPlan {
    /// Reassigns blocks to `hosts` hosts in contiguous, balanced runs. More
    /// hosts than blocks is an error unless `allow_idle`, in which case block
    /// `i` goes to host `i` and the rest stay empty.
    pub fn with_hosts(mut self, hosts: usize, allow_idle: bool) -> Result<Self> {
        if hosts == 0 {
            return Err(Error::config("hosts must be at least 1"));
        }
        let n = self.num_blocks;
        if hosts > n && !allow_idle {
            return Err(Error::config(format!(
                "{hosts} hosts for {n} blocks; enable allow_idle_hosts to leave hosts idle"
            )));
        }
        self.host_assignment = (0..n)
            .map(|i| if hosts >= n { i } else { i * hosts / n })
            .collect();
        self.num_hosts = hosts;
        Ok(self)
    }

    pub fn span(&self, block: usize) -> Range<usize> {
        let start = block * self.block_size;
        start..(start + self.block_size).min(self.context_len)
    }

    pub fn blocks_of(&self, host: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_blocks).filter(move |&b| self.host_assignment[b] == host)
    }
}

/// Where anchor tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorContent {
    FirstBlock,
    None,
    /// The `anchor_len` tokens immediately before the block.
    PreviousBlock,
    /// Uniform over the vocabulary.
    RandomTokens,
    /// A fresh permutation of the first-block anchor tokens per block.
    ShuffledFirstBlock,
    ConstantToken(TokenId),
}

/// Which position IDs the anchor tokens carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPosition {
    /// `0..anchor_len`.
    FirstBlock,
    /// `start - anchor_len..start`, where `start` is the block's first position.
    PreviousBlock,
    /// `anchor_len` distinct positions drawn from `[0, start)`, ascending.
    RandomSampled,
}

/// Serialized in its `content/position[@len]` text form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AnchorSpec {
    pub content: AnchorContent,
    pub position: AnchorPosition,
    /// Defaults to the block size.
    pub anchor_len: Option<usize>,
}

impl TryFrom<String> for AnchorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AnchorSpec> for String {
    fn from(spec: AnchorSpec) -> String {
        spec.to_string()
    }
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            content: AnchorContent::FirstBlock,
            position: AnchorPosition::FirstBlock,
            anchor_len: None,
        }
    }
}

impl AnchorSpec {
    pub fn none() -> Self {
        Self {
            content: AnchorContent::None,
            ..Self::default()
        }
    }

    pub fn new(content: AnchorContent, position: AnchorPosition) -> Self {
        Self {
            content,
            position,
            anchor_len: None,
        }
    }

    /// Effective anchor length for block size `b`; zero when there is no anchor.
    pub fn len_for(&self, block_size: usize) -> usize {
        match self.content {
            AnchorContent::None => 0,
            _ => self.anchor_len.unwrap_or(block_size),
        }
    }

    pub fn validate(&self, block_size: usize, vocab: usize) -> Result<()> {
        if self.content == AnchorContent::None {
            return Ok(());
        }
        match self.anchor_len {
            Some(0) => return Err(Error::config("anchor.anchor_len must be at least 1")),
            Some(a) if a > block_size => {
                return Err(Error::config(format!(
                    "anchor.anchor_len {a} exceeds block_size {block_size}"
                )))
            }
            _ => {}
        }
        if let AnchorContent::ConstantToken(t) = self.content {
            if t as usize >= vocab {
                return Err(Error::config(format!(
                    "anchor constant token {t} is outside vocab {vocab}"
                )));
            }
        }
        Ok(())
    }

    /// Table of strategies covering every content and position mode.
    pub fn ablation_suite() -> Vec<AnchorSpec> {
        use AnchorContent as C;
        use AnchorPosition as P;
        vec![
            AnchorSpec::none(),
            AnchorSpec::new(C::FirstBlock, P::FirstBlock),
            AnchorSpec::new(C::FirstBlock, P::RandomSampled),
            AnchorSpec::new(C::FirstBlock, P::PreviousBlock),
            AnchorSpec::new(C::ConstantToken(b' ' as TokenId), P::FirstBlock),
            AnchorSpec::new(C::ConstantToken(b'.' as TokenId), P::FirstBlock),
            AnchorSpec::new(C::RandomTokens, P::FirstBlock),
            AnchorSpec::new(C::ShuffledFirstBlock, P::FirstBlock),
            AnchorSpec::new(C::PreviousBlock, P::PreviousBlock),
        ]
    }
}

impl fmt::Display for AnchorContent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorContent::FirstBlock => f.write_str("first_block"),
            AnchorContent::None => f.write_str("none"),
            AnchorContent::PreviousBlock => f.write_str("previous_block"),
            AnchorContent::RandomTokens => f.write_str("random_tokens"),
            AnchorContent::ShuffledFirstBlock => f.write_str("shuffled_first_block"),
            AnchorContent::ConstantToken(t) => write!(f, "constant_token:{t}"),
        }
    }
}

impl fmt::Display for AnchorPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorPosition::FirstBlock => "first_block",
            AnchorPosition::PreviousBlock => "previous_block",
            AnchorPosition::RandomSampled => "random_sampled",
        })
    }
}

/// `content/position[@anchor_len]`, or just `none`.
impl fmt::Display for AnchorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.content == AnchorContent::None {
            return f.write_str("none");
        }
        write!(f, "{}/{}", self.content, self.position)?;
        if let Some(a) = self.anchor_len {
            write!(f, "@{a}")?;
        }
        Ok(())
    }
}

impl FromStr for AnchorContent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "first_block" => AnchorContent::FirstBlock,
            "none" => AnchorContent::None,
            "previous_block" => AnchorContent::PreviousBlock,
            "random_tokens" => AnchorContent::RandomTokens,
            "shuffled_first_block" => AnchorContent::ShuffledFirstBlock,
            other => match other.strip_prefix("constant_token:") {
                Some(t) => AnchorContent::ConstantToken(
                    t.parse()
                        .map_err(|_| Error::config(format!("bad constant token id {t:?}")))?,
                ),
                None => return Err(Error::config(format!("unknown anchor content {other:?}"))),
            },
        })
    }
}

impl FromStr for AnchorPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "first_block" => AnchorPosition::FirstBlock,
            "previous_block" => AnchorPosition::PreviousBlock,
            "random_sampled" => AnchorPosition::RandomSampled,
            other => return Err(Error::config(format!("unknown anchor position {other:?}"))),
        })
    }
}

impl FromStr for AnchorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, len) = match s.split_once('@') {
            Some((b, l)) => (
                b,
                Some(
                    l.parse()
                        .map_err(|_| Error::config(format!("bad anchor length in {s:?}")))?,
                ),
            ),
            None => (s, None),
        };
        let (content, position) = match body.split_once('/') {
            Some((c, p)) => (c.parse()?, p.parse()?),
            None => (body.parse()?, AnchorPosition::FirstBlock),
        };
        Ok(AnchorSpec {
            content,
            position,
            anchor_len: len,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedBlock {
    pub block_index: usize,
    pub token_ids: Vec<TokenId>,
    pub position_ids: Vec<usize>,
    pub anchor_prefix_len: usize,
}

impl AugmentedBlock {
    pub fn own_len(&self) -> usize {
        self.token_ids.len() - self.anchor_prefix_len
    }

    pub fn own_positions(&self) -> &[usize] {
        &self.position_ids[self.anchor_prefix_len..]
    }

    pub fn anchor_tokens(&self) -> &[TokenId] {
        &self.token_ids[..self.anchor_prefix_len]
    }

    pub fn anchor_positions(&self) -> &[usize] {
        &self.position_ids[..self.anchor_prefix_len]
    }
}

/// Builds the augmented blocks. Random modes draw from `prng` block by block,
/// content before positions.
pub fn augment(
    plan: &BlockPlan,
    tokens: &[TokenId],
    spec: &AnchorSpec,
    vocab: usize,
    prng: &mut Prng,
) -> Result<Vec<AugmentedBlock>> {
    if tokens.len() != plan.context_len {
        return Err(Error::shape(format!(
            "{} tokens for a plan over {}",
            tokens.len(),
            plan.context_len
        )));
    }
    spec.validate(plan.block_size, vocab)?;
    let a = spec.len_for(plan.block_size);
    let mut blocks = Vec::with_capacity(plan.num_blocks);
    for i in 0..plan.num_blocks {
        let span = plan.span(i);
        let start = span.start;
        let (mut tok, mut pos) = if i == 0 || a == 0 {
            (Vec::new(), Vec::new())
        } else {
            let tok: Vec<TokenId> = match spec.content {
                AnchorContent::FirstBlock => tokens[..a].to_vec(),
                AnchorContent::PreviousBlock => tokens[start - a..start].to_vec(),
                AnchorContent::RandomTokens => (0..a)
                    .map(|_| prng.next_below(vocab as u64) as TokenId)
                    .collect(),
                AnchorContent::ShuffledFirstBlock => {
                    let mut t = tokens[..a].to_vec();
                    prng.shuffle(&mut t);
                    t
                }
                AnchorContent::ConstantToken(t) => vec![t; a],
                AnchorContent::None => unreachable!("anchor length is zero without content"),
            };
            let pos: Vec<usize> = match spec.position {
                AnchorPosition::FirstBlock => (0..a).collect(),
                AnchorPosition::PreviousBlock => (start - a..start).collect(),
                AnchorPosition::RandomSampled => prng.sample_distinct_sorted(a, start),
            };
            (tok, pos)
        };
        tok.extend_from_slice(&tokens[span.clone()]);
        pos.extend(span);
        blocks.push(AugmentedBlock {
            block_index: i,
            anchor_prefix_len: tok.len() - plan.span(i).len(),
            token_ids: tok,
            position_ids: pos,
        });
    }
    Ok(blocks)
}

/// Retained keys/values of one host, per layer, with their global positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerKv>,
    pub positions: Vec<usize>,
    pub host: usize,
}

impl KVCache {
    pub fn empty(layers: usize, width: usize, host: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerKv::empty(width)).collect(),
            positions: Vec::new(),
            host,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &KVCache) -> Result<()> {
        if other.layers.len() != self.layers.len() {
            return Err(Error::shape("caches with different layer counts"));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.append(&theirs.keys, &theirs.values)?;
        }
        self.positions.extend_from_slice(&other.positions);
        Ok(())
    }
}

/// Encodes the whole augmented block causally and keeps only the own-block
/// KV rows, rotated at their recorded positions.
pub fn encode_block(block: &AugmentedBlock, model: &ModelWeights, host: usize) -> Result<KVCache> {
    let (_, kv) = model.encode(&block.token_ids, &block.position_ids)?;
    let own = block.anchor_prefix_len..block.token_ids.len();
    Ok(KVCache {
        layers: kv.iter().map(|l| l.slice_rows(own.clone())).collect(),
        positions: block.own_positions().to_vec(),
        host,
    })
}

/// Block-granular visibility: `(n + 1) x (n + 1)`, context rows first and the
/// query row last. Context block `i` sees itself and the block its anchor is
/// taken from (none for synthetic anchors); the query sees everything.
pub fn sparsity_pattern(plan: &BlockPlan, spec: &AnchorSpec) -> Vec<Vec<bool>> {
    let n = plan.num_blocks;
    let mut pattern = vec![vec![false; n + 1]; n + 1];
    for (i, row) in pattern.iter_mut().enumerate().take(n) {
        row[i] = true;
        if i > 0 && spec.len_for(plan.block_size) > 0 {
            match spec.content {
                AnchorContent::FirstBlock | AnchorContent::ShuffledFirstBlock => row[0] = true,
                AnchorContent::PreviousBlock => row[i - 1] = true,
                _ => {}
            }
        }
    }
    pattern[n].fill(true);
    pattern
}
