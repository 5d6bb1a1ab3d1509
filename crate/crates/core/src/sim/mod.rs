//! Simulated host fleet.
//!
//! Phase 1 encodes blocks independently on their hosts and never communicates.
//! Phase 2 runs one layer at a time: every host attends the broadcast queries
//! to its own cache, context hosts ship `(out, lse)` to the query host, and the
//! query host merges them in ascending host order. Only the query host appends
//! new KV rows. Every simulated transfer lands in a [`CommLedger`].

mod ledger;

pub use ledger::{CommLedger, LedgerEntry, PayloadKind, Phase, LEDGER_CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::attention::{merge_partials, partial_attention, KeyMask, PartialAttention};
use crate::blocking::{augment, encode_block, partition, AnchorSpec, BlockPlan, KVCache};
use crate::error::{Error, Result};
use crate::model::{argmax, ModelWeights, TokenId};
use crate::numerics::{Prng, Scalar, Tensor2D};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Context,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Host {
    pub index: usize,
    pub cache: KVCache,
    pub role: Role,
}

impl Host {
    pub fn new(index: usize, cache: KVCache) -> Self {
        Self {
            index,
            cache,
            role: Role::Context,
        }
    }
}

/// Makes `hosts[index]` the only query host.
pub fn set_query_host(hosts: &mut [Host], index: usize) -> Result<()> {
    if index >= hosts.len() {
        return Err(Error::config(format!(
            "query host {index} out of range for {} hosts",
            hosts.len()
        )));
    }
    for h in hosts.iter_mut() {
        h.role = if h.index == index {
            Role::Query
        } else {
            Role::Context
        };
    }
    Ok(())
}

pub fn query_host(hosts: &[Host]) -> Result<usize> {
    let mut it = hosts.iter().filter(|h| h.role == Role::Query);
    match (it.next(), it.next()) {
        (Some(h), None) => Ok(h.index),
        (None, _) => Err(Error::config("no query host designated")),
        _ => Err(Error::config("more than one query host designated")),
    }
}

/// Star-attention run parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarConfig {
    pub block_size: usize,
    pub anchor: AnchorSpec,
    pub hosts: usize,
    pub allow_idle_hosts: bool,
    /// Seeds the random anchor modes.
    pub seed: u64,
}

impl StarConfig {
    pub fn plan(&self, context_len: usize) -> Result<BlockPlan> {
        partition(context_len, self.block_size)?.with_hosts(self.hosts, self.allow_idle_hosts)
    }
}

/// Phase 1: augment, encode every block on its host, keep own-block KV rows.
/// Blocks are encoded in parallel; caches are assembled in block order. The
/// last host is the query host.
pub fn run_phase1(
    tokens: &[TokenId],
    plan: &BlockPlan,
    spec: &AnchorSpec,
    model: &ModelWeights,
    prng: &mut Prng,
) -> Result<Vec<Host>> {
    let cfg = model.config();
    let blocks = augment(plan, tokens, spec, cfg.vocab, prng)?;
    let caches = par::map_ordered(&blocks, |b| {
        encode_block(b, model, plan.host_assignment[b.block_index])
    });
    let mut hosts: Vec<Host> = (0..plan.num_hosts)
        .map(|h| Host::new(h, KVCache::empty(cfg.layers, cfg.d_model, h)))
        .collect();
    for cache in caches {
        let cache = cache?;
        hosts[cache.host].cache.extend(&cache)?;
    }
    set_query_host(&mut hosts, plan.num_hosts - 1)?;
    Ok(hosts)
}

/// One layer of Phase-2 attention for queries `q` (`l_q x heads·head_dim`).
///
/// When `new_rows > 0` the query host's last `new_rows` cache rows are the
/// queries' own keys (one per query row, in order) and are attended causally;
/// everything else is attended in full. Hosts with empty caches are skipped.
/// Returns the merged output and the transfers it took.
pub fn run_phase2_step(
    hosts: &[Host],
    layer: usize,
    q: &Tensor2D,
    heads: usize,
    new_rows: usize,
) -> Result<(Tensor2D, Vec<LedgerEntry>)> {
    if hosts.is_empty() {
        return Err(Error::config("phase 2 needs at least one host"));
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{} query columns do not split into {heads} heads",
            q.cols()
        )));
    }
    if q.rows() == 0 {
        return Err(Error::shape("phase 2 needs at least one query row"));
    }
    if new_rows != 0 && new_rows != q.rows() {
        return Err(Error::shape(format!(
            "{new_rows} new cache rows for {} query rows",
            q.rows()
        )));
    }
    let qh = query_host(hosts)?;
    let hd = q.cols() / heads;
    let q_heads: Vec<Tensor2D> = (0..heads)
        .map(|h| q.columns(h * hd..(h + 1) * hd))
        .collect();

    let local = |host: &Host| -> Result<Option<Vec<PartialAttention>>> {
        let kv = host.cache.layers.get(layer).ok_or_else(|| {
            Error::shape(format!(
                "host {} has no cache for layer {layer}",
                host.index
            ))
        })?;
        if kv.rows() == 0 {
            return Ok(None);
        }
        if kv.keys.cols() != q.cols() {
            return Err(Error::Dimension {
                op: "phase 2 query/cache",
                left: q.shape(),
                right: kv.keys.shape(),
            });
        }
        let mask = if host.index == qh && new_rows > 0 {
            if kv.rows() < new_rows {
                return Err(Error::shape("query host cache shorter than the new rows"));
            }
            KeyMask::Causal {
                q_offset: kv.rows() - new_rows,
            }
        } else {
            KeyMask::Full
        };
        q_heads
            .iter()
            .enumerate()
            .map(|(h, q_head)| {
                let cols = h * hd..(h + 1) * hd;
                partial_attention(
                    q_head,
                    &kv.keys.columns(cols.clone()),
                    &kv.values.columns(cols),
                    mask,
                )
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    let results = par::map_ordered(hosts, local);

    // single coordination point: ledger and merge follow host order
    let mut per_head: Vec<Vec<PartialAttention>> = vec![Vec::new(); heads];
    let mut delta = Vec::new();
    for (host, res) in hosts.iter().zip(results) {
        let Some(parts) = res? else { continue };
        if host.index != qh {
            let rows = q.rows() as u64;
            delta.push(LedgerEntry {
                phase: Phase::Phase2,
                src: host.index,
                dst: qh,
                kind: PayloadKind::PartialOut,
                scalar_count: rows * (hd * heads) as u64,
            });
            delta.push(LedgerEntry {
                phase: Phase::Phase2,
                src: host.index,
                dst: qh,
                kind: PayloadKind::PartialLse,
                scalar_count: rows * heads as u64,
            });
        }
        for (h, p) in parts.into_iter().enumerate() {
            per_head[h].push(p);
        }
    }
    if per_head[0].is_empty() {
        return Err(Error::domain("every host cache is empty"));
    }
    let mut out = Tensor2D::zeros(q.rows(), q.cols());
    for (h, parts) in per_head.iter().enumerate() {
        out.set_columns(h * hd, &merge_partials(parts)?.out)?;
    }
    Ok((out, delta))
}

/// Phase-2 state: hosts after Phase 1, the tokens generated so far and the
/// transfers recorded along the way.
#[derive(Clone, Debug)]
pub struct DecodeSession {
    pub hosts: Vec<Host>,
    pub generated: Vec<TokenId>,
    pub next_position: usize,
    pub ledger: CommLedger,
    context_len: usize,
    query_len: usize,
    last_logits: Option<Vec<Scalar>>,
}

impl DecodeSession {
    pub fn new(hosts: Vec<Host>, context_len: usize) -> Self {
        Self {
            hosts,
            generated: Vec::new(),
            next_position: context_len,
            ledger: CommLedger::new(),
            context_len,
            query_len: 0,
            last_logits: None,
        }
    }

    /// Partitions `context` per `cfg` and runs Phase 1.
    pub fn start(model: &ModelWeights, context: &[TokenId], cfg: &StarConfig) -> Result<Self> {
        let plan = cfg.plan(context.len())?;
        let hosts = run_phase1(context, &plan, &cfg.anchor, model, &mut Prng::new(cfg.seed))?;
        Ok(Self::new(hosts, context.len()))
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn query_host(&self) -> Result<usize> {
        query_host(&self.hosts)
    }

    pub fn set_query_host(&mut self, index: usize) -> Result<()> {
        set_query_host(&mut self.hosts, index)
    }

    pub fn last_logits(&self) -> Option<&[Scalar]> {
        self.last_logits.as_deref()
    }

    /// Broadcasts the query and encodes it with global attention. Returns the
    /// logits for every query position.
    pub fn encode_query(&mut self, model: &ModelWeights, query: &[TokenId]) -> Result<Tensor2D> {
        if query.is_empty() {
            return Err(Error::config("query must contain at least one token"));
        }
        if self.query_len != 0 {
            return Err(Error::config("query already encoded for this session"));
        }
        let logits = self.feed(model, query)?;
        self.query_len = query.len();
        Ok(logits)
    }

    /// Runs `tokens` through every layer with distributed attention at the
    /// next positions; the query host appends their keys and values.
    fn feed(&mut self, model: &ModelWeights, tokens: &[TokenId]) -> Result<Tensor2D> {
        let qh = self.query_host()?;
        let heads = model.config().heads;
        for h in &self.hosts {
            if h.index != qh && !h.cache.is_empty() {
                self.ledger.record(LedgerEntry {
                    phase: Phase::Phase2,
                    src: qh,
                    dst: h.index,
                    kind: PayloadKind::QueryBroadcast,
                    scalar_count: tokens.len() as u64,
                });
            }
        }
        let positions: Vec<usize> =
            (self.next_position..self.next_position + tokens.len()).collect();
        self.hosts[qh].cache.positions.extend_from_slice(&positions);
        let hosts = &mut self.hosts;
        let ledger = &mut self.ledger;
        let hidden = model.run_layers(tokens, &positions, |layer, q, k, v| {
            hosts[qh].cache.layers[layer].append(k, v)?;
            let (out, delta) = run_phase2_step(hosts, layer, q, heads, tokens.len())?;
            ledger.extend(delta);
            Ok(out)
        })?;
        self.next_position += tokens.len();
        let logits = model.logits(&hidden)?;
        self.last_logits = Some(logits.row(logits.rows() - 1).to_vec());
        Ok(logits)
    }
}

/// Greedy decoding. Each generated token is fed back so the query host's
/// cache always covers `L + query_len + generated.len()` positions.
pub fn decode(
    session: &mut DecodeSession,
    model: &ModelWeights,
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let next = argmax(
            session
                .last_logits()
                .ok_or_else(|| Error::config("decode before the query was encoded"))?,
        );
        session.generated.push(next);
        out.push(next);
        session.feed(model, &[next])?;
    }
    Ok(out)
}

/// Star-attention logits for the query positions: `context` through Phase 1,
/// `query` through Phase 2.
pub fn forward_star(
    model: &ModelWeights,
    context: &[TokenId],
    query: &[TokenId],
    cfg: &StarConfig,
) -> Result<Tensor2D> {
    if query.is_empty() {
        return Err(Error::config("query must contain at least one token"));
    }
    let mut session = DecodeSession::start(model, context, cfg)?;
    session.encode_query(model, query)
}
