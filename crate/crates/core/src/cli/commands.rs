//! Experiment commands. Each returns plain report values; writing files is
//! left to the caller.

use serde::Serialize;

use super::config::{ExperimentConfig, Mode};
use crate::blocking::AnchorSpec;
use crate::error::{Error, Result};
use crate::metrics::{
    attention_mass_profile, causal_pairs, divergence, ring_model, star_model, DivergenceReport,
    FlopReport, MassMode, StarModel,
};
use crate::model::{init_model, ModelWeights, TokenId};
use crate::numerics::{prng_fill, Prng, Tensor2D};
use crate::par;
use crate::sim::{decode, forward_star, CommLedger, DecodeSession, PayloadKind, Phase};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub sequence_len: usize,
    pub block_size: usize,
    pub num_blocks: usize,
    pub hosts: usize,
    pub anchor: String,
    pub query_len: usize,
    pub exact_regime: bool,
    pub tolerance: f64,
    pub within_tolerance: bool,
    pub divergence: DivergenceReport,
}

fn star_vs_global(
    cfg: &ExperimentConfig,
    model: &ModelWeights,
    anchor: AnchorSpec,
) -> Result<(Tensor2D, Tensor2D)> {
    let context = cfg.context_tokens()?;
    let query = cfg.query_tokens()?;
    let star = forward_star(model, &context, &query, &cfg.star_with(anchor))?;
    let prompt: Vec<TokenId> = context.iter().chain(&query).copied().collect();
    let global = model
        .forward_global(&prompt)?
        .slice_rows(context.len()..prompt.len());
    Ok((star, global))
}

/// Star vs. global logits over the query positions.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let model = init_model(&cfg.model)?;
    let (star, global) = star_vs_global(cfg, &model, cfg.anchor)?;
    let div = divergence(&star, &global)?;
    let exact_regime = cfg.num_blocks() <= 2;
    Ok(CompareReport {
        schema_version: SCHEMA_VERSION,
        command: "compare",
        sequence_len: cfg.sequence_len,
        block_size: cfg.block_size(),
        num_blocks: cfg.num_blocks(),
        hosts: cfg.hosts(),
        anchor: cfg.anchor.to_string(),
        query_len: cfg.query.len(),
        exact_regime,
        tolerance: cfg.tolerance,
        within_tolerance: !exact_regime || div.max_abs <= cfg.tolerance,
        divergence: div,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub sequence_len: usize,
    pub block_size: usize,
    pub hosts: usize,
    pub star_pairs: u64,
    pub global_pairs: u64,
    pub star_comm: u64,
    pub ring_comm: u64,
    pub pair_ratio: f64,
}

pub const BENCH_CSV_HEADER: &str = "L,b,H,star_pairs,global_pairs,star_comm,ring_comm,pair_ratio";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.sequence_len,
            self.block_size,
            self.hosts,
            self.star_pairs,
            self.global_pairs,
            self.star_comm,
            self.ring_comm,
            self.pair_ratio
        )
    }
}

/// Analytic cost sweep, one layer, anchor length equal to block size.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let sweep = cfg.sweep();
    if sweep.is_empty() {
        return Err(Error::config("sweep must not be empty"));
    }
    let head_dim = cfg.model.head_dim();
    let heads = cfg.model.heads;
    let query_len = cfg.query.len();
    let rows = par::map_ordered(&sweep, |p| -> Result<BenchRow> {
        let star: FlopReport = star_model(&StarModel {
            context_len: p.sequence_len,
            block_size: p.block_size,
            anchor_len: cfg
                .anchor
                .anchor_len
                .unwrap_or(p.block_size)
                .min(p.block_size)
                * usize::from(cfg.anchor.len_for(p.block_size) > 0),
            head_dim,
            heads,
            hosts: p.hosts,
            query_len,
            n_generated: cfg.n_generate,
            layers: 1,
        })?;
        let ring = ring_model(p.sequence_len, p.hosts, head_dim, heads)?;
        let global_pairs = causal_pairs(p.sequence_len as u64);
        Ok(BenchRow {
            sequence_len: p.sequence_len,
            block_size: p.block_size,
            hosts: p.hosts,
            star_pairs: star.score_pairs,
            global_pairs,
            star_comm: star.comm_scalars,
            ring_comm: ring.comm_scalars,
            pair_ratio: star.score_pairs as f64 / global_pairs as f64,
        })
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblateRow {
    pub strategy: String,
    pub divergence: DivergenceReport,
}

pub const ABLATE_CSV_HEADER: &str = "strategy,max_abs,mean_abs,cosine_per_row_min";

impl AblateRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.strategy,
            self.divergence.max_abs,
            self.divergence.mean_abs,
            self.divergence.cosine_per_row_min
        )
    }
}

/// Divergence of star from global logits for each anchor strategy.
pub fn cmd_ablate(cfg: &ExperimentConfig, strategies: &[AnchorSpec]) -> Result<Vec<AblateRow>> {
    if strategies.is_empty() {
        return Err(Error::config("strategy list must not be empty"));
    }
    for s in strategies {
        s.validate(cfg.block_size(), cfg.model.vocab)
            .map_err(|e| Error::config(format!("strategy {s}: {e}")))?;
    }
    let model = init_model(&cfg.model)?;
    let rows = par::map_ordered(strategies, |s| -> Result<AblateRow> {
        let (star, global) = star_vs_global(cfg, &model, *s)?;
        Ok(AblateRow {
            strategy: s.to_string(),
            divergence: divergence(&star, &global)?,
        })
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub mode: String,
    /// `context` for retained key positions, `anchor` for the discarded copy.
    pub kind: String,
    pub position: usize,
    pub mass: f64,
}

pub const PROFILE_CSV_HEADER: &str = "mode,kind,position,mass";

impl ProfileRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.mode, self.kind, self.position, self.mass
        )
    }
}

pub fn parse_profile_csv(text: &str) -> Result<Vec<ProfileRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PROFILE_CSV_HEADER) {
        return Err(Error::Format("profile CSV header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad profile CSV line {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ProfileRow {
                mode: f[0].to_string(),
                kind: f[1].to_string(),
                position: f[2].parse().map_err(|_| bad())?,
                mass: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Attention-mass profiles of seeded synthetic Q/K under global, blockwise and
/// anchored blockwise encoding.
pub fn cmd_profile(cfg: &ExperimentConfig) -> Result<Vec<ProfileRow>> {
    let mut prng = Prng::new(cfg.seed);
    let d = cfg.model.head_dim();
    let q = prng_fill(&mut prng, cfg.sequence_len, d, 1.0);
    let k = prng_fill(&mut prng, cfg.sequence_len, d, 1.0);
    let b = cfg.block_size();
    let modes = [
        MassMode::Global,
        MassMode::BlockwiseNoAnchor { block_size: b },
        MassMode::BlockwiseAnchor { block_size: b },
    ];
    let profiles = par::map_ordered(&modes, |m| {
        attention_mass_profile(&q, &k, *m, cfg.sink_bias)
    });
    let mut rows = Vec::new();
    for (mode, profile) in modes.iter().zip(profiles) {
        let profile = profile?;
        let tagged = [("context", &profile.retained), ("anchor", &profile.anchor)];
        for (kind, masses) in tagged {
            rows.extend(
                masses
                    .iter()
                    .enumerate()
                    .map(|(position, &mass)| ProfileRow {
                        mode: mode.name().to_string(),
                        kind: kind.to_string(),
                        position,
                        mass,
                    }),
            );
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub entries: usize,
    pub phase1_entries: usize,
    pub partial_scalars: u64,
    pub broadcast_scalars: u64,
    /// Closed-form Phase-2 partial traffic for this run.
    pub predicted_partial_scalars: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub mode: Mode,
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Greedy tokens under global attention, for comparison.
    pub global_tokens: Vec<TokenId>,
    pub agrees_with_global: bool,
    pub ledger: Option<LedgerSummary>,
    pub ring: Option<FlopReport>,
}

pub struct DecodeOutcome {
    pub report: DecodeReport,
    pub ledger: Option<CommLedger>,
}

pub fn cmd_decode(cfg: &ExperimentConfig) -> Result<DecodeOutcome> {
    let model = init_model(&cfg.model)?;
    let context = cfg.context_tokens()?;
    let query = cfg.query_tokens()?;
    let prompt: Vec<TokenId> = context.iter().chain(&query).copied().collect();
    let global_tokens = model.generate_global(&prompt, cfg.n_generate)?;
    let (tokens, ledger, summary, ring) = match cfg.mode {
        Mode::Star => {
            let star = cfg.star();
            let mut session = DecodeSession::start(&model, &context, &star)?;
            session.encode_query(&model, &query)?;
            let tokens = decode(&mut session, &model, cfg.n_generate)?;
            let active_hosts = session.hosts.iter().filter(|h| !h.cache.is_empty()).count();
            let predicted = star_model(&StarModel {
                context_len: cfg.sequence_len,
                block_size: cfg.block_size(),
                anchor_len: cfg.anchor.len_for(cfg.block_size()),
                head_dim: cfg.model.head_dim(),
                heads: cfg.model.heads,
                hosts: active_hosts,
                query_len: query.len(),
                n_generated: tokens.len(),
                layers: cfg.model.layers,
            })?;
            let ledger = session.ledger;
            let summary = LedgerSummary {
                entries: ledger.len(),
                phase1_entries: ledger.phase_entries(Phase::Phase1).count(),
                partial_scalars: ledger.partial_scalars(),
                broadcast_scalars: ledger.scalars_where(|e| e.kind == PayloadKind::QueryBroadcast),
                predicted_partial_scalars: predicted.comm_scalars,
            };
            (tokens, Some(ledger), Some(summary), None)
        }
        Mode::Global => (global_tokens.clone(), None, None, None),
        Mode::RingModel => {
            let ring = ring_model(
                cfg.sequence_len,
                cfg.hosts(),
                cfg.model.head_dim(),
                cfg.model.heads,
            )?;
            (global_tokens.clone(), None, None, Some(ring))
        }
    };
    let text = tokens
        .iter()
        .map(|&t| char::from(t.min(255) as u8))
        .collect();
    Ok(DecodeOutcome {
        report: DecodeReport {
            schema_version: SCHEMA_VERSION,
            command: "decode",
            mode: cfg.mode,
            agrees_with_global: tokens == global_tokens,
            tokens,
            text,
            global_tokens,
            ledger: summary,
            ring,
        },
        ledger,
    })
}
