//! Acceptance checks, one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use starsim::attention::{causal_attention, streaming_causal_attention, EXACTNESS_TOLERANCE};
use starsim::blocking::{
    partition, sparsity_pattern, AnchorContent, AnchorPosition, AnchorSpec, KVCache,
};
use starsim::cli::{cmd_ablate, cmd_bench, ExperimentConfig, SweepPoint};
use starsim::metrics::{causal_pairs, star_model, StarModel};
use starsim::model::{init_model, LayerKv, ModelConfig, TokenId};
use starsim::numerics::{prng_fill, Prng};
use starsim::sim::{
    decode, forward_star, run_phase2_step, set_query_host, DecodeSession, Host, Phase, StarConfig,
};
use starsim::Tensor2D;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let detail = f()?;
    let elapsed = start.elapsed();
    check(elapsed < limit, || {
        format!("took {elapsed:?}, limit {limit:?}")
    })?;
    Ok(format!("{detail}; {:.2}s", elapsed.as_secs_f64()))
}

/// Dense causal attention in f64 over concatenated keys: row `i` sees keys
/// `0..=offset + i`.
fn oracle(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, offset: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let n = offset + i + 1;
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..q.cols())
                        .map(|c| q[(i, c)] as f64 * k[(j, c)] as f64)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v.cols())
                .map(|c| (0..n).map(|j| w[j] * v[(j, c)] as f64).sum::<f64>() / z)
                .collect()
        })
        .collect()
}

fn rel_err(got: &Tensor2D, want: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            diff = diff.max((got[(i, c)] as f64 - w).abs());
            scale = scale.max(w.abs());
        }
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

fn phase2_exactness() -> Outcome {
    let mut prng = Prng::new(0x51A7);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for hosts_n in [1usize, 2, 4, 8] {
        for heads in [1usize, 2, 4] {
            for d in [4usize, 8, 16] {
                let width = heads * d;
                for _ in 0..100 {
                    let lq = 1 + prng.next_below(4) as usize;
                    let mut shards: Vec<usize> = (0..hosts_n)
                        .map(|_| 1 + prng.next_below(12) as usize)
                        .collect();
                    *shards.last_mut().unwrap() += lq;
                    let mut hosts: Vec<Host> = shards
                        .iter()
                        .enumerate()
                        .map(|(i, &n)| {
                            let layer = LayerKv {
                                keys: prng_fill(&mut prng, n, width, 1.0),
                                values: prng_fill(&mut prng, n, width, 1.0),
                            };
                            let cache = KVCache {
                                layers: vec![layer],
                                positions: Vec::new(),
                                host: i,
                            };
                            Host::new(i, cache)
                        })
                        .collect();
                    set_query_host(&mut hosts, hosts_n - 1).map_err(|e| e.to_string())?;
                    let q = prng_fill(&mut prng, lq, width, 1.0);
                    let (out, _) =
                        run_phase2_step(&hosts, 0, &q, heads, lq).map_err(|e| e.to_string())?;
                    let keys: Vec<&Tensor2D> =
                        hosts.iter().map(|h| &h.cache.layers[0].keys).collect();
                    let vals: Vec<&Tensor2D> =
                        hosts.iter().map(|h| &h.cache.layers[0].values).collect();
                    let k = Tensor2D::concat_rows(&keys).unwrap();
                    let v = Tensor2D::concat_rows(&vals).unwrap();
                    let total = k.rows();
                    for h in 0..heads {
                        let c = h * d..(h + 1) * d;
                        let want = oracle(
                            &q.columns(c.clone()),
                            &k.columns(c.clone()),
                            &v.columns(c.clone()),
                            total - lq,
                        );
                        worst = worst.max(rel_err(&out.columns(c), &want));
                    }
                    instances += 1;
                }
            }
        }
    }
    check(worst <= EXACTNESS_TOLERANCE, || {
        format!("max relative error {worst:e} > {EXACTNESS_TOLERANCE:e}")
    })?;
    Ok(format!(
        "{instances} instances, max relative error {worst:.3e}"
    ))
}

fn two_block_regime() -> Outcome {
    let mut worst = 0.0f64;
    let seeds = 24u64;
    for seed in 0..seeds {
        let model = init_model(&ModelConfig {
            vocab: 256,
            d_model: 16,
            heads: 2,
            layers: 2,
            ff_mult: 2,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let mut prng = Prng::new(seed ^ 0xC0FFEE);
        let len = 8 + prng.next_below(17) as usize;
        let n = 1 + (seed % 2) as usize;
        let block = len.div_ceil(n);
        let context: Vec<TokenId> = (0..len).map(|_| prng.next_below(256) as TokenId).collect();
        let query: Vec<TokenId> = (0..4).map(|_| prng.next_below(256) as TokenId).collect();
        let cfg = StarConfig {
            block_size: block,
            anchor: AnchorSpec::default(),
            hosts: n,
            allow_idle_hosts: false,
            seed,
        };
        let star = forward_star(&model, &context, &query, &cfg).map_err(|e| e.to_string())?;
        let prompt: Vec<TokenId> = context.iter().chain(&query).copied().collect();
        let global = model
            .forward_global(&prompt)
            .map_err(|e| e.to_string())?
            .slice_rows(len..prompt.len());
        let diff = star.max_abs_diff(&global).unwrap() as f64;
        worst = worst.max(diff);
        check(diff <= 1e-5, || {
            format!("seed {seed}: logits differ by {diff:e}")
        })?;

        let mut session =
            DecodeSession::start(&model, &context, &cfg).map_err(|e| e.to_string())?;
        session
            .encode_query(&model, &query)
            .map_err(|e| e.to_string())?;
        let got = decode(&mut session, &model, 10).map_err(|e| e.to_string())?;
        let want = model
            .generate_global(&prompt, 10)
            .map_err(|e| e.to_string())?;
        check(got == want, || {
            format!("seed {seed}: decode {got:?} vs {want:?}")
        })?;
    }
    Ok(format!(
        "{seeds} seeds, max logit diff {worst:.3e}, 10-step decodes agree"
    ))
}

fn linear_phase1() -> Outcome {
    for b in [1u64, 2, 3, 4, 8, 16] {
        let pairs = |n: u64| -> Result<u64, String> {
            star_model(&StarModel {
                context_len: (n * b) as usize,
                block_size: b as usize,
                anchor_len: b as usize,
                head_dim: 4,
                heads: 1,
                hosts: 1,
                query_len: 1,
                n_generated: 0,
                layers: 1,
            })
            .map(|r| r.score_pairs)
            .map_err(|e| e.to_string())
        };
        let star: Vec<i128> = (1..=64)
            .map(|n| pairs(n).map(i128::from))
            .collect::<Result<_, _>>()?;
        let global: Vec<i128> = (1..=64).map(|n| i128::from(causal_pairs(n * b))).collect();
        for w in 0..star.len() - 2 {
            let d2 = star[w + 2] - 2 * star[w + 1] + star[w];
            check(d2 == 0, || {
                format!("b={b}: star second difference {d2} at n={}", w + 1)
            })?;
            let g2 = global[w + 2] - 2 * global[w + 1] + global[w];
            check(g2 == i128::from(b * b), || {
                format!("b={b}: global second difference {g2}")
            })?;
        }
    }
    Ok("star second difference 0, global b^2, n=1..64".into())
}

fn ledger_closed_form() -> Outcome {
    let mut prng = Prng::new(0x1ED6E5);
    for trial in 0..20 {
        let heads = 1 + prng.next_below(4) as usize;
        let d = 2 * (1 + prng.next_below(4) as usize);
        let model = init_model(&ModelConfig {
            vocab: 256,
            d_model: heads * d,
            heads,
            layers: 1,
            ff_mult: 2,
            seed: trial,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let block = 2 + prng.next_below(6) as usize;
        let n = 1 + prng.next_below(6) as usize;
        let len = block * (n - 1) + 1 + prng.next_below(block as u64) as usize;
        let hosts = 1 + prng.next_below(n as u64) as usize;
        let lq = 1 + prng.next_below(5) as usize;
        let generated = prng.next_below(6) as usize;
        let context: Vec<TokenId> = (0..len).map(|_| prng.next_below(256) as TokenId).collect();
        let query: Vec<TokenId> = (0..lq).map(|_| prng.next_below(256) as TokenId).collect();
        let cfg = StarConfig {
            block_size: block,
            anchor: AnchorSpec::default(),
            hosts,
            allow_idle_hosts: false,
            seed: trial,
        };
        let mut session =
            DecodeSession::start(&model, &context, &cfg).map_err(|e| e.to_string())?;
        session
            .encode_query(&model, &query)
            .map_err(|e| e.to_string())?;
        decode(&mut session, &model, generated).map_err(|e| e.to_string())?;
        let want = ((hosts - 1) * (lq + generated) * (d + 1) * heads) as u64;
        let got = session.ledger.partial_scalars();
        check(got == want, || {
            format!("trial {trial}: ledger {got}, closed form {want}")
        })?;
        let p1 = session.ledger.phase_entries(Phase::Phase1).count();
        check(p1 == 0, || format!("trial {trial}: {p1} phase-1 entries"))?;
    }
    Ok("20 configs match exactly, 0 phase-1 entries".into())
}

fn five_block_pattern() -> Outcome {
    let plan = partition(20, 4).map_err(|e| e.to_string())?;
    let got = sparsity_pattern(&plan, &AnchorSpec::default());
    let want: Vec<Vec<bool>> = [
        "x.....", //
        "xx....", "x.x...", "x..x..", "x...x.", "xxxxxx",
    ]
    .iter()
    .map(|r| r.chars().map(|c| c == 'x').collect())
    .collect();
    check(got == want, || format!("pattern {got:?}"))?;
    Ok("6x6 block mask matches".into())
}

fn streaming_equivalence() -> Outcome {
    let mut prng = Prng::new(0x5743);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for l in 1..=16usize {
        for d in 1..=8usize {
            let q = prng_fill(&mut prng, l, d, 1.0);
            let k = prng_fill(&mut prng, l, d, 1.0);
            let v = prng_fill(&mut prng, l, d, 1.0);
            let dense = causal_attention(&q, &k, &v, 0).map_err(|e| e.to_string())?;
            for tile in 1..=l {
                let s =
                    streaming_causal_attention(&q, &k, &v, 0, tile).map_err(|e| e.to_string())?;
                worst = worst.max(s.max_abs_diff(&dense).unwrap() as f64);
                cases += 1;
            }
        }
    }
    check(worst <= 1e-5, || format!("max diff {worst:e}"))?;
    Ok(format!("{cases} (l, d, tile) cases, max diff {worst:.3e}"))
}

fn ablation_coverage() -> Outcome {
    let suite = AnchorSpec::ablation_suite();
    let content_seen = |want: fn(&AnchorContent) -> bool| suite.iter().any(|s| want(&s.content));
    let position_seen = |want: fn(&AnchorPosition) -> bool| suite.iter().any(|s| want(&s.position));
    let contents = [
        content_seen(|c| matches!(c, AnchorContent::FirstBlock)),
        content_seen(|c| matches!(c, AnchorContent::None)),
        content_seen(|c| matches!(c, AnchorContent::PreviousBlock)),
        content_seen(|c| matches!(c, AnchorContent::RandomTokens)),
        content_seen(|c| matches!(c, AnchorContent::ShuffledFirstBlock)),
        content_seen(|c| matches!(c, AnchorContent::ConstantToken(_))),
    ];
    let positions = [
        position_seen(|p| matches!(p, AnchorPosition::FirstBlock)),
        position_seen(|p| matches!(p, AnchorPosition::PreviousBlock)),
        position_seen(|p| matches!(p, AnchorPosition::RandomSampled)),
    ];
    check(contents.iter().chain(&positions).all(|&b| b), || {
        "a mode is missing from the suite".into()
    })?;
    for s in &suite {
        let parsed: AnchorSpec = s
            .to_string()
            .parse()
            .map_err(|e: starsim::Error| e.to_string())?;
        check(parsed == *s, || format!("{s} does not round-trip"))?;
    }

    let cfg = ExperimentConfig {
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            ..Default::default()
        },
        sequence_len: 32,
        block_size: Some(16),
        ..Default::default()
    };
    let first = cmd_ablate(&cfg, &suite).map_err(|e| e.to_string())?;
    let again = cmd_ablate(&cfg, &suite).map_err(|e| e.to_string())?;
    check(first == again, || {
        "ablation rows differ between runs".into()
    })?;
    let row = |spec: AnchorSpec| {
        first
            .iter()
            .find(|r| r.strategy == spec.to_string())
            .unwrap()
            .divergence
            .max_abs
    };
    let exact = row(AnchorSpec::new(
        AnchorContent::FirstBlock,
        AnchorPosition::FirstBlock,
    ));
    let none = row(AnchorSpec::none());
    check(exact <= 1e-5, || {
        format!("first/first diverges by {exact:e} at n=2")
    })?;
    check(none > exact, || {
        format!("no-anchor {none:e} not above first/first {exact:e}")
    })?;
    Ok(format!(
        "{} strategies deterministic; first/first {exact:.3e}, none {none:.3e}",
        suite.len()
    ))
}

fn bench_closed_forms() -> Outcome {
    let cfg = ExperimentConfig {
        model: ModelConfig {
            d_model: 2,
            heads: 1,
            ..Default::default()
        },
        sequence_len: 16,
        query: "abcd".into(),
        n_generate: 2,
        sweep: Some(vec![
            SweepPoint {
                sequence_len: 16,
                block_size: 4,
                hosts: 4,
            },
            SweepPoint {
                sequence_len: 8,
                block_size: 8,
                hosts: 1,
            },
        ]),
        ..Default::default()
    };
    let rows = cmd_bench(&cfg).map_err(|e| e.to_string())?;
    let r = &rows[0];
    // Block 0 alone (4 keys), then three blocks of 4 behind a 4-token anchor.
    let star = 10 + 3 * 36;
    let global = 16 * 17 / 2;
    // Each host's shard visits every other host once: 2 tensors of 4 rows x 2.
    let ring = 4 * 3 * 2 * 4 * 2;
    // Three non-query hosts, 6 query/generated tokens, d + 1 scalars each.
    let comm = 3 * 6 * 3;
    let got = (r.star_pairs, r.global_pairs, r.ring_comm, r.star_comm);
    check(got == (star, global, ring, comm), || format!("row {r:?}"))?;
    check(
        rows[1].star_pairs == rows[1].global_pairs
            && rows[1].star_comm == 0
            && rows[1].ring_comm == 0,
        || format!("single block row {:?}", rows[1]),
    )?;
    Ok(format!(
        "L=16 b=4: {star} vs {global} pairs, ring comm {ring}, star comm {comm}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("phase2-exactness", || {
            timed(Duration::from_secs(10), phase2_exactness)
        }),
        ("two-block-exact-regime", || {
            timed(Duration::from_secs(30), two_block_regime)
        }),
        ("phase1-linear-compute", linear_phase1),
        ("ledger-closed-form", ledger_closed_form),
        ("block-sparsity-pattern", five_block_pattern),
        ("streaming-equivalence", streaming_equivalence),
        ("ablation-coverage", ablation_coverage),
        ("bench-closed-forms", bench_closed_forms),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
