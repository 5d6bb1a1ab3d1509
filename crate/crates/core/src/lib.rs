//! Two-phase block-sparse attention ("star" attention) on a simulated host fleet.
//!
//! Phase 1 splits a long context into blocks, prefixes every block after the
//! first with an anchor block, encodes each block independently and keeps only
//! the non-anchor KV rows. Phase 2 broadcasts the query to every host, gathers
//! each host's locally normalized attention together with its log-sum-exp, and
//! merges them at a single query host into exact global attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors, stable softmax statistics, RoPE and a fixed PRNG.
//! - [`attention`]: exact causal attention, partial attention and the merge rule.
//! - [`blocking`]: block plans, anchor strategies and per-block KV encoding.
//! - [`model`]: a seeded byte-level decoder used to drive both phases end to end.
//! - [`sim`]: the host fleet, Phase 1 / Phase 2 execution and the comm ledger.
//! - [`metrics`]: exact oracles, ring/star cost models, divergence and mass profiles.
//! - [`cli`]: the batch front-end behind the `starsim` binary.

pub mod attention;
pub mod blocking;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor2D};
