//! Core engine for Nash-equilibrium constrained bidding experiments.
//!
//! The crate models a population of budget-constrained bidding agents that
//! compete for impressions through a second-price auction, and provides the
//! optimization machinery to train a shared bidding policy that maximizes
//! social welfare while keeping every agent's unilateral improvement gap
//! below a tolerance:
//!
//! - [`market`] — the partially observed Markov game: auctions, budgets,
//!   impression streams, episode transitions.
//! - [`policy`] — linear-softmax policies with per-agent embeddings and
//!   closed-form log-probability gradients (no autodiff).
//! - [`rollout`] — episode sampling under shared, focal-deviation, and
//!   weighted-initial-distribution regimes.
//! - [`gradients`] — Monte-Carlo estimators for the cooperative and
//!   competitive gradient terms and their assembly into primal updates.
//! - [`bpg`] — the outer training loop alternating unified-solution
//!   training, dual updates, and primal updates.
//! - [`exploitability`] — best-response training, max exploitability, and
//!   compliance metrics.
//! - [`oracle`] — exact brute-force evaluation of tiny instances, used to
//!   validate every estimator against ground truth.
//! - [`baselines`] — ablation trainers (zeroed implicit term, fully
//!   cooperative, independent best-response iteration).

pub mod baselines;
pub mod bpg;
mod error;
pub mod exploitability;
pub mod gradients;
pub mod market;
pub mod oracle;
pub mod policy;
pub mod rollout;

pub use error::{Error, Result};
