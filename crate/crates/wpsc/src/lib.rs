//! Wireless-powered spatial crowdsourcing market laboratory.
//!
//! A platform (carrying a wireless-charging mobile base station) buys sensed
//! data from spatially distributed workers in two phases:
//!
//! 1. **Task allocation** — the platform announces a total charging power
//!    budget, workers respond with transmission rates; the interaction is a
//!    Stackelberg game solved by golden-section search over the power budget
//!    with an iterative-best-response Nash solver underneath
//!    ([`stackelberg`]).
//! 2. **Deployment** — the base station must be placed using worker-reported
//!    locations. Workers can lie to pull the station toward themselves, so
//!    placement uses strategyproof mechanisms: coordinate-wise median (MED),
//!    median with an optimized constant point (MSC), and a learned monotonic
//!    max-min network (MDL), benchmarked against the unconstrained optimum
//!    (OPT) with incentive and approximation-bound audits ([`deploy`],
//!    [`mdl`]).
//!
//! The [`harness`] module ties both phases into a reproducible experiment
//! pipeline (trace ingestion, synthetic generators, metric reports) driven by
//! the `wpsc` CLI.

// Validation guards are written as `!(x > 0.0)` on purpose: the negated form
// rejects NaN, while the suggested `x <= 0.0` would accept it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deploy;
pub mod harness;
pub mod mdl;
pub mod model;
pub mod rng;
pub mod stackelberg;

pub use model::{
    AllocationOutcome, DeploymentInstance, ModelError, Point, Rect, SystemConfig, Worker,
};
