//! Reconstruction of weighted firm-to-firm production networks from a
//! sector input-output table and a firm-size-by-sector distribution.
//!
//! Stages: [`ingest`] inputs, fit a logistic-gravity link model
//! ([`gravity`]), draw a Bernoulli backbone ([`sampler`]), close it into an
//! irreducible aperiodic support ([`closure`]), weight it by minimum energy
//! ([`weights`]), then summarize ([`netstats`]) or expand to factories
//! ([`factory`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod closure;
pub mod config;
pub mod factory;
pub mod graph;
pub mod gravity;
pub mod ingest;
pub mod netstats;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod validation;
pub mod weights;

pub use graph::SparseDigraph;
pub use gravity::{FitConfig, GravityParams};
pub use ingest::{FirmPopulation, IOTable};
pub use weights::WeightedNetwork;
