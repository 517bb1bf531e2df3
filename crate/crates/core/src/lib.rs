//! Fairness-aware training for embedding-enhanced recommenders.
//!
//! Item representations come from a frozen encoder (loaded from disk or
//! synthesized), a small projector maps them into the recommendation space,
//! and both are trained jointly: the projector at the inner level and the
//! representation matrix at the outer level, with a group-balancing descent
//! direction found by Frank–Wolfe over per-group gradients.
//!
//! Module map:
//!
//! * [`dataio`] – interaction ingestion, preprocessing, item grouping.
//! * [`embed`] – the semantic representation matrix and user pooling.
//! * [`recmodel`] – projector, scoring, contrastive loss and its gradients.
//! * [`fairloss`] – group losses, softmax entropy, Frank–Wolfe weighting.
//! * [`bilevel`] – hypergradient, optimizers and the training loop.
//! * [`evalmetrics`] – all-ranking evaluation and group fairness metrics.
//! * [`baselines`] – plain, inverse-frequency and GroupDRO trainers.

pub mod baselines;
pub mod bilevel;
pub mod dataio;
pub mod embed;
mod error;
pub mod evalmetrics;
pub mod fairloss;
pub mod recmodel;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
