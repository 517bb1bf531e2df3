//! Projector, scoring function and the contrastive recommendation loss with
//! hand-derived gradients for both the projector and the representation rows.

mod flatgrad;
mod loss;
mod projector;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flatgrad::{FlatGrad, ParamSpace};
pub use loss::{group_heads, BatchEval, GradRequest, LossModel};
pub use projector::{Activations, ProjectorKind, ProjectorParams, ProjectorShape};

pub(crate) use flatgrad::dot;

use crate::embed::Pooling;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// `cos(e_u, e_i) / tau`
    #[default]
    Cosine,
    /// `e_u . e_i / tau`
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub tau: f64,
    pub scoring: Scoring,
    pub pooling: Pooling,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            scoring: Scoring::Cosine,
            pooling: Pooling::Mean,
        }
    }
}

impl ScoreConfig {
    pub fn similarity(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.scoring {
            Scoring::Cosine => cosine(a, b),
            Scoring::Dot => dot(a, b),
        }
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        self.similarity(a, b) / self.tau
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Temperature-scaled cosine score.
pub fn score(e_u: &[f64], e_i: &[f64], tau: f64) -> f64 {
    if e_u.iter().all(|v| *v == 0.0) || e_i.iter().all(|v| *v == 0.0) {
        log::warn!("cosine score of a zero vector taken as 0");
    }
    cosine(e_u, e_i) / tau
}

/// One mini-batch of (user, positive item) pairs with sampled negatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    pub negatives: Vec<Vec<usize>>,
    /// Group of each pair's positive item.
    pub group_of_pair: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, num_items: usize, num_users: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.negatives.len() != self.pairs.len() || self.group_of_pair.len() != self.pairs.len() {
            return Err(Error::Shape("batch vectors differ in length".into()));
        }
        for ((&(u, pos), negs), _) in self.pairs.iter().zip(&self.negatives).zip(&self.group_of_pair) {
            if u >= num_users || pos >= num_items {
                return Err(Error::Shape(format!("pair ({u}, {pos}) out of range")));
            }
            if negs.iter().any(|&n| n >= num_items || n == pos) {
                return Err(Error::Shape(format!(
                    "negatives of pair ({u}, {pos}) must be valid items other than the positive"
                )));
            }
        }
        Ok(())
    }

    /// A batch holding only the pairs selected by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Batch {
        let mut out = Batch::default();
        for p in 0..self.len() {
            if keep(p) {
                out.pairs.push(self.pairs[p]);
                out.negatives.push(self.negatives[p].clone());
                out.group_of_pair.push(self.group_of_pair[p]);
            }
        }
        out
    }

    pub fn group_counts(&self, num_groups: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_groups];
        for &g in &self.group_of_pair {
            counts[g] += 1;
        }
        counts
    }
}

/// Draws `count` negatives uniformly from every item except `positive`, or
/// additionally excluding a sorted `history` when given.
pub fn sample_negatives<R: Rng>(
    rng: &mut R,
    num_items: usize,
    positive: usize,
    count: usize,
    history: Option<&[usize]>,
) -> Vec<usize> {
    if num_items < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    let uniform = |rng: &mut R| {
        let j = rng.random_range(0..num_items - 1);
        if j >= positive {
            j + 1
        } else {
            j
        }
    };
    match history {
        Some(h) if h.len() < num_items => {
            let mut tries = 0;
            while out.len() < count {
                let j = uniform(rng);
                tries += 1;
                // Fall back to positive-only exclusion if the history covers nearly everything.
                if h.binary_search(&j).is_err() || tries > 64 * count.max(1) {
                    out.push(j);
                }
            }
        }
        _ => out.extend((0..count).map(|_| uniform(rng))),
    }
    out
}
