//! Comparison weightings: plain ERM, inverse group frequency and GroupDRO.
//!
//! All three train through [`crate::bilevel::train`] with a fixed rule for
//! combining per-group gradients; the representation matrix stays frozen
//! unless `baseline_trainable_z` is set.

use serde::{Deserialize, Serialize};

use crate::bilevel::{train, Fairness, TrainConfig, TrainedModel};
use crate::dataio::{Dataset, GroupAssignment};
use crate::embed::SemanticMatrix;
use crate::fairloss::GroupLossVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Plain,
    Reweight,
    GroupDro,
}

impl From<BaselineMode> for Fairness {
    fn from(m: BaselineMode) -> Self {
        match m {
            BaselineMode::Plain => Fairness::Plain,
            BaselineMode::Reweight => Fairness::Reweight,
            BaselineMode::GroupDro => Fairness::GroupDro,
        }
    }
}

/// Group weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineWeights {
    pub w: Vec<f64>,
    pub mode: BaselineMode,
}

/// `w_n` proportional to the inverse number of training interactions whose
/// item lies in group `n`.
pub fn reweight_weights(groups: &GroupAssignment, ds: &Dataset) -> Result<BaselineWeights> {
    let mut counts = vec![0usize; groups.num_groups];
    for &i in ds.train.iter().flatten() {
        counts[groups.group_of[i]] += 1;
    }
    if let Some(n) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(n));
    }
    Ok(BaselineWeights {
        w: normalized(counts.iter().map(|&c| 1.0 / c as f64).collect()),
        mode: BaselineMode::Reweight,
    })
}

pub fn groupdro_init(num_groups: usize) -> BaselineWeights {
    BaselineWeights {
        w: vec![1.0 / num_groups as f64; num_groups],
        mode: BaselineMode::GroupDro,
    }
}

/// Exponentiated-gradient ascent `w_n <- w_n exp(step * L_n)`, renormalized.
/// Absent groups keep their weight; present groups share the rest.
pub fn groupdro_update(w: &BaselineWeights, losses: &GroupLossVector, step: f64) -> BaselineWeights {
    let present = losses.present();
    if present.is_empty() {
        return w.clone();
    }
    let max = present
        .iter()
        .map(|&n| step * losses.losses[n].unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let mass: f64 = present.iter().map(|&n| w.w[n]).sum();
    let raw: Vec<f64> = present
        .iter()
        .map(|&n| w.w[n] * (step * losses.losses[n].unwrap_or(0.0) - max).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let mut out = w.w.clone();
    if total > 0.0 {
        for (&n, r) in present.iter().zip(&raw) {
            out[n] = mass * r / total;
        }
    }
    BaselineWeights { w: out, mode: w.mode }
}

pub fn train_baseline(
    ds: &Dataset,
    groups: &GroupAssignment,
    z0: &SemanticMatrix,
    cfg: &TrainConfig,
    mode: BaselineMode,
) -> Result<TrainedModel> {
    let cfg = TrainConfig {
        fairness: mode.into(),
        ..cfg.clone()
    };
    train(ds, groups, z0, &cfg)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.into_iter().map(|x| x / total).collect()
}
