use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{poly_decay, InnerState, SparseAdamW};
use super::sampler::BatchSampler;
use super::{outer_hypergradient, Alternation, Batching, BilevelObjective, Fairness, GroupRule, GroupStep, RecObjective, TrainConfig};
use crate::baselines::reweight_weights;
use crate::dataio::{Dataset, GroupAssignment};
use crate::embed::{load_matrix, write_embeddings, SemanticMatrix};
use crate::evalmetrics::{cv, overall_metrics, rank_topk, utility_vector, MaskPolicy, Metric};
use crate::recmodel::{Batch, LossModel, ProjectorKind, ProjectorParams, ProjectorShape};
use crate::seeds::{self, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// θ and Z together (or θ alone when Z is frozen).
    Joint,
    /// First half of the separate schedule: θ only.
    Theta,
    /// Second half of the separate schedule: Z only.
    Z,
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    /// Per-group mean loss over the batches where the group was present.
    pub group_losses: Vec<Option<f64>>,
    pub val_recall: f64,
    /// CV of the group-restricted validation recall.
    pub val_cv: Option<f64>,
    /// Mean multiplier of each group gradient in the θ-direction.
    pub group_weights: Vec<f64>,
    pub dro_weights: Option<Vec<f64>>,
    /// Atoms the θ-direction would have increased, summed over batches.
    pub fw_violations: usize,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub theta: ProjectorParams,
    pub z: SemanticMatrix,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the returned checkpoint.
    pub best_index: usize,
    pub seed: u64,
}

impl TrainedModel {
    pub fn best_val_recall(&self) -> f64 {
        self.history[self.best_index].val_recall
    }
}

/// One SGD step `θ - lr d` along the rule's direction for `batch`.
pub fn inner_step(
    model: LossModel,
    theta: &ProjectorParams,
    z: &SemanticMatrix,
    batch: &Batch,
    num_groups: usize,
    lr: f64,
    rule: &GroupRule,
) -> Result<(ProjectorParams, GroupStep)> {
    let obj = RecObjective::new(model, z, batch, num_groups, rule.clone(), rule.clone());
    let (dir, step) = obj.theta_direction(theta)?;
    Ok((obj.displace(theta, &dir, -lr), step))
}

struct Run<'a> {
    ds: &'a Dataset,
    groups: &'a GroupAssignment,
    cfg: &'a TrainConfig,
    histories: Vec<Vec<usize>>,
    sampler: BatchSampler,
    batch_rng: rand_chacha::ChaCha8Rng,
    neg_rng: rand_chacha::ChaCha8Rng,
    fixed_weights: Option<Vec<f64>>,
    theta: ProjectorParams,
    z: SemanticMatrix,
    inner: InnerState,
    outer: SparseAdamW,
    dro: Vec<f64>,
    history: Vec<EpochRecord>,
}

#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    batches: usize,
    group_sum: Vec<f64>,
    group_batches: Vec<usize>,
    alpha_sum: Vec<f64>,
    violations: usize,
}

impl EpochStats {
    fn new(n: usize) -> Self {
        Self {
            group_sum: vec![0.0; n],
            group_batches: vec![0; n],
            alpha_sum: vec![0.0; n],
            ..Self::default()
        }
    }

    fn add(&mut self, step: &GroupStep) {
        let l = &step.losses;
        let total: usize = l.counts.iter().sum();
        let mean: f64 = l
            .losses
            .iter()
            .zip(&l.counts)
            .filter_map(|(x, &c)| x.map(|x| x * c as f64))
            .sum::<f64>()
            / total as f64;
        self.loss_sum += mean;
        self.batches += 1;
        for (g, x) in l.losses.iter().enumerate() {
            if let Some(x) = x {
                self.group_sum[g] += x;
                self.group_batches[g] += 1;
            }
        }
        for (a, s) in step.alpha.iter().zip(self.alpha_sum.iter_mut()) {
            *s += a;
        }
        if let Some(d) = &step.diagnostics {
            self.violations += d.violations;
        }
    }
}

impl Run<'_> {
    fn theta_rule(&self) -> GroupRule {
        match self.cfg.fairness {
            Fairness::Bifair => GroupRule::Balance(self.cfg.balance),
            Fairness::Plain => GroupRule::Proportional,
            Fairness::Reweight => GroupRule::Fixed(self.fixed_weights.clone().expect("reweight weights")),
            Fairness::GroupDro => GroupRule::GroupDro {
                weights: self.dro.clone(),
                step: self.cfg.groupdro_step,
            },
        }
    }

    fn z_rule(&self) -> GroupRule {
        match self.theta_rule() {
            GroupRule::GroupDro { weights, .. } => GroupRule::Fixed(weights),
            r => r,
        }
    }

    fn model(&self) -> LossModel<'_> {
        LossModel::new(self.cfg.score, &self.histories)
    }

    fn build_batches(&mut self) -> Vec<Batch> {
        let indices = self.sampler.epoch(&mut self.batch_rng);
        let hist = self.cfg.exclude_history_negatives.then_some(self.histories.as_slice());
        indices
            .iter()
            .map(|idx| {
                self.sampler
                    .build(idx, self.ds.num_items, self.cfg.num_negatives, hist, &mut self.neg_rng)
            })
            .collect()
    }

    fn theta_update(&mut self, batch: &Batch, lr: f64) -> Result<GroupStep> {
        let obj = RecObjective::new(
            self.model(),
            &self.z,
            batch,
            self.groups.num_groups,
            self.theta_rule(),
            self.z_rule(),
        );
        let (dir, step) = obj.theta_direction(&self.theta)?;
        drop(obj);
        self.inner.step(&mut self.theta.values, &dir.values, lr);
        if let Some(w) = &step.dro_weights {
            self.dro = w.clone();
        }
        Ok(step)
    }

    fn z_update(&mut self, batch: &Batch, lr: f64, xi: f64) -> Result<GroupStep> {
        let obj = RecObjective::new(
            self.model(),
            &self.z,
            batch,
            self.groups.num_groups,
            self.theta_rule(),
            self.z_rule(),
        );
        let hyper = outer_hypergradient(&obj, &self.theta, xi, self.cfg.fd_epsilon_scale)?;
        drop(obj);
        if !hyper.z_direction.is_finite() {
            return Err(Error::Divergence("non-finite hypergradient".into()));
        }
        self.outer.step(&mut self.z, &hyper.z_direction, lr);
        Ok(hyper.coeffs)
    }

    fn validate_epoch(&self) -> Result<(f64, Option<f64>)> {
        let ranking = rank_topk(&self.theta, &self.z, self.ds, &self.cfg.score, self.cfg.eval_k, MaskPolicy::Train)?;
        let recall = overall_metrics(&ranking, &self.ds.val).recall;
        let utils = utility_vector(&ranking, &self.ds.val, self.groups, Metric::Recall, false);
        Ok((recall, cv(&utils.defined()).ok()))
    }

    /// Trains until patience runs out; leaves the best checkpoint in place.
    fn run_phase(&mut self, phase: Phase, update_theta: bool, update_z: bool, xi: f64) -> Result<()> {
        let cfg = self.cfg;
        let n = self.groups.num_groups;
        let max_iter = cfg.max_epochs * self.sampler.batches_per_epoch();
        let mut iter = 0;
        let mut best: Option<(f64, ProjectorParams, SemanticMatrix, usize)> = None;
        let mut stale = 0;
        for epoch in 1..=cfg.max_epochs {
            let batches = self.build_batches();
            let mut stats = EpochStats::new(n);
            let per_batch = cfg.alternation == Alternation::Batch;
            for batch in &batches {
                let lr_in = poly_decay(cfg.inner_lr, iter, max_iter, cfg.lr_decay_power);
                let lr_out = poly_decay(cfg.outer_lr, iter, max_iter, cfg.lr_decay_power);
                if update_theta {
                    let step = self.theta_update(batch, lr_in)?;
                    stats.add(&step);
                }
                if update_z && per_batch {
                    let step = self.z_update(batch, lr_out, xi)?;
                    if !update_theta {
                        stats.add(&step);
                    }
                }
                iter += 1;
            }
            if update_z && !per_batch {
                let lr_out = poly_decay(cfg.outer_lr, iter, max_iter, cfg.lr_decay_power);
                for batch in &batches {
                    let step = self.z_update(batch, lr_out, xi)?;
                    if !update_theta {
                        stats.add(&step);
                    }
                }
            }
            let train_loss = stats.loss_sum / stats.batches.max(1) as f64;
            if !train_loss.is_finite() || !self.z.is_finite() || self.theta.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite state after epoch {epoch}")));
            }
            let (val_recall, val_cv) = self.validate_epoch()?;
            let improved = best.as_ref().is_none_or(|b| val_recall > b.0);
            let record = EpochRecord {
                phase,
                epoch,
                train_loss,
                group_losses: (0..n)
                    .map(|g| (stats.group_batches[g] > 0).then(|| stats.group_sum[g] / stats.group_batches[g] as f64))
                    .collect(),
                val_recall,
                val_cv,
                group_weights: stats.alpha_sum.iter().map(|a| a / stats.batches.max(1) as f64).collect(),
                dro_weights: (cfg.fairness == Fairness::GroupDro).then(|| self.dro.clone()),
                fw_violations: stats.violations,
                improved,
            };
            log::info!(
                "{phase:?} epoch {epoch}: loss {train_loss:.4} val recall {val_recall:.4} cv {}",
                val_cv.map_or("-".into(), |c| format!("{c:.4}"))
            );
            self.history.push(record);
            if improved {
                best = Some((val_recall, self.theta.clone(), self.z.clone(), self.history.len() - 1));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        let (_, theta, z, _) = best.expect("at least one epoch");
        self.theta = theta;
        self.z = z;
        Ok(())
    }
}

fn projector_shape(cfg: &TrainConfig, d_sem: usize) -> ProjectorShape {
    match cfg.projector {
        ProjectorKind::Linear => ProjectorShape::linear(d_sem, cfg.d_rec, cfg.bias),
        ProjectorKind::Mlp2 => ProjectorShape::mlp2(d_sem, cfg.hidden, cfg.d_rec, cfg.bias),
    }
}

/// Trains θ (and Z when the fairness mode allows it) and returns the
/// checkpoint with the best validation Recall@K together with the full
/// per-epoch history.
pub fn train(ds: &Dataset, groups: &GroupAssignment, z0: &SemanticMatrix, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    groups.validate()?;
    if groups.num_items() != ds.num_items || z0.num_items() != ds.num_items {
        return Err(Error::Shape(format!(
            "dataset has {} items, groups cover {}, representations have {} rows",
            ds.num_items,
            groups.num_items(),
            z0.num_items()
        )));
    }
    let shape = projector_shape(cfg, z0.dim());
    shape.validate()?;
    let theta = ProjectorParams::init(shape, &mut seeds::rng(cfg.seed, Role::Init))?;
    let histories: Vec<Vec<usize>> = ds
        .train
        .iter()
        .map(|h| {
            let mut h = h.clone();
            h.sort_unstable();
            h
        })
        .collect();
    let sampler = BatchSampler::new(
        ds.train_pairs(),
        &groups.group_of,
        groups.num_groups,
        cfg.batch_size,
        cfg.batching == Batching::Stratified,
    );
    if sampler.num_pairs() == 0 {
        return Err(Error::ZeroRecords);
    }
    let fixed_weights = match cfg.fairness {
        Fairness::Reweight => Some(reweight_weights(groups, ds)?.w),
        _ => None,
    };
    let n = groups.num_groups;
    let mut run = Run {
        ds,
        groups,
        cfg,
        histories,
        sampler,
        batch_rng: seeds::rng(cfg.seed, Role::Batches),
        neg_rng: seeds::rng(cfg.seed, Role::Negatives),
        fixed_weights,
        inner: InnerState::new(cfg.inner_optimizer, theta.len(), cfg.adam_betas, cfg.adam_eps),
        outer: SparseAdamW::new(z0.num_items(), z0.dim(), cfg.adam_betas, cfg.adam_eps, cfg.weight_decay),
        theta,
        z: z0.clone(),
        dro: vec![1.0 / n as f64; n],
        history: Vec::new(),
    };
    let z_trainable = cfg.z_trainable();
    if cfg.separate && z_trainable {
        run.run_phase(Phase::Theta, true, false, 0.0)?;
        // θ is frozen in the second phase, so there is no inner response to differentiate through.
        run.run_phase(Phase::Z, false, true, 0.0)?;
    } else {
        run.run_phase(Phase::Joint, true, z_trainable, cfg.xi())?;
    }
    let best_index = best_index(&run.history);
    Ok(TrainedModel {
        theta: run.theta,
        z: run.z,
        history: run.history,
        best_index,
        seed: cfg.seed,
    })
}

/// The best epoch of the last phase: the returned checkpoint.
fn best_index(history: &[EpochRecord]) -> usize {
    let last = history.last().expect("history is never empty").phase;
    let start = history.iter().position(|r| r.phase == last).unwrap_or(0);
    let mut best = start;
    for (i, r) in history.iter().enumerate().skip(start) {
        if r.val_recall > history[best].val_recall {
            best = i;
        }
    }
    best
}

/// Writes `model.json`, `theta.bin`, `z.bin` and `history.jsonl`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let dir = dir.as_ref();
    model.theta.save(dir, model.seed)?;
    write_embeddings(dir.join("z.bin"), &model.z)?;
    let mut lines = String::new();
    for r in &model.history {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    let path = dir.join("history.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let (theta, seed) = ProjectorParams::load(dir)?;
    let path = dir.join("history.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let history: Vec<EpochRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if history.is_empty() {
        return Err(Error::Parse(format!("{} has no records", path.display())));
    }
    let z = load_matrix(dir.join("z.bin"))?;
    if z.dim() != theta.shape.d_sem {
        return Err(Error::Shape("checkpoint Z and projector disagree on d_sem".into()));
    }
    Ok(TrainedModel {
        best_index: best_index(&history),
        theta,
        z,
        history,
        seed,
    })
}
