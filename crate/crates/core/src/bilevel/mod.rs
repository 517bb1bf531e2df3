//! Bi-level training: the projector is the inner variable, the
//! representation matrix the outer one.
//!
//! Every batch takes one inner step on θ along the group-weighted direction,
//! then one outer AdamW step on the touched rows of Z along an approximate
//! hypergradient: the Z-direction after a virtual inner step, corrected by a
//! finite-difference mixed second-order term.

mod optim;
mod sampler;
mod trainer;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

pub use optim::{poly_decay, Adam, InnerOptimizer, InnerState, SparseAdamW};
pub use sampler::BatchSampler;
pub use trainer::{inner_step, load_checkpoint, save_checkpoint, train, EpochRecord, Phase, TrainedModel};

use crate::baselines::{groupdro_update, BaselineMode, BaselineWeights};
use crate::embed::SemanticMatrix;
use crate::fairloss::{balance, BalanceOptions, FairDiagnostics, GroupLossVector};
use crate::recmodel::{group_heads, Batch, FlatGrad, GradRequest, LossModel, ProjectorKind, ProjectorParams, ScoreConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fairness {
    #[default]
    Bifair,
    Plain,
    Reweight,
    GroupDro,
}

/// Whether θ and Z alternate after every batch or after a whole epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Alternation {
    #[default]
    Batch,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    #[default]
    Stratified,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub fairness: Fairness,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Virtual step size; `None` uses `inner_lr`, 0 turns the second-order
    /// correction off.
    pub virtual_step: Option<f64>,
    pub fd_epsilon_scale: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub exclude_history_negatives: bool,
    pub score: ScoreConfig,
    pub projector: ProjectorKind,
    pub d_rec: usize,
    /// Hidden width of the two-layer projector.
    pub hidden: usize,
    pub bias: bool,
    pub balance: BalanceOptions,
    pub inner_optimizer: InnerOptimizer,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_decay_power: f64,
    pub alternation: Alternation,
    pub batching: Batching,
    /// Let the baselines update Z as well.
    pub baseline_trainable_z: bool,
    /// Two phases: θ with Z frozen, then Z with θ frozen.
    pub separate: bool,
    pub groupdro_step: f64,
    pub eval_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fairness: Fairness::Bifair,
            inner_lr: 0.05,
            outer_lr: 1e-3,
            virtual_step: None,
            fd_epsilon_scale: 0.01,
            max_epochs: 500,
            patience: 20,
            batch_size: 256,
            num_negatives: 256,
            exclude_history_negatives: false,
            score: ScoreConfig::default(),
            projector: ProjectorKind::Linear,
            d_rec: 32,
            hidden: 64,
            bias: true,
            balance: BalanceOptions::default(),
            inner_optimizer: InnerOptimizer::Sgd,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.1,
            lr_decay_power: 0.9,
            alternation: Alternation::Batch,
            batching: Batching::Stratified,
            baseline_trainable_z: false,
            separate: false,
            groupdro_step: 0.01,
            eval_k: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("fd_epsilon_scale", self.fd_epsilon_scale),
            ("tau", self.score.tau),
            ("groupdro_step", self.groupdro_step),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if let Some(xi) = self.virtual_step {
            if !(xi.is_finite() && xi >= 0.0) {
                return Err(Error::Config("virtual_step must be >= 0".into()));
            }
        }
        let counts = [
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("num_negatives", self.num_negatives),
            ("d_rec", self.d_rec),
            ("eval_k", self.eval_k),
            ("balance.fw.max_iter", self.balance.fw.max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.projector == ProjectorKind::Mlp2 && self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("adam_betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lr_decay_power.is_finite() && self.lr_decay_power >= 0.0) {
            return Err(Error::Config("lr_decay_power must be >= 0".into()));
        }
        Ok(())
    }

    pub fn xi(&self) -> f64 {
        self.virtual_step.unwrap_or(self.inner_lr)
    }

    /// Bifair always trains Z; baselines only when asked to.
    pub fn z_trainable(&self) -> bool {
        self.fairness == Fairness::Bifair || self.baseline_trainable_z
    }
}

/// How per-group gradients combine into one direction.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupRule {
    /// Frank–Wolfe balancing with the entropy atom.
    Balance(BalanceOptions),
    /// Each group weighted by its share of the batch: the mean-loss gradient.
    Proportional,
    /// Fixed group weights.
    Fixed(Vec<f64>),
    /// Weights updated from the batch losses before use.
    GroupDro { weights: Vec<f64>, step: f64 },
}

/// The group multipliers behind one direction.
#[derive(Debug, Clone)]
pub struct GroupStep {
    /// Multiplier of every group's mean-loss gradient; zero for absent groups.
    pub alpha: Vec<f64>,
    pub losses: GroupLossVector,
    pub diagnostics: Option<FairDiagnostics>,
    /// GroupDRO weights after this batch's update.
    pub dro_weights: Option<Vec<f64>>,
}

impl GroupRule {
    pub fn combine(&self, grads: &[(usize, FlatGrad)], losses: &GroupLossVector) -> Result<(FlatGrad, GroupStep)> {
        let n = losses.num_groups();
        let present = losses.present();
        let mut alpha = vec![0.0; n];
        let mut diagnostics = None;
        let mut dro_weights = None;
        match self {
            GroupRule::Balance(opts) => {
                let step = balance(grads, losses, opts)?;
                alpha = step.group_coefficients;
                diagnostics = Some(step.diagnostics);
            }
            GroupRule::Proportional => {
                let total: usize = losses.counts.iter().sum();
                for &g in &present {
                    alpha[g] = losses.counts[g] as f64 / total as f64;
                }
            }
            GroupRule::Fixed(w) => {
                for &g in &present {
                    alpha[g] = w[g];
                }
            }
            GroupRule::GroupDro { weights, step } => {
                let current = BaselineWeights {
                    w: weights.clone(),
                    mode: BaselineMode::GroupDro,
                };
                let next = groupdro_update(&current, losses, *step);
                for &g in &present {
                    alpha[g] = next.w[g];
                }
                dro_weights = Some(next.w);
            }
        }
        let space = grads.first().ok_or(Error::NoAtoms)?.1.space.clone();
        let mut direction = FlatGrad::zeros(space);
        for (g, grad) in grads {
            if alpha[*g] != 0.0 {
                direction.axpy(alpha[*g], grad);
            }
        }
        Ok((
            direction,
            GroupStep {
                alpha,
                losses: losses.clone(),
                diagnostics,
                dro_weights,
            },
        ))
    }
}

/// What the hypergradient needs from a two-level objective with the outer
/// variable held fixed inside the objective.
pub trait BilevelObjective {
    type Theta;
    type Coeffs;

    /// Inner direction at θ and the multipliers that produced it.
    fn theta_direction(&self, theta: &Self::Theta) -> Result<(FlatGrad, Self::Coeffs)>;

    /// Inner and outer directions at the same θ.
    fn joint_directions(&self, theta: &Self::Theta) -> Result<(FlatGrad, FlatGrad)>;

    /// Outer gradient of the loss weighted by fixed multipliers.
    fn weighted_z_gradient(&self, theta: &Self::Theta, coeffs: &Self::Coeffs) -> Result<FlatGrad>;

    /// `theta + scale * dir`
    fn displace(&self, theta: &Self::Theta, dir: &FlatGrad, scale: f64) -> Self::Theta;
}

/// Central difference `(g_Z(θ + εv) - g_Z(θ - εv)) / 2ε` of the outer
/// gradient, approximating the mixed second derivative applied to `v`.
pub fn fd_second_order<O: BilevelObjective>(
    obj: &O,
    theta: &O::Theta,
    coeffs: &O::Coeffs,
    v: &FlatGrad,
    eps: f64,
) -> Result<FlatGrad> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config("finite-difference epsilon must be > 0".into()));
    }
    let plus = obj.weighted_z_gradient(&obj.displace(theta, v, eps), coeffs)?;
    let mut out = obj.weighted_z_gradient(&obj.displace(theta, v, -eps), coeffs)?;
    for (o, p) in out.values.iter_mut().zip(&plus.values) {
        *o = (p - *o) / (2.0 * eps);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Hypergradient<C> {
    pub z_direction: FlatGrad,
    /// Inner direction at the point the hypergradient was taken.
    pub theta_direction: FlatGrad,
    pub coeffs: C,
    /// Finite-difference step used; zero when the correction was skipped.
    pub epsilon: f64,
}

/// `g'_Z - ξ D` where θ' = θ - ξ g_θ, `g'_Z` and `g'_θ` are the directions at
/// θ', and D is the finite-difference mixed term along `g'_θ` with
/// ε = `eps_scale / |g'_θ|`. With ξ = 0 this is the Z-direction at θ.
pub fn outer_hypergradient<O: BilevelObjective>(
    obj: &O,
    theta: &O::Theta,
    xi: f64,
    eps_scale: f64,
) -> Result<Hypergradient<O::Coeffs>> {
    let (g_theta, coeffs) = obj.theta_direction(theta)?;
    if xi == 0.0 {
        let (_, z_direction) = obj.joint_directions(theta)?;
        return Ok(Hypergradient {
            z_direction,
            theta_direction: g_theta,
            coeffs,
            epsilon: 0.0,
        });
    }
    let virtual_theta = obj.displace(theta, &g_theta, -xi);
    let (g2_theta, mut z_direction) = obj.joint_directions(&virtual_theta)?;
    let norm = g2_theta.norm();
    let epsilon = if norm > 0.0 { eps_scale / norm } else { eps_scale };
    let fd = fd_second_order(obj, theta, &coeffs, &g2_theta, epsilon)?;
    z_direction.axpy(-xi, &fd);
    Ok(Hypergradient {
        z_direction,
        theta_direction: g_theta,
        coeffs,
        epsilon,
    })
}

/// The recommendation loss of one batch at a fixed Z, with a rule per level.
pub struct RecObjective<'a> {
    pub model: LossModel<'a>,
    pub z: &'a SemanticMatrix,
    pub batch: &'a Batch,
    pub num_groups: usize,
    pub theta_rule: GroupRule,
    pub z_rule: GroupRule,
    theta_evals: Cell<usize>,
    z_evals: Cell<usize>,
}

impl<'a> RecObjective<'a> {
    pub fn new(
        model: LossModel<'a>,
        z: &'a SemanticMatrix,
        batch: &'a Batch,
        num_groups: usize,
        theta_rule: GroupRule,
        z_rule: GroupRule,
    ) -> Self {
        Self {
            model,
            z,
            batch,
            num_groups,
            theta_rule,
            z_rule,
            theta_evals: Cell::new(0),
            z_evals: Cell::new(0),
        }
    }

    /// Number of θ-gradient and Z-gradient evaluations so far.
    pub fn eval_counts(&self) -> (usize, usize) {
        (self.theta_evals.get(), self.z_evals.get())
    }

    pub fn reset_counts(&self) {
        self.theta_evals.set(0);
        self.z_evals.set(0);
    }

    /// Per-group losses and gradients of the present groups.
    fn group_gradients(
        &self,
        theta: &ProjectorParams,
        want: GradRequest,
    ) -> Result<(GroupLossVector, Vec<(usize, FlatGrad)>, Vec<(usize, FlatGrad)>)> {
        let counts = self.batch.group_counts(self.num_groups);
        let present: Vec<usize> = (0..self.num_groups).filter(|&g| counts[g] > 0).collect();
        let all = group_heads(self.batch, self.num_groups);
        let heads: Vec<Vec<f64>> = present.iter().map(|&g| all[g].clone()).collect();
        let eval = self.model.evaluate(theta, self.z, self.batch, &heads, want)?;
        if eval.pair_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Divergence("non-finite batch loss".into()));
        }
        let losses = GroupLossVector::from_pair_losses(&eval.pair_losses, &self.batch.group_of_pair, self.num_groups)?;
        if want.theta {
            self.theta_evals.set(self.theta_evals.get() + 1);
        }
        if want.z {
            self.z_evals.set(self.z_evals.get() + 1);
        }
        let theta_grads = if want.theta {
            present.iter().enumerate().map(|(h, &g)| (g, eval.theta_grad(h))).collect()
        } else {
            Vec::new()
        };
        let z_grads = if want.z {
            present.iter().enumerate().map(|(h, &g)| (g, eval.z_grad(h))).collect()
        } else {
            Vec::new()
        };
        Ok((losses, theta_grads, z_grads))
    }
}

impl BilevelObjective for RecObjective<'_> {
    type Theta = ProjectorParams;
    type Coeffs = GroupStep;

    fn theta_direction(&self, theta: &ProjectorParams) -> Result<(FlatGrad, GroupStep)> {
        let (losses, grads, _) = self.group_gradients(theta, GradRequest::THETA)?;
        self.theta_rule.combine(&grads, &losses)
    }

    fn joint_directions(&self, theta: &ProjectorParams) -> Result<(FlatGrad, FlatGrad)> {
        let (losses, tg, zg) = self.group_gradients(theta, GradRequest::BOTH)?;
        let (td, _) = self.theta_rule.combine(&tg, &losses)?;
        let (zd, _) = self.z_rule.combine(&zg, &losses)?;
        Ok((td, zd))
    }

    fn weighted_z_gradient(&self, theta: &ProjectorParams, coeffs: &GroupStep) -> Result<FlatGrad> {
        let counts = self.batch.group_counts(self.num_groups);
        let head: Vec<f64> = self
            .batch
            .group_of_pair
            .iter()
            .map(|&g| coeffs.alpha[g] / counts[g] as f64)
            .collect();
        let eval = self.model.evaluate(theta, self.z, self.batch, &[head], GradRequest::Z)?;
        self.z_evals.set(self.z_evals.get() + 1);
        Ok(eval.z_grad(0))
    }

    fn displace(&self, theta: &ProjectorParams, dir: &FlatGrad, scale: f64) -> ProjectorParams {
        let values = theta.values.iter().zip(&dir.values).map(|(t, d)| t + scale * d).collect();
        theta.with_values(values)
    }
}
