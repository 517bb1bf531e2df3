use super::projector::{Activations, ProjectorParams};
use super::{dot, Batch, FlatGrad, ParamSpace, ScoreConfig, Scoring};
use crate::embed::{user_representation, SemanticMatrix};
use crate::{Error, Result};

/// Which gradients [`LossModel::evaluate`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub theta: bool,
    pub z: bool,
}

impl GradRequest {
    pub const NONE: Self = Self { theta: false, z: false };
    pub const THETA: Self = Self { theta: true, z: false };
    pub const Z: Self = Self { theta: false, z: true };
    pub const BOTH: Self = Self { theta: true, z: true };
}

/// Per-pair losses plus one gradient per requested head.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub pair_losses: Vec<f64>,
    /// Gradient w.r.t. projector parameters, one per head.
    pub theta: Vec<Vec<f64>>,
    /// Gradient w.r.t. the touched rows of Z (row-major), one per head.
    pub z: Vec<Vec<f64>>,
    /// Rows of Z the batch reads: positives, negatives and user histories.
    pub touched: Vec<usize>,
    pub theta_len: usize,
    pub z_dim: usize,
}

impl BatchEval {
    pub fn mean_loss(&self) -> f64 {
        self.pair_losses.iter().sum::<f64>() / self.pair_losses.len() as f64
    }

    pub fn theta_grad(&self, head: usize) -> FlatGrad {
        FlatGrad::new(ParamSpace::Theta(self.theta_len), self.theta[head].clone())
    }

    pub fn z_space(&self) -> ParamSpace {
        ParamSpace::ZRows {
            rows: self.touched.clone(),
            dim: self.z_dim,
        }
    }

    pub fn z_grad(&self, head: usize) -> FlatGrad {
        FlatGrad::new(self.z_space(), self.z[head].clone())
    }
}

/// Per-pair weights selecting the mean loss of each group: head `n` weights
/// pair `p` by `1/count_n` when its positive lies in group `n`.
pub fn group_heads(batch: &Batch, num_groups: usize) -> Vec<Vec<f64>> {
    let counts = batch.group_counts(num_groups);
    let mut heads = vec![vec![0.0; batch.len()]; num_groups];
    for (p, &g) in batch.group_of_pair.iter().enumerate() {
        heads[g][p] = 1.0 / counts[g] as f64;
    }
    heads
}

/// InfoNCE over a batch, with user vectors pooled from training histories.
#[derive(Debug, Clone, Copy)]
pub struct LossModel<'a> {
    pub cfg: ScoreConfig,
    /// Training history of every user, sorted.
    pub histories: &'a [Vec<usize>],
}

impl<'a> LossModel<'a> {
    pub fn new(cfg: ScoreConfig, histories: &'a [Vec<usize>]) -> Self {
        Self { cfg, histories }
    }

    /// Mean InfoNCE loss of the batch.
    pub fn infonce_loss(&self, theta: &ProjectorParams, z: &SemanticMatrix, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(theta, z, batch, &[], GradRequest::NONE)?.mean_loss())
    }

    /// Gradient of the mean loss w.r.t. every projector parameter.
    pub fn loss_grad_theta(&self, theta: &ProjectorParams, z: &SemanticMatrix, batch: &Batch) -> Result<FlatGrad> {
        let head = vec![1.0 / batch.len().max(1) as f64; batch.len()];
        Ok(self.evaluate(theta, z, batch, &[head], GradRequest::THETA)?.theta_grad(0))
    }

    /// Gradient of the mean loss w.r.t. the rows of Z the batch touches.
    pub fn loss_grad_z(&self, theta: &ProjectorParams, z: &SemanticMatrix, batch: &Batch) -> Result<FlatGrad> {
        let head = vec![1.0 / batch.len().max(1) as f64; batch.len()];
        Ok(self.evaluate(theta, z, batch, &[head], GradRequest::Z)?.z_grad(0))
    }

    /// Forward pass plus back-propagation of `sum_p heads[h][p] * loss_p` for
    /// every head `h`.
    pub fn evaluate(
        &self,
        theta: &ProjectorParams,
        z: &SemanticMatrix,
        batch: &Batch,
        heads: &[Vec<f64>],
        want: GradRequest,
    ) -> Result<BatchEval> {
        batch.validate(z.num_items(), self.histories.len())?;
        if theta.shape.d_sem != z.dim() {
            return Err(Error::Shape(format!(
                "projector expects d_sem={}, representations have {}",
                theta.shape.d_sem,
                z.dim()
            )));
        }
        if heads.iter().any(|h| h.len() != batch.len()) {
            return Err(Error::Shape("head weights must have one entry per pair".into()));
        }
        let d_sem = z.dim();
        let d_rec = theta.shape.d_rec;
        let num_items = z.num_items();
        let inv_tau = 1.0 / self.cfg.tau;

        // Items that get scored.
        let mut scored_slot = vec![usize::MAX; num_items];
        let mut scored: Vec<usize> = Vec::new();
        for (&(_, pos), negs) in batch.pairs.iter().zip(&batch.negatives) {
            for &i in std::iter::once(&pos).chain(negs) {
                if scored_slot[i] == usize::MAX {
                    scored_slot[i] = 0;
                    scored.push(i);
                }
            }
        }
        scored.sort_unstable();
        for (s, &i) in scored.iter().enumerate() {
            scored_slot[i] = s;
        }

        let mut users: Vec<usize> = batch.pairs.iter().map(|&(u, _)| u).collect();
        users.sort_unstable();
        users.dedup();

        let item_act: Vec<Activations> = scored.iter().map(|&i| theta.forward(z.row(i))).collect();
        let item_norm: Vec<f64> = item_act.iter().map(|a| dot(&a.out, &a.out).sqrt()).collect();
        let user_z: Vec<Vec<f64>> = users
            .iter()
            .map(|&u| user_representation(z, &self.histories[u], self.cfg.pooling))
            .collect::<Result<_>>()?;
        let user_act: Vec<Activations> = user_z.iter().map(|zu| theta.forward(zu)).collect();
        let user_norm: Vec<f64> = user_act.iter().map(|a| dot(&a.out, &a.out).sqrt()).collect();

        let backprop = !heads.is_empty() && (want.theta || want.z);
        let num_heads = if backprop { heads.len() } else { 0 };
        let mut d_item = vec![vec![0.0; scored.len() * d_rec]; num_heads];
        let mut d_user = vec![vec![0.0; users.len() * d_rec]; num_heads];

        let mut pair_losses = Vec::with_capacity(batch.len());
        let mut sims: Vec<f64> = Vec::new();
        let mut du = vec![0.0; d_rec];
        let mut active: Vec<(usize, f64)> = Vec::new();
        for (p, (&(u, pos), negs)) in batch.pairs.iter().zip(&batch.negatives).enumerate() {
            let us = users.binary_search(&u).expect("user collected above");
            let eu = &user_act[us].out;
            let nu = user_norm[us];
            let cands = || std::iter::once(pos).chain(negs.iter().copied());

            sims.clear();
            sims.extend(cands().map(|i| {
                let s = scored_slot[i];
                self.similarity(eu, nu, &item_act[s].out, item_norm[s])
            }));
            let max = sims.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * inv_tau));
            let sum_exp: f64 = sims.iter().map(|&s| (s * inv_tau - max).exp()).sum();
            let lse = max + sum_exp.ln();
            // Relative to the positive score, so a dominant positive does not
            // lose the loss to cancellation in `lse - s_0`.
            let rel_max = sims[1..].iter().fold(0.0f64, |m, &s| m.max((s - sims[0]) * inv_tau));
            let tail: f64 = sims[1..].iter().map(|&s| ((s - sims[0]) * inv_tau - rel_max).exp()).sum();
            pair_losses.push(if rel_max == 0.0 {
                tail.ln_1p()
            } else {
                rel_max + ((-rel_max).exp() + tail).ln()
            });

            if !backprop {
                continue;
            }
            active.clear();
            active.extend(
                heads
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| w[p] != 0.0)
                    .map(|(h, w)| (h, w[p])),
            );
            if active.is_empty() {
                continue;
            }
            du.iter_mut().for_each(|v| *v = 0.0);
            for (k, i) in cands().enumerate() {
                let prob = (sims[k] * inv_tau - lse).exp();
                let g = (prob - if k == 0 { 1.0 } else { 0.0 }) * inv_tau;
                if g == 0.0 {
                    continue;
                }
                let s = scored_slot[i];
                let ei = &item_act[s].out;
                let ni = item_norm[s];
                // d sim / d e_u accumulates over candidates; d sim / d e_i goes straight to the item.
                match self.cfg.scoring {
                    Scoring::Dot => {
                        for (d, x) in du.iter_mut().zip(ei) {
                            *d += g * x;
                        }
                        for &(h, w) in &active {
                            let row = &mut d_item[h][s * d_rec..(s + 1) * d_rec];
                            for (r, x) in row.iter_mut().zip(eu) {
                                *r += w * g * x;
                            }
                        }
                    }
                    Scoring::Cosine => {
                        if nu == 0.0 || ni == 0.0 {
                            continue;
                        }
                        let cos = sims[k];
                        let inv = 1.0 / (nu * ni);
                        let cu = cos / (nu * nu);
                        let ci = cos / (ni * ni);
                        for ((d, x), y) in du.iter_mut().zip(ei).zip(eu) {
                            *d += g * (x * inv - cu * y);
                        }
                        for &(h, w) in &active {
                            let row = &mut d_item[h][s * d_rec..(s + 1) * d_rec];
                            for ((r, x), y) in row.iter_mut().zip(eu).zip(ei) {
                                *r += w * g * (x * inv - ci * y);
                            }
                        }
                    }
                }
            }
            for &(h, w) in &active {
                let row = &mut d_user[h][us * d_rec..(us + 1) * d_rec];
                for (r, d) in row.iter_mut().zip(&du) {
                    *r += w * d;
                }
            }
        }

        // Rows of Z read by the batch.
        let mut touched_mark = vec![false; num_items];
        for &i in &scored {
            touched_mark[i] = true;
        }
        for &u in &users {
            for &i in &self.histories[u] {
                touched_mark[i] = true;
            }
        }
        let touched: Vec<usize> = (0..num_items).filter(|&i| touched_mark[i]).collect();
        let mut touched_slot = scored_slot;
        for (s, &i) in touched.iter().enumerate() {
            touched_slot[i] = s;
        }

        let mut theta_grads = Vec::new();
        let mut z_grads = Vec::new();
        let mut dz = vec![0.0; d_sem];
        for h in 0..num_heads {
            let mut gt = if want.theta { vec![0.0; theta.len()] } else { Vec::new() };
            let mut gz = if want.z { vec![0.0; touched.len() * d_sem] } else { Vec::new() };
            for (s, &i) in scored.iter().enumerate() {
                let de = &d_item[h][s * d_rec..(s + 1) * d_rec];
                if de.iter().all(|v| *v == 0.0) {
                    continue;
                }
                dz.iter_mut().for_each(|v| *v = 0.0);
                theta.backward(
                    z.row(i),
                    &item_act[s],
                    de,
                    want.theta.then_some(gt.as_mut_slice()),
                    want.z.then_some(dz.as_mut_slice()),
                );
                if want.z {
                    let t = touched_slot[i];
                    for (g, d) in gz[t * d_sem..(t + 1) * d_sem].iter_mut().zip(&dz) {
                        *g += d;
                    }
                }
            }
            for (us, &u) in users.iter().enumerate() {
                let de = &d_user[h][us * d_rec..(us + 1) * d_rec];
                if de.iter().all(|v| *v == 0.0) {
                    continue;
                }
                dz.iter_mut().for_each(|v| *v = 0.0);
                theta.backward(
                    &user_z[us],
                    &user_act[us],
                    de,
                    want.theta.then_some(gt.as_mut_slice()),
                    want.z.then_some(dz.as_mut_slice()),
                );
                if want.z {
                    let hist = &self.histories[u];
                    let f = self.cfg.pooling.factor(hist.len());
                    for &i in hist {
                        let t = touched_slot[i];
                        for (g, d) in gz[t * d_sem..(t + 1) * d_sem].iter_mut().zip(&dz) {
                            *g += f * d;
                        }
                    }
                }
            }
            if want.theta {
                theta_grads.push(gt);
            }
            if want.z {
                z_grads.push(gz);
            }
        }

        Ok(BatchEval {
            pair_losses,
            theta: theta_grads,
            z: z_grads,
            touched,
            theta_len: theta.len(),
            z_dim: d_sem,
        })
    }

    fn similarity(&self, a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
        match self.cfg.scoring {
            Scoring::Dot => dot(a, b),
            Scoring::Cosine => {
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}
