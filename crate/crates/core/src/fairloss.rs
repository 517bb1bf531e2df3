//! Group-balanced descent directions.
//!
//! Per-group mean losses are collected into a loss vector whose softmax
//! entropy measures how evenly the groups are served. The gradients of the
//! present groups, together with the negated entropy gradient, form a set of
//! atoms; Frank–Wolfe finds the minimum-norm point of their convex hull, which
//! is a direction that does not increase any group loss to first order and
//! raises the entropy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embed::SemanticMatrix;
use crate::recmodel::{Batch, FlatGrad, GradRequest, LossModel, ProjectorParams};
use crate::{Error, Result};

/// Mean loss of every group in a batch; `None` for groups with no pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossVector {
    pub losses: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl GroupLossVector {
    pub fn from_pair_losses(pair_losses: &[f64], group_of_pair: &[usize], num_groups: usize) -> Result<Self> {
        if pair_losses.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut sums = vec![0.0; num_groups];
        let mut counts = vec![0usize; num_groups];
        for (&l, &g) in pair_losses.iter().zip(group_of_pair) {
            if g >= num_groups {
                return Err(Error::Shape(format!("pair group {g} of {num_groups}")));
            }
            sums[g] += l;
            counts[g] += 1;
        }
        let losses = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Ok(Self { losses, counts })
    }

    pub fn num_groups(&self) -> usize {
        self.losses.len()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.num_groups()).filter(|&n| self.losses[n].is_some()).collect()
    }

    pub fn present_losses(&self) -> Vec<f64> {
        self.losses.iter().flatten().copied().collect()
    }
}

pub fn group_loss_vector(
    model: &LossModel,
    theta: &ProjectorParams,
    z: &SemanticMatrix,
    batch: &Batch,
    num_groups: usize,
) -> Result<GroupLossVector> {
    let eval = model.evaluate(theta, z, batch, &[], GradRequest::NONE)?;
    GroupLossVector::from_pair_losses(&eval.pair_losses, &batch.group_of_pair, num_groups)
}

/// Softmax of `losses` and the entropy of that distribution.
pub fn softmax_entropy(losses: &[f64]) -> (Vec<f64>, f64) {
    if losses.is_empty() {
        return (Vec::new(), 0.0);
    }
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = losses.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let h = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
    (p, h)
}

/// `c_n = p_n (sum_j p_j ln p_j - ln p_n)`, so that the entropy gradient is
/// `sum_n c_n grad(l_n)`. The coefficients sum to zero.
pub fn entropy_coefficients(losses: &[f64]) -> Vec<f64> {
    let (p, h) = softmax_entropy(losses);
    // sum_j p_j ln p_j = -H
    p.iter()
        .map(|&q| if q > 0.0 { q * (-h - q.ln()) } else { 0.0 })
        .collect()
}

/// Gradient of the softmax entropy of the loss vector, by the chain rule
/// through the per-group gradients.
pub fn entropy_gradient(group_grads: &[FlatGrad], losses: &[f64]) -> Result<FlatGrad> {
    if group_grads.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} group gradients for {} losses",
            group_grads.len(),
            losses.len()
        )));
    }
    let first = group_grads.first().ok_or(Error::NoAtoms)?;
    if group_grads.iter().any(|g| g.space != first.space) {
        return Err(Error::Shape("group gradients live in different parameter spaces".into()));
    }
    let mut out = FlatGrad::zeros(first.space.clone());
    for (c, g) in entropy_coefficients(losses).iter().zip(group_grads) {
        out.axpy(*c, g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomRole {
    Group(usize),
    Entropy,
}

/// Gradient atoms with their Gram matrix (row-major, `M x M`).
#[derive(Debug, Clone)]
pub struct GradientAtomSet {
    pub atoms: Vec<FlatGrad>,
    pub gram: Vec<f64>,
    pub roles: Vec<AtomRole>,
}

impl GradientAtomSet {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn gram_at(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.len() + j]
    }

    pub fn entropy_index(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == AtomRole::Entropy)
    }
}

/// Atoms are the gradients of the present groups, plus the negated entropy
/// gradient when `include_entropy` is set and that gradient is nonzero (a zero
/// atom would collapse the minimum-norm point to zero).
pub fn build_atom_set(
    group_grads: &[(usize, FlatGrad)],
    entropy_grad: &FlatGrad,
    include_entropy: bool,
) -> Result<GradientAtomSet> {
    if group_grads.is_empty() {
        return Err(Error::NoAtoms);
    }
    let space = &group_grads[0].1.space;
    if group_grads.iter().any(|(_, g)| &g.space != space) || &entropy_grad.space != space {
        return Err(Error::Shape("atoms live in different parameter spaces".into()));
    }
    let mut atoms: Vec<FlatGrad> = group_grads.iter().map(|(_, g)| g.clone()).collect();
    let mut roles: Vec<AtomRole> = group_grads.iter().map(|(n, _)| AtomRole::Group(*n)).collect();
    if include_entropy && entropy_grad.values.iter().any(|v| *v != 0.0) {
        atoms.push(entropy_grad.scaled(-1.0));
        roles.push(AtomRole::Entropy);
    }
    let m = atoms.len();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = atoms[i].dot(&atoms[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    Ok(GradientAtomSet { atoms, gram, roles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FwVariant {
    /// Each vertex step is followed by an exact re-minimization over the
    /// active atoms (Wolfe's min-norm-point iteration).
    #[default]
    FullyCorrective,
    /// Vertex steps plus away steps that shift weight off the worst active atom.
    AwaySteps,
    /// Vertex steps only.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FwOptions {
    pub max_iter: usize,
    /// Stop once one step lowers the objective by less than this.
    pub min_decrease: f64,
    pub variant: FwVariant,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            min_decrease: 1e-12,
            variant: FwVariant::FullyCorrective,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    pub w: Vec<f64>,
}

impl SimplexWeights {
    pub fn uniform(m: usize) -> Self {
        Self {
            w: vec![1.0 / m as f64; m],
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.w.iter().all(|&x| x >= 0.0) && (self.w.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

#[derive(Debug, Clone)]
pub struct FwSolution {
    pub weights: SimplexWeights,
    /// `w^T B w` before the first step and after every step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn frank_wolfe(atoms: &GradientAtomSet, opts: &FwOptions) -> FwSolution {
    frank_wolfe_gram(&atoms.gram, atoms.len(), opts)
}

/// Minimizes `w^T B w` over the simplex, starting from uniform weights.
///
/// Each step takes the vertex minimizing `(B w)_v` (lowest index on ties)
/// and an exact line search. With [`FwVariant::AwaySteps`] the step may
/// instead move away from the active vertex maximizing `(B w)_v` when that
/// has the larger duality gap. [`FwVariant::FullyCorrective`] re-solves the
/// problem restricted to the active atoms after every vertex step.
pub fn frank_wolfe_gram(gram: &[f64], m: usize, opts: &FwOptions) -> FwSolution {
    assert_eq!(gram.len(), m * m, "gram matrix must be m x m");
    if m == 0 {
        return FwSolution {
            weights: SimplexWeights { w: Vec::new() },
            objective: Vec::new(),
            iterations: 0,
        };
    }
    if opts.variant == FwVariant::FullyCorrective {
        return fully_corrective(gram, m, opts);
    }
    let mat_vec = |v: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|i| gram[i * m..(i + 1) * m].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut w = vec![1.0 / m as f64; m];
    let mut bw = mat_vec(&w);
    let mut obj = dot(&w, &bw);
    let mut objective = vec![obj];
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        let s = argmin(&bw);
        let fw_gap = obj - bw[s];
        let away = match opts.variant {
            FwVariant::Vanilla | FwVariant::FullyCorrective => None,
            FwVariant::AwaySteps => {
                let v = (0..m)
                    .filter(|&i| w[i] > 0.0)
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if bw[b] >= bw[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("weights sum to one");
                let gap = bw[v] - obj;
                (gap > fw_gap && w[v] < 1.0).then_some(v)
            }
        };
        if fw_gap <= 0.0 && away.is_none() {
            break;
        }
        // Direction d, the largest feasible step, and d^T B w.
        let (d, max_step, slope) = match away {
            None => {
                let mut d: Vec<f64> = w.iter().map(|x| -x).collect();
                d[s] += 1.0;
                (d, 1.0, -fw_gap)
            }
            Some(v) => {
                let mut d = w.clone();
                d[v] -= 1.0;
                (d, w[v] / (1.0 - w[v]), obj - bw[v])
            }
        };
        let bd = mat_vec(&d);
        let curvature = dot(&d, &bd);
        let step = if curvature > 0.0 {
            (-slope / curvature).clamp(0.0, max_step)
        } else {
            0.0
        };
        if step == 0.0 {
            break;
        }
        let prev = w.clone();
        for (wi, di) in w.iter_mut().zip(&d) {
            *wi += step * di;
        }
        if let Some(v) = away {
            if step >= max_step {
                w[v] = 0.0;
            }
        }
        for wi in w.iter_mut() {
            if *wi < 0.0 {
                *wi = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|wi| *wi /= total);
        let bw_next = mat_vec(&w);
        let next = dot(&w, &bw_next);
        if next > obj {
            // Rounding can undo a step that should decrease the objective.
            w = prev;
            break;
        }
        bw = bw_next;
        let decrease = obj - next;
        obj = next;
        objective.push(obj);
        iterations += 1;
        if decrease < opts.min_decrease {
            break;
        }
    }
    FwSolution {
        weights: SimplexWeights { w },
        objective,
        iterations,
    }
}

fn fully_corrective(gram: &[f64], m: usize, opts: &FwOptions) -> FwSolution {
    let mat_vec = |v: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|i| gram[i * m..(i + 1) * m].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let scale = (0..m).map(|i| gram[i * m + i]).fold(0.0f64, f64::max).max(1e-300);
    let gap_tol = 1e-15 * scale;

    let mut w = vec![1.0 / m as f64; m];
    let mut active: Vec<usize> = (0..m).collect();
    let mut obj = dot(&w, &mat_vec(&w));
    let mut objective = vec![obj];
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        let candidate = match corral(gram, m, &w, active.clone()) {
            Some(c) => c,
            None => break,
        };
        let mut next_w = candidate.0;
        let mut next_active = candidate.1;
        let mut bw = mat_vec(&next_w);
        let mut next = dot(&next_w, &bw);
        if next > obj {
            // The restricted solve lost to rounding; keep the current point.
            next_w = w.clone();
            next_active = active.clone();
            bw = mat_vec(&next_w);
            next = obj;
        }
        let s = argmin(&bw);
        let gap = next - bw[s];
        let decrease = obj - next;
        let moved = next_w != w;
        w = next_w;
        active = next_active;
        if moved {
            obj = next;
            objective.push(obj);
            iterations += 1;
        }
        if gap <= gap_tol || active.contains(&s) || (moved && decrease < opts.min_decrease) {
            break;
        }
        active.push(s);
        active.sort_unstable();
    }
    FwSolution {
        weights: SimplexWeights { w },
        objective,
        iterations,
    }
}

/// Minimizes `w^T B w` over the simplex face spanned by `active`, starting
/// at `w`: jump to the affine minimizer of the face when it is feasible,
/// otherwise move toward it until a weight hits zero and drop that atom.
fn corral(gram: &[f64], m: usize, w: &[f64], mut active: Vec<usize>) -> Option<(Vec<f64>, Vec<usize>)> {
    let mut w = w.to_vec();
    for _ in 0..=m {
        let k = active.len();
        let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
        for (a, &i) in active.iter().enumerate() {
            for (b, &j) in active.iter().enumerate() {
                kkt[(a, b)] = gram[i * m + j];
            }
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(k + 1);
        rhs[k] = 1.0;
        // Duplicate or affinely dependent atoms make the system singular;
        // the pseudo-inverse solution is one affine minimizer.
        let eig = SymmetricEigen::new(kkt);
        let top = eig.eigenvalues.amax();
        let mut sol = DVector::<f64>::zeros(k + 1);
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() > 1e-12 * top {
                let v = eig.eigenvectors.column(j);
                sol += v * (v.dot(&rhs) / lambda);
            }
        }
        let y: Vec<f64> = (0..k).map(|a| sol[a]).collect();
        if !y.iter().all(|v| v.is_finite()) {
            return None;
        }
        if y.iter().all(|&v| v > 0.0) {
            let mut out = vec![0.0; m];
            for (a, &i) in active.iter().enumerate() {
                out[i] = y[a];
            }
            let total: f64 = out.iter().sum();
            out.iter_mut().for_each(|v| *v /= total);
            return Some((out, active));
        }
        let mut t = 1.0f64;
        for (a, &i) in active.iter().enumerate() {
            if y[a] <= 0.0 {
                let denom = w[i] - y[a];
                if denom > 0.0 {
                    t = t.min(w[i] / denom);
                }
            }
        }
        for (a, &i) in active.iter().enumerate() {
            w[i] += t * (y[a] - w[i]);
        }
        let before = active.len();
        active.retain(|&i| w[i] > 1e-15);
        for (i, wi) in w.iter_mut().enumerate() {
            if !active.contains(&i) {
                *wi = 0.0;
            }
        }
        if active.is_empty() {
            return None;
        }
        if active.len() == before {
            // Rounding kept every weight positive; drop the smallest.
            let (pos, _) = active
                .iter()
                .enumerate()
                .min_by(|a, b| w[*a.1].total_cmp(&w[*b.1]))
                .expect("nonempty");
            let i = active.remove(pos);
            w[i] = 0.0;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Some((w, active))
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How the Frank–Wolfe weights turn into an update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// `sum_m w_m atom_m` over every atom, entropy atom included.
    #[default]
    AllAtoms,
    /// Group atoms only, with their weights rescaled to sum to one.
    GroupsRenormalized,
}

pub fn fair_direction(atoms: &GradientAtomSet, w: &SimplexWeights, mode: DirectionMode) -> FlatGrad {
    let coeffs = atom_coefficients(atoms, w, mode);
    let mut d = FlatGrad::zeros(atoms.atoms[0].space.clone());
    for (c, a) in coeffs.iter().zip(&atoms.atoms) {
        if *c != 0.0 {
            d.axpy(*c, a);
        }
    }
    d
}

/// Per-atom multipliers of the direction.
///
/// In [`DirectionMode::GroupsRenormalized`], if every group weight is zero the
/// direction falls back to [`DirectionMode::AllAtoms`].
fn atom_coefficients(atoms: &GradientAtomSet, w: &SimplexWeights, mode: DirectionMode) -> Vec<f64> {
    assert_eq!(atoms.len(), w.w.len(), "one weight per atom");
    match mode {
        DirectionMode::AllAtoms => w.w.clone(),
        DirectionMode::GroupsRenormalized => {
            let group_mass: f64 = atoms
                .roles
                .iter()
                .zip(&w.w)
                .filter(|(r, _)| matches!(r, AtomRole::Group(_)))
                .map(|(_, x)| x)
                .sum();
            if group_mass <= 1e-12 {
                return w.w.clone();
            }
            atoms
                .roles
                .iter()
                .zip(&w.w)
                .map(|(r, x)| match r {
                    AtomRole::Group(_) => x / group_mass,
                    AtomRole::Entropy => 0.0,
                })
                .collect()
        }
    }
}

/// Diagnostics of one balancing solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairDiagnostics {
    pub group_losses: Vec<Option<f64>>,
    pub p: Vec<f64>,
    pub entropy: f64,
    pub w: Vec<f64>,
    pub direction_norm: f64,
    /// `d . atom_m` for every atom.
    pub direction_dots: Vec<f64>,
    /// Atoms with `d . atom_m < 0`, i.e. groups the step would hurt.
    pub violations: usize,
}

/// Result of [`balance`]: the direction and, equivalently, the multiplier of
/// every group gradient that produces it.
#[derive(Debug, Clone)]
pub struct FairStep {
    pub direction: FlatGrad,
    /// Indexed by group; zero for absent groups.
    pub group_coefficients: Vec<f64>,
    pub diagnostics: FairDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceOptions {
    pub include_entropy: bool,
    pub direction: DirectionMode,
    pub fw: FwOptions,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            include_entropy: true,
            direction: DirectionMode::AllAtoms,
            fw: FwOptions::default(),
        }
    }
}

/// Entropy gradient, atom set, Frank–Wolfe weights and fair direction for one
/// parameter space. `group_grads` must hold one gradient per present group of
/// `losses`, in group order.
pub fn balance(group_grads: &[(usize, FlatGrad)], losses: &GroupLossVector, opts: &BalanceOptions) -> Result<FairStep> {
    let present = losses.present();
    if present.is_empty() {
        return Err(Error::NoAtoms);
    }
    if present.len() != group_grads.len() || present.iter().zip(group_grads).any(|(n, (m, _))| n != m) {
        return Err(Error::Shape("group gradients do not match the present groups".into()));
    }
    let present_losses = losses.present_losses();
    let (p, entropy) = softmax_entropy(&present_losses);
    let c = entropy_coefficients(&present_losses);
    let grads: Vec<FlatGrad> = group_grads.iter().map(|(_, g)| g.clone()).collect();
    let entropy_grad = entropy_gradient(&grads, &present_losses)?;
    let atoms = build_atom_set(group_grads, &entropy_grad, opts.include_entropy)?;
    let solution = frank_wolfe(&atoms, &opts.fw);
    let coeffs = atom_coefficients(&atoms, &solution.weights, opts.direction);

    // Fold the entropy atom -sum_k c_k g_k back onto the group gradients.
    let mut group_coefficients = vec![0.0; losses.num_groups()];
    let entropy_weight = atoms.entropy_index().map_or(0.0, |e| coeffs[e]);
    for (k, (n, _)) in group_grads.iter().enumerate() {
        group_coefficients[*n] = coeffs[k] - entropy_weight * c[k];
    }
    let mut direction = FlatGrad::zeros(grads[0].space.clone());
    for (n, g) in group_grads {
        direction.axpy(group_coefficients[*n], g);
    }
    let direction_dots: Vec<f64> = atoms.atoms.iter().map(|a| direction.dot(a)).collect();
    let violations = direction_dots.iter().filter(|&&x| x < 0.0).count();
    Ok(FairStep {
        diagnostics: FairDiagnostics {
            group_losses: losses.losses.clone(),
            p,
            entropy,
            w: solution.weights.w,
            direction_norm: direction.norm(),
            direction_dots,
            violations,
        },
        direction,
        group_coefficients,
    })
}
