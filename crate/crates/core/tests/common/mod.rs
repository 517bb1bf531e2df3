#![allow(dead_code)]
//! Independent oracles shared by the integration tests and the acceptance suite.

use std::cell::Cell;

use bifair::bilevel::BilevelObjective;
use bifair::embed::SemanticMatrix;
use bifair::recmodel::{Batch, FlatGrad, LossModel, ParamSpace, ProjectorParams, ProjectorShape, ScoreConfig};
use bifair::Result;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// A small random model: histories, representations, projector and one batch.
pub struct Instance {
    pub histories: Vec<Vec<usize>>,
    pub z: SemanticMatrix,
    pub theta: ProjectorParams,
    pub batch: Batch,
    pub num_groups: usize,
}

impl Instance {
    pub fn model(&self) -> LossModel<'_> {
        LossModel::new(ScoreConfig::default(), &self.histories)
    }
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle free of distribution crates.
    let u1: f64 = r.random_range(1e-12..1.0);
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `num_groups` groups, every one of them present in the batch.
pub fn random_instance(r: &mut ChaCha8Rng, mlp: bool, bias: bool, num_groups: usize) -> Instance {
    let num_users = r.random_range(1..=5);
    let num_items = r.random_range(2..=8);
    // With d_sem = 1 (no bias) or d_rec = 1 every projection is collinear and
    // the cosine loss has an identically zero gradient; likewise hidden = 1.
    let d_sem = r.random_range(2..=6);
    let d_rec = r.random_range(2..=4);
    let histories: Vec<Vec<usize>> = (0..num_users)
        .map(|_| {
            let mut items: Vec<usize> = (0..num_items).collect();
            items.shuffle(r);
            let n = r.random_range(1..=num_items);
            let mut h = items[..n].to_vec();
            h.sort_unstable();
            h
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..num_items)
        .map(|_| (0..d_sem).map(|_| normal(r)).collect())
        .collect();
    let z = SemanticMatrix::from_rows(rows, false).unwrap();
    let shape = if mlp {
        ProjectorShape::mlp2(d_sem, r.random_range(2..=5), d_rec, bias)
    } else {
        ProjectorShape::linear(d_sem, d_rec, bias)
    };
    let mut theta = ProjectorParams::init(shape, r).unwrap();
    for v in theta.values.iter_mut() {
        *v += 0.3 * normal(r);
    }
    let len = r.random_range(num_groups.max(1)..=num_groups.max(1) + 4);
    let mut batch = Batch::default();
    for p in 0..len {
        let u = r.random_range(0..num_users);
        let pos = r.random_range(0..num_items);
        let negs = (0..r.random_range(1..=4))
            .map(|_| {
                let j = r.random_range(0..num_items - 1);
                if j >= pos {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        batch.pairs.push((u, pos));
        batch.negatives.push(negs);
        batch.group_of_pair.push(if p < num_groups { p } else { r.random_range(0..num_groups) });
    }
    Instance {
        histories,
        z,
        theta,
        batch,
        num_groups,
    }
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = x[j];
            x[j] = orig + h;
            let plus = f(&x);
            x[j] = orig - h;
            let minus = f(&x);
            x[j] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Expands a sparse Z-row gradient into a dense `items x dim` vector.
pub fn dense_z(grad: &FlatGrad, num_items: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_items * dim];
    for i in 0..num_items {
        if let Some(row) = grad.z_row(i) {
            out[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
    }
    out
}

pub fn z_with_values(z: &SemanticMatrix, values: &[f64]) -> SemanticMatrix {
    let d = z.dim();
    let rows = values.chunks(d).map(<[f64]>::to_vec).collect();
    SemanticMatrix::from_rows(rows, false).unwrap()
}

// ---- simplex oracle ----

pub fn quad(gram: &[f64], m: usize, w: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            s += w[i] * gram[i * m + j] * w[j];
        }
    }
    s
}

pub fn gram_of(atoms: &[Vec<f64>]) -> Vec<f64> {
    let m = atoms.len();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            g[i * m + j] = atoms[i].iter().zip(&atoms[j]).map(|(a, b)| a * b).sum();
        }
    }
    g
}

/// Minimum of `w^T B w` over a simplex grid with spacing `1/steps` (M <= 3).
pub fn grid_min(gram: &[f64], m: usize, steps: usize) -> f64 {
    let s = steps as f64;
    match m {
        1 => gram[0],
        2 => (0..=steps)
            .map(|a| {
                let a = a as f64 / s;
                quad(gram, 2, &[a, 1.0 - a])
            })
            .fold(f64::INFINITY, f64::min),
        3 => {
            let mut best = f64::INFINITY;
            for a in 0..=steps {
                for b in 0..=steps - a {
                    let (x, y) = (a as f64 / s, b as f64 / s);
                    best = best.min(quad(gram, 3, &[x, y, 1.0 - x - y]));
                }
            }
            best
        }
        _ => panic!("grid oracle only for M <= 3"),
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k as f64 + 1.0);
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Projected gradient descent with step `1/L`, `L` the top eigenvalue of 2B.
pub fn projected_gradient_min(gram: &[f64], m: usize, iters: usize) -> f64 {
    let b = DMatrix::from_row_slice(m, m, gram);
    let top = SymmetricEigen::new(b.clone()).eigenvalues.max();
    if top <= 0.0 {
        return 0.0;
    }
    let step = 1.0 / (2.0 * top);
    let mut w = vec![1.0 / m as f64; m];
    let mut best = quad(gram, m, &w);
    for _ in 0..iters {
        let grad: Vec<f64> = (0..m)
            .map(|i| 2.0 * (0..m).map(|j| gram[i * m + j] * w[j]).sum::<f64>())
            .collect();
        let next: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
        w = project_simplex(&next);
        best = best.min(quad(gram, m, &w));
    }
    best
}

/// Random atoms: `m` vectors of length `dim`, occasionally with duplicates or
/// a zero atom so degenerate Gram matrices show up.
pub fn random_atoms(seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let m = r.random_range(1..=6);
    let dim = r.random_range(1..=16);
    let mut atoms: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    match seed % 10 {
        0 if m > 1 => atoms[m - 1] = atoms[0].clone(),
        1 => atoms[0] = vec![0.0; dim],
        _ => {}
    }
    atoms
}

pub fn oracle_min(gram: &[f64], m: usize) -> f64 {
    if m <= 3 {
        grid_min(gram, m, 1000)
    } else {
        projected_gradient_min(gram, m, 20_000)
    }
}

pub fn direction(atoms: &[Vec<f64>], sol: &bifair::fairloss::FwSolution) -> Vec<f64> {
    let mut d = vec![0.0; atoms[0].len()];
    for (a, w) in atoms.iter().zip(&sol.weights.w) {
        for (x, y) in d.iter_mut().zip(a) {
            *x += w * y;
        }
    }
    d
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- metric oracle ----

/// Full stable sort by descending score, ties by ascending index.
pub fn brute_topk(scores: &[f64], k: usize, masked: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !masked.contains(i)).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn brute_recall(list: &[usize], rel: &[usize]) -> f64 {
    if rel.is_empty() {
        return 0.0;
    }
    list.iter().filter(|i| rel.contains(i)).count() as f64 / rel.len() as f64
}

pub fn brute_ndcg(list: &[usize], rel: &[usize], k: usize) -> f64 {
    if rel.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (r, i) in list.iter().take(k).enumerate() {
        if rel.contains(i) {
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 0..k.min(rel.len()) {
        idcg += 1.0 / ((r + 2) as f64).log2();
    }
    dcg / idcg
}

pub fn brute_hr(list: &[usize], rel: &[usize]) -> f64 {
    if list.iter().any(|i| rel.contains(i)) {
        1.0
    } else {
        0.0
    }
}

// ---- scalar bilevel toy ----

/// `L(θ, z) = a θ z + b θ³ z` on scalars, the same loss at both levels.
pub struct CubicToy {
    pub a: f64,
    pub b: f64,
    pub z: f64,
    pub theta_evals: Cell<usize>,
    pub z_evals: Cell<usize>,
}

impl CubicToy {
    pub fn new(a: f64, b: f64, z: f64) -> Self {
        Self {
            a,
            b,
            z,
            theta_evals: Cell::new(0),
            z_evals: Cell::new(0),
        }
    }

    pub fn d_theta(&self, t: f64) -> f64 {
        (self.a + 3.0 * self.b * t * t) * self.z
    }

    pub fn d_z(&self, t: f64) -> f64 {
        self.a * t + self.b * t * t * t
    }

    /// d/dz of L(θ - ξ ∂θL(θ, z), z), by the chain rule.
    pub fn unrolled_exact(&self, t: f64, xi: f64) -> f64 {
        let t1 = t - xi * self.d_theta(t);
        let d_t1_dz = -xi * (self.a + 3.0 * self.b * t * t);
        self.d_z(t1) + self.d_theta(t1) * d_t1_dz
    }
}

fn scalar(space: ParamSpace, v: f64) -> FlatGrad {
    FlatGrad::new(space, vec![v])
}

fn z_space() -> ParamSpace {
    ParamSpace::ZRows { rows: vec![0], dim: 1 }
}

impl BilevelObjective for CubicToy {
    type Theta = f64;
    type Coeffs = ();

    fn theta_direction(&self, theta: &f64) -> Result<(FlatGrad, ())> {
        self.theta_evals.set(self.theta_evals.get() + 1);
        Ok((scalar(ParamSpace::Theta(1), self.d_theta(*theta)), ()))
    }

    fn joint_directions(&self, theta: &f64) -> Result<(FlatGrad, FlatGrad)> {
        self.theta_evals.set(self.theta_evals.get() + 1);
        self.z_evals.set(self.z_evals.get() + 1);
        Ok((
            scalar(ParamSpace::Theta(1), self.d_theta(*theta)),
            scalar(z_space(), self.d_z(*theta)),
        ))
    }

    fn weighted_z_gradient(&self, theta: &f64, _: &()) -> Result<FlatGrad> {
        self.z_evals.set(self.z_evals.get() + 1);
        Ok(scalar(z_space(), self.d_z(*theta)))
    }

    fn displace(&self, theta: &f64, dir: &FlatGrad, scale: f64) -> f64 {
        theta + scale * dir.values[0]
    }
}
