use serde::{Deserialize, Serialize};

use crate::embed::SemanticMatrix;
use crate::recmodel::{FlatGrad, ParamSpace};

/// `base * (1 - iter / max_iter)^power`, floored at zero.
pub fn poly_decay(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = (1.0 - iter as f64 / max_iter as f64).max(0.0);
    base * frac.powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    #[default]
    Sgd,
    Adam,
}

/// Optimizer for the projector parameters.
#[derive(Debug, Clone)]
pub enum InnerState {
    Sgd,
    Adam(Adam),
}

impl InnerState {
    pub fn new(kind: InnerOptimizer, len: usize, betas: [f64; 2], eps: f64) -> Self {
        match kind {
            InnerOptimizer::Sgd => InnerState::Sgd,
            InnerOptimizer::Adam => InnerState::Adam(Adam::new(len, betas, eps)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], dir: &[f64], lr: f64) {
        match self {
            InnerState::Sgd => {
                for (p, d) in params.iter_mut().zip(dir) {
                    *p -= lr * d;
                }
            }
            InnerState::Adam(a) => a.step(params, dir, lr),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    betas: [f64; 2],
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, betas: [f64; 2], eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            betas,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let [b1, b2] = self.betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// AdamW over the rows of Z, updating only rows present in the direction.
/// Moments, bias correction and weight decay are all per row, so rows a
/// batch does not read are left exactly as they are.
#[derive(Debug, Clone)]
pub struct SparseAdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<i32>,
    dim: usize,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
}

impl SparseAdamW {
    pub fn new(rows: usize, dim: usize, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; rows * dim],
            v: vec![0.0; rows * dim],
            steps: vec![0; rows],
            dim,
            betas,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, z: &mut SemanticMatrix, dir: &FlatGrad, lr: f64) {
        let ParamSpace::ZRows { rows, dim } = &dir.space else {
            panic!("AdamW on Z needs a Z-space direction");
        };
        assert_eq!(*dim, self.dim);
        let [b1, b2] = self.betas;
        for (k, &i) in rows.iter().enumerate() {
            let g = &dir.values[k * dim..(k + 1) * dim];
            self.steps[i] += 1;
            let t = self.steps[i];
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let m = &mut self.m[i * dim..(i + 1) * dim];
            let v = &mut self.v[i * dim..(i + 1) * dim];
            let row = z.row_mut(i);
            for j in 0..*dim {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                row[j] *= 1.0 - lr * self.weight_decay;
                row[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}
