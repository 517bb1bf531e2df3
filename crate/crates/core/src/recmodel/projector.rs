use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{decode_blob, encode_blob};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    /// `e = z W (+ b)`
    #[default]
    Linear,
    /// `e = tanh(z W1 (+ b1)) W2 (+ b2)`
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorShape {
    pub kind: ProjectorKind,
    pub d_sem: usize,
    pub d_rec: usize,
    /// Hidden width; ignored by the linear projector.
    pub hidden: usize,
    pub bias: bool,
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    w1: Range<usize>,
    b1: Option<Range<usize>>,
    w2: Option<Range<usize>>,
    b2: Option<Range<usize>>,
}

impl ProjectorShape {
    pub fn linear(d_sem: usize, d_rec: usize, bias: bool) -> Self {
        Self {
            kind: ProjectorKind::Linear,
            d_sem,
            d_rec,
            hidden: 0,
            bias,
        }
    }

    pub fn mlp2(d_sem: usize, hidden: usize, d_rec: usize, bias: bool) -> Self {
        Self {
            kind: ProjectorKind::Mlp2,
            d_sem,
            d_rec,
            hidden,
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_sem == 0 || self.d_rec == 0 || (self.kind == ProjectorKind::Mlp2 && self.hidden == 0) {
            return Err(Error::Config("projector dimensions must be > 0".into()));
        }
        Ok(())
    }

    fn first_width(&self) -> usize {
        match self.kind {
            ProjectorKind::Linear => self.d_rec,
            ProjectorKind::Mlp2 => self.hidden,
        }
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(self.d_sem * self.first_width());
        let b1 = self.bias.then(|| take(self.first_width()));
        let (w2, b2) = match self.kind {
            ProjectorKind::Linear => (None, None),
            ProjectorKind::Mlp2 => {
                let w2 = take(self.hidden * self.d_rec);
                (Some(w2), self.bias.then(|| take(self.d_rec)))
            }
        };
        Layout { w1, b1, w2, b2 }
    }

    pub fn num_params(&self) -> usize {
        let l = self.layout();
        [Some(l.w1), l.b1, l.w2, l.b2]
            .into_iter()
            .flatten()
            .map(|r| r.len())
            .sum()
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    pub out: Vec<f64>,
    /// tanh outputs of the hidden layer (empty for the linear projector).
    pub hidden: Vec<f64>,
}

/// Trainable projector parameters stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub shape: ProjectorShape,
    pub values: Vec<f64>,
}

impl ProjectorParams {
    pub fn zeros(shape: ProjectorShape) -> Self {
        Self {
            values: vec![0.0; shape.num_params()],
            shape,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)` per layer, biases zero.
    pub fn init<R: Rng>(shape: ProjectorShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut p = Self::zeros(shape);
        let layout = shape.layout();
        let a1 = 1.0 / (shape.d_sem as f64).sqrt();
        for v in &mut p.values[layout.w1] {
            *v = rng.random_range(-a1..a1);
        }
        if let Some(w2) = layout.w2 {
            let a2 = 1.0 / (shape.hidden as f64).sqrt();
            for v in &mut p.values[w2] {
                *v = rng.random_range(-a2..a2);
            }
        }
        Ok(p)
    }

    pub fn from_values(shape: ProjectorShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "{} parameter values for a projector with {}",
                values.len(),
                shape.num_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projector parameters".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            shape: self.shape,
            values,
        }
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.shape.d_sem {
            return Err(Error::Shape(format!(
                "input of length {} for a projector expecting {}",
                z.len(),
                self.shape.d_sem
            )));
        }
        Ok(self.forward(z).out)
    }

    pub fn forward(&self, z: &[f64]) -> Activations {
        let s = &self.shape;
        let l = s.layout();
        let width = s.first_width();
        let mut first = affine(z, &self.values[l.w1], l.b1.map(|r| &self.values[r]), width);
        match s.kind {
            ProjectorKind::Linear => Activations {
                out: first,
                hidden: Vec::new(),
            },
            ProjectorKind::Mlp2 => {
                first.iter_mut().for_each(|v| *v = v.tanh());
                let w2 = &self.values[l.w2.expect("mlp layout")];
                let out = affine(&first, w2, l.b2.map(|r| &self.values[r]), s.d_rec);
                Activations { out, hidden: first }
            }
        }
    }

    /// Back-propagates `d_out` through one forward pass.
    ///
    /// Adds the parameter gradient into `grad` and the input gradient into
    /// `d_input`; either may be skipped.
    pub fn backward(
        &self,
        z: &[f64],
        act: &Activations,
        d_out: &[f64],
        grad: Option<&mut [f64]>,
        d_input: Option<&mut [f64]>,
    ) {
        let s = &self.shape;
        let l = s.layout();
        match s.kind {
            ProjectorKind::Linear => {
                let w = &self.values[l.w1.clone()];
                if let Some(g) = grad {
                    outer_add(z, d_out, &mut g[l.w1]);
                    if let Some(b) = l.b1 {
                        add(&mut g[b], d_out);
                    }
                }
                if let Some(dz) = d_input {
                    mat_vec_add(w, d_out, dz);
                }
            }
            ProjectorKind::Mlp2 => {
                let w2r = l.w2.expect("mlp layout");
                let h = &act.hidden;
                let mut d_pre = vec![0.0; s.hidden];
                mat_vec_add(&self.values[w2r.clone()], d_out, &mut d_pre);
                for (dp, hv) in d_pre.iter_mut().zip(h) {
                    *dp *= 1.0 - hv * hv;
                }
                if let Some(g) = grad {
                    outer_add(h, d_out, &mut g[w2r]);
                    if let Some(b2) = l.b2 {
                        add(&mut g[b2], d_out);
                    }
                    outer_add(z, &d_pre, &mut g[l.w1.clone()]);
                    if let Some(b1) = l.b1 {
                        add(&mut g[b1], &d_pre);
                    }
                }
                if let Some(dz) = d_input {
                    mat_vec_add(&self.values[l.w1], &d_pre, dz);
                }
            }
        }
    }

    /// Writes `model.json` and the parameter blob `theta.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ModelFile { shape: self.shape, seed };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join("theta.bin");
        fs::write(&path, encode_blob(self.len(), 1, &self.values)).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, u64)> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let meta: ModelFile =
            serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let path = dir.join("theta.bin");
        let blob = decode_blob(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let values = blob.into_raw_vec_and_offset().0;
        Ok((Self::from_values(meta.shape, values)?, meta.seed))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    shape: ProjectorShape,
    seed: u64,
}

/// `x W + b` for a row-major `W` with `width` columns.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, width: usize) -> Vec<f64> {
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; width],
    };
    for (xi, row) in x.iter().zip(w.chunks_exact(width)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

/// `g += x ⊗ y` for a row-major block of `x.len()` rows.
fn outer_add(x: &[f64], y: &[f64], g: &mut [f64]) {
    for (xi, row) in x.iter().zip(g.chunks_exact_mut(y.len())) {
        for (gij, yj) in row.iter_mut().zip(y) {
            *gij += xi * yj;
        }
    }
}

/// `out += W y` for a row-major `W` with `y.len()` columns.
fn mat_vec_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(y.len())) {
        *o += row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
