/// The parameter space a flat gradient addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSpace {
    /// Every projector parameter, in flat layout order.
    Theta(usize),
    /// The listed rows of the representation matrix (sorted, row-major).
    ZRows { rows: Vec<usize>, dim: usize },
}

impl ParamSpace {
    pub fn len(&self) -> usize {
        match self {
            ParamSpace::Theta(n) => *n,
            ParamSpace::ZRows { rows, dim } => rows.len() * dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A gradient (or direction) flattened into one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad {
    pub space: ParamSpace,
    pub values: Vec<f64>,
}

impl FlatGrad {
    pub fn new(space: ParamSpace, values: Vec<f64>) -> Self {
        assert_eq!(space.len(), values.len(), "flat gradient length mismatch");
        Self { space, values }
    }

    pub fn zeros(space: ParamSpace) -> Self {
        let values = vec![0.0; space.len()];
        Self { space, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FlatGrad) -> f64 {
        debug_assert_eq!(self.space, other.space);
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &FlatGrad) {
        debug_assert_eq!(self.space, other.space);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> FlatGrad {
        FlatGrad {
            space: self.space.clone(),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    /// The gradient row of `item` in Z-space; `None` for untouched rows.
    pub fn z_row(&self, item: usize) -> Option<&[f64]> {
        match &self.space {
            ParamSpace::ZRows { rows, dim } => rows
                .binary_search(&item)
                .ok()
                .map(|k| &self.values[k * dim..(k + 1) * dim]),
            ParamSpace::Theta(_) => None,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
