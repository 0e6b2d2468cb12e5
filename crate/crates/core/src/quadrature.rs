//! Midpoint tensor grids over a box.

use crate::densities::BoxDomain;

/// Cell-midpoint grid with `per_axis` cells along every dimension.
#[derive(Clone, Debug)]
pub struct Grid {
    lower: Vec<f64>,
    step: Vec<f64>,
    per_axis: usize,
}

impl Grid {
    pub fn new(domain: &BoxDomain, per_axis: usize) -> Self {
        assert!(per_axis > 0);
        let step = (0..domain.dim())
            .map(|j| domain.width(j) / per_axis as f64)
            .collect();
        Self {
            lower: domain.lower().to_vec(),
            step,
            per_axis,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn len(&self) -> usize {
        self.per_axis.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, j: usize) -> f64 {
        self.step[j]
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    /// Point with flat index `idx`; the first coordinate varies slowest.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut rest = idx;
        for j in (0..d).rev() {
            let k = rest % self.per_axis;
            rest /= self.per_axis;
            out[j] = self.lower[j] + (k as f64 + 0.5) * self.step[j];
        }
        out
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}
