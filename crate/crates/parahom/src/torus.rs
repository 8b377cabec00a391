//! The unit space-time cell `Y = [0,1)^{d+1}` and periodic grid functions on it.
//!
//! Collocation grids are uniform and periodic-wrapping with the time axis
//! stored fastest: for d = 1 the flat index is `iy * n_time + is`, for d = 2
//! it is `((iy1 * n_space) + iy2) * n_time + is`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Collocation grid on the periodic cell `Y = [0,1)^{d+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    /// Spatial dimension (1 or 2 supported).
    pub d: usize,
    /// Modes per spatial dimension.
    pub n_space: usize,
    /// Modes along the cell-time direction.
    pub n_time: usize,
}

impl CellGrid {
    /// A space-time cell grid. `n_space` and `n_time` must be even and >= 8.
    pub fn new(d: usize, n_space: usize, n_time: usize) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::InvalidConfig(format!("unsupported dimension d = {d}")));
        }
        if n_space < 8 || n_space % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_space must be even and >= 8, got {n_space}"
            )));
        }
        let time_ok = n_time == 1 || (n_time >= 8 && n_time % 2 == 0);
        if !time_ok {
            return Err(Error::InvalidConfig(format!(
                "n_time must be 1 (time-independent path) or even and >= 8, got {n_time}"
            )));
        }
        Ok(CellGrid { d, n_space, n_time })
    }

    /// Grid for the time-independent (elliptic) reduction: a single time level.
    pub fn elliptic(d: usize, n_space: usize) -> Result<Self> {
        CellGrid::new(d, n_space, 1)
    }

    /// Axis lengths, spatial axes first, cell time last.
    pub fn axes(&self) -> Vec<usize> {
        let mut a = vec![self.n_space; self.d];
        a.push(self.n_time);
        a
    }

    /// Total collocation point count `n_space^d * n_time`.
    pub fn len(&self) -> usize {
        self.n_space.pow(self.d as u32) * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinates of the collocation point with flat index `idx`:
    /// the d spatial coordinates followed by cell time s.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let axes = self.axes();
        let mut rem = idx;
        let mut strides = vec![1usize; axes.len()];
        for a in (0..axes.len() - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1];
        }
        let mut coords = Vec::with_capacity(axes.len());
        for a in 0..axes.len() {
            let i = rem / strides[a];
            rem %= strides[a];
            coords.push(i as f64 / axes[a] as f64);
        }
        coords
    }

    /// Flat index from per-axis indices (spatial first, time last), wrapping.
    pub fn wrap_index(&self, per_axis: &[isize]) -> usize {
        let axes = self.axes();
        debug_assert_eq!(per_axis.len(), axes.len());
        let mut idx = 0usize;
        for (a, &i) in per_axis.iter().enumerate() {
            let n = axes[a] as isize;
            let w = i.rem_euclid(n) as usize;
            idx = idx * axes[a] + w;
        }
        idx
    }
}

/// A scalar 1-periodic grid function sampled on a [`CellGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct TorusField {
    pub grid: CellGrid,
    pub data: Vec<f64>,
}

impl TorusField {
    pub fn zeros(grid: CellGrid) -> Self {
        TorusField {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: CellGrid, f: F) -> Self {
        let data = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        TorusField { grid, data }
    }

    /// Cell average (the measure of Y is 1).
    pub fn mean(&self) -> f64 {
        crate::par::det_sum_slice(&self.data) / self.data.len() as f64
    }

    /// Discrete L2(Y) norm with the unit-cell measure.
    pub fn norm_l2y(&self) -> f64 {
        let ss = crate::par::det_sum(self.data.len(), |i| self.data[i] * self.data[i]);
        (ss / self.data.len() as f64).sqrt()
    }

    /// Subtract the mean so the field is exactly mean-zero.
    pub fn project_mean_zero(&mut self) {
        let m = self.mean();
        for v in &mut self.data {
            *v -= m;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Componentwise `a - b`.
pub fn field_sub(a: &TorusField, b: &TorusField) -> TorusField {
    assert_eq!(a.grid, b.grid);
    TorusField {
        grid: a.grid,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    }
}
