//! Space-time periodic coefficient tensors `a_ij^{ab}(y, s)` on the unit cell.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::torus::{CellGrid, TorusField};

/// Entry evaluator signature: `(i, j, alpha, beta, y, s) -> value` with
/// `y in [0,1)^d`, `s in [0,1)`.
pub type CoeffFn = Arc<dyn Fn(usize, usize, usize, usize, &[f64], f64) -> f64 + Send + Sync>;

enum Evaluator {
    Closure(CoeffFn),
    /// Gridded samples looked up at the nearest collocation node, no
    /// smoothing. Index order `(i, j, alpha, beta, node)`.
    Gridded { grid: CellGrid, values: Vec<f64> },
}

/// The 1-periodic tensor `a_ij^{ab}(y, s)` with ellipticity constant `mu`.
pub struct CoefficientField {
    pub d: usize,
    pub m: usize,
    pub mu: f64,
    evaluator: Evaluator,
}

fn wrap01(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w == 1.0 {
        0.0
    } else {
        w
    }
}

impl CoefficientField {
    pub fn from_closure(d: usize, m: usize, mu: f64, f: CoeffFn) -> Self {
        CoefficientField {
            d,
            m,
            mu,
            evaluator: Evaluator::Closure(f),
        }
    }

    /// Gridded samples in `(i, j, alpha, beta, node)` order; node index is
    /// row-major over the spatial axes with cell time fastest.
    pub fn from_grid(d: usize, m: usize, mu: f64, grid: CellGrid, values: Vec<f64>) -> Result<Self> {
        let expect = d * d * m * m * grid.len();
        if values.len() != expect {
            return Err(Error::InvalidConfig(format!(
                "gridded coefficient has {} values, expected {}",
                values.len(),
                expect
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "gridded coefficient contains non-finite entries".into(),
            ));
        }
        Ok(CoefficientField {
            d,
            m,
            mu,
            evaluator: Evaluator::Gridded { grid, values },
        })
    }

    /// Constant isotropic tensor `value * delta_ij * delta_ab`.
    pub fn constant(d: usize, m: usize, value: f64) -> Self {
        let mu = value.min(1.0 / value);
        CoefficientField::from_closure(
            d,
            m,
            mu,
            Arc::new(move |i, j, a, b, _y, _s| {
                if i == j && a == b {
                    value
                } else {
                    0.0
                }
            }),
        )
    }

    /// Constant tensor from a full `(i, j, alpha, beta)` table.
    pub fn constant_matrix(d: usize, m: usize, mu: f64, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != d * d * m * m {
            return Err(Error::InvalidConfig(format!(
                "constant matrix has {} entries, expected {}",
                entries.len(),
                d * d * m * m
            )));
        }
        let table = entries;
        Ok(CoefficientField::from_closure(
            d,
            m,
            mu,
            Arc::new(move |i, j, a, b, _y, _s| table[((i * d + j) * m + a) * m + b]),
        ))
    }

    /// 1D time-independent laminate `a(y) = (1 + amp sin 2 pi y)^{-1}`.
    /// Its homogenized coefficient is the harmonic mean, identically 1.
    pub fn laminate_1d(amplitude: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::InvalidConfig(format!(
                "laminate amplitude must be in [0,1), got {amplitude}"
            )));
        }
        let lo = 1.0 / (1.0 + amplitude);
        let hi = 1.0 / (1.0 - amplitude);
        let mu = lo.min(1.0 / hi);
        Ok(CoefficientField::from_closure(
            1,
            1,
            mu,
            Arc::new(move |_i, _j, _a, _b, y, _s| 1.0 / (1.0 + amplitude * (2.0 * PI * y[0]).sin())),
        ))
    }

    /// Space-time oscillating scalar `a(y, s) = mean + amp sin(2 pi y) sin(2 pi s)`.
    pub fn spacetime_sin(d: usize, mean: f64, amplitude: f64) -> Result<Self> {
        if mean - amplitude.abs() <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "spacetime_sin needs mean > |amplitude|, got mean {mean}, amplitude {amplitude}"
            )));
        }
        let lo = mean - amplitude.abs();
        let hi = mean + amplitude.abs();
        let mu = lo.min(1.0 / hi);
        Ok(CoefficientField::from_closure(
            d,
            1,
            mu,
            Arc::new(move |i, j, _a, _b, y, s| {
                if i != j {
                    return 0.0;
                }
                mean + amplitude * (2.0 * PI * y[0]).sin() * (2.0 * PI * s).sin()
            }),
        ))
    }

    /// Evaluate one tensor entry at `(y, s)`, wrapping into the unit cell.
    pub fn eval(&self, i: usize, j: usize, alpha: usize, beta: usize, y: &[f64], s: f64) -> f64 {
        debug_assert!(i < self.d && j < self.d && alpha < self.m && beta < self.m);
        match &self.evaluator {
            Evaluator::Closure(f) => {
                let yw: Vec<f64> = y.iter().map(|&v| wrap01(v)).collect();
                f(i, j, alpha, beta, &yw, wrap01(s))
            }
            Evaluator::Gridded { grid, values } => {
                let mut per_axis = Vec::with_capacity(self.d + 1);
                for a in 0..self.d {
                    per_axis.push((wrap01(y[a]) * grid.n_space as f64).round() as isize);
                }
                per_axis.push((wrap01(s) * grid.n_time as f64).round() as isize);
                let node = grid.wrap_index(&per_axis);
                let entry = ((i * self.d + j) * self.m + alpha) * self.m + beta;
                values[entry * grid.len() + node]
            }
        }
    }

    /// Sample every tensor entry on a collocation grid.
    pub fn sample_on(&self, grid: CellGrid) -> CoeffSample {
        let d = self.d;
        let m = self.m;
        let n = grid.len();
        let points: Vec<Vec<f64>> = (0..n).map(|idx| grid.point(idx)).collect();
        let mut fields = Vec::with_capacity(d * d * m * m);
        for i in 0..d {
            for j in 0..d {
                for a in 0..m {
                    for b in 0..m {
                        let mut data = vec![0.0; n];
                        crate::par::fill_chunks(&mut data, 1024, |c, slab| {
                            for (k, v) in slab.iter_mut().enumerate() {
                                let idx = c * 1024 + k;
                                let p = &points[idx];
                                *v = self.eval(i, j, a, b, &p[..d], p[d]);
                            }
                        });
                        fields.push(TorusField { grid, data });
                    }
                }
            }
        }
        CoeffSample {
            d,
            m,
            grid,
            fields,
        }
    }

    /// Probe the ellipticity bounds at every node of `grid` with coordinate
    /// matrices and a fixed batch of dense probes.
    pub fn check_ellipticity(&self, grid: CellGrid) -> Result<()> {
        let sample = self.sample_on(grid);
        sample.check_ellipticity(self.mu)
    }

    /// Spot-check 1-periodicity of a closure evaluator on sample points.
    pub fn check_periodicity(&self, samples: usize) -> Result<()> {
        let d = self.d;
        let mut worst: f64 = 0.0;
        for q in 0..samples {
            let y: Vec<f64> = (0..d)
                .map(|a| wrap01(0.137 + 0.61 * q as f64 + 0.17 * a as f64))
                .collect();
            let s = wrap01(0.29 + 0.47 * q as f64);
            let y_shift: Vec<f64> = y.iter().enumerate().map(|(a, v)| v + (a + 1) as f64).collect();
            for i in 0..d {
                for j in 0..d {
                    for al in 0..self.m {
                        for be in 0..self.m {
                            let v0 = self.eval(i, j, al, be, &y, s);
                            let v1 = self.eval(i, j, al, be, &y_shift, s + 2.0);
                            worst = worst.max((v0 - v1).abs());
                        }
                    }
                }
            }
        }
        if worst > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "evaluator is not 1-periodic: max shift mismatch {worst:.3e}"
            )));
        }
        Ok(())
    }
}

/// Coefficient tensor sampled on a cell grid, index `(i, j, alpha, beta)`.
pub struct CoeffSample {
    pub d: usize,
    pub m: usize,
    pub grid: CellGrid,
    fields: Vec<TorusField>,
}

impl CoeffSample {
    pub fn entry(&self, i: usize, j: usize, alpha: usize, beta: usize) -> &TorusField {
        &self.fields[((i * self.d + j) * self.m + alpha) * self.m + beta]
    }

    /// Mean of the coefficient trace, used to scale the constant-coefficient
    /// preconditioner.
    pub fn mean_trace(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.d {
            for a in 0..self.m {
                acc += self.entry(i, i, a, a).mean();
            }
        }
        acc / (self.d * self.m) as f64
    }

    pub fn check_ellipticity(&self, mu: f64) -> Result<()> {
        let d = self.d;
        let m = self.m;
        let n = self.grid.len();
        // coordinate probes plus a fixed batch of dense probes
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            for a in 0..m {
                let mut xi = vec![0.0; d * m];
                xi[i * m + a] = 1.0;
                probes.push(xi);
            }
        }
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..8 {
            let xi: Vec<f64> = (0..d * m)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect();
            probes.push(xi);
        }
        let slack = 1e-9;
        for node in 0..n {
            for xi in &probes {
                let norm2: f64 = xi.iter().map(|v| v * v).sum();
                if norm2 == 0.0 {
                    continue;
                }
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        for a in 0..m {
                            for b in 0..m {
                                q += self.entry(i, j, a, b).data[node] * xi[i * m + a] * xi[j * m + b];
                            }
                        }
                    }
                }
                let lower = mu * norm2;
                let upper = norm2 / mu;
                if q < lower - slack * norm2 || q > upper + slack * norm2 {
                    return Err(Error::EllipticityViolation {
                        location: self.grid.point(node),
                        value: q,
                        lower,
                        upper,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laminate_harmonic_mean_is_one() {
        let a = CoefficientField::laminate_1d(0.5).unwrap();
        // integral of 1/a over a period is 1
        let n = 4096;
        let mut acc = 0.0;
        for k in 0..n {
            let y = [k as f64 / n as f64];
            acc += 1.0 / a.eval(0, 0, 0, 0, &y, 0.0);
        }
        assert!((acc / n as f64 - 1.0).abs() < 1e-12);
        a.check_periodicity(5).unwrap();
    }

    #[test]
    fn ellipticity_probe_accepts_builtins_and_rejects_bad_mu() {
        let grid = CellGrid::new(1, 16, 8).unwrap();
        CoefficientField::spacetime_sin(1, 2.0, 1.0)
            .unwrap()
            .check_ellipticity(grid)
            .unwrap();
        // claiming a larger mu than the field supports must fail
        let bad = CoefficientField::from_closure(
            1,
            1,
            0.9,
            Arc::new(|_, _, _, _, y, _| 2.0 + 1.5 * (2.0 * PI * y[0]).sin()),
        );
        assert!(matches!(
            bad.check_ellipticity(grid),
            Err(Error::EllipticityViolation { .. })
        ));
    }

    #[test]
    fn gridded_nearest_lookup_wraps() {
        let grid = CellGrid::new(1, 8, 8).unwrap();
        let mut values = vec![0.0; grid.len()];
        for idx in 0..grid.len() {
            let p = grid.point(idx);
            values[idx] = 1.0 + p[0];
        }
        let a = CoefficientField::from_grid(1, 1, 0.5, grid, values).unwrap();
        // y = 0.99 rounds to node index 8 -> wraps to 0
        let v = a.eval(0, 0, 0, 0, &[0.99], 0.0);
        assert_eq!(v, 1.0);
        let v = a.eval(0, 0, 0, 0, &[0.49], 0.0);
        assert_eq!(v, 1.0 + 4.0 / 8.0);
    }
}
