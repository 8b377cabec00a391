//! Fourier collocation on the periodic cell.
//!
//! Real fields are transformed axis by axis with complex FFTs. Signed
//! frequencies follow the usual FFT layout; first-derivative multipliers
//! zero the Nyquist mode so real fields stay real, while even-order symbols
//! (Laplacian) keep it.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::torus::{CellGrid, TorusField};

/// Cached FFT plans for every axis length of a cell grid.
pub struct Spectral {
    grid: CellGrid,
    fwd: HashMap<usize, Arc<dyn Fft<f64>>>,
    inv: HashMap<usize, Arc<dyn Fft<f64>>>,
}

/// Signed frequency of FFT bin `idx` for axis length `n`.
pub fn freq(n: usize, idx: usize) -> i64 {
    if idx < n.div_ceil(2) {
        idx as i64
    } else {
        idx as i64 - n as i64
    }
}

/// First-derivative frequency: signed, with the Nyquist mode zeroed.
fn freq_d1(n: usize, idx: usize) -> f64 {
    if n % 2 == 0 && idx == n / 2 {
        0.0
    } else {
        freq(n, idx) as f64
    }
}

impl Spectral {
    pub fn new(grid: CellGrid) -> Self {
        let mut planner = FftPlanner::new();
        let mut fwd = HashMap::new();
        let mut inv = HashMap::new();
        for n in grid.axes() {
            fwd.entry(n).or_insert_with(|| planner.plan_fft_forward(n));
            inv.entry(n).or_insert_with(|| planner.plan_fft_inverse(n));
        }
        Spectral { grid, fwd, inv }
    }

    pub fn grid(&self) -> CellGrid {
        self.grid
    }

    fn transform_axis(&self, buf: &mut [Complex64], axis: usize, forward: bool) {
        let axes = self.grid.axes();
        let n_ax = axes[axis];
        if n_ax == 1 {
            return;
        }
        let plan = if forward {
            Arc::clone(&self.fwd[&n_ax])
        } else {
            Arc::clone(&self.inv[&n_ax])
        };
        let stride: usize = axes[axis + 1..].iter().product();
        let block = n_ax * stride;
        let n_blocks = buf.len() / block;
        let mut line = vec![Complex64::default(); n_ax];
        for b in 0..n_blocks {
            for p in 0..stride {
                let base = b * block + p;
                for k in 0..n_ax {
                    line[k] = buf[base + k * stride];
                }
                plan.process(&mut line);
                for k in 0..n_ax {
                    buf[base + k * stride] = line[k];
                }
            }
        }
    }

    /// Full forward transform with 1/N normalization (Fourier coefficients).
    pub fn forward(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for a in 0..self.grid.d + 1 {
            self.transform_axis(&mut buf, a, true);
        }
        let scale = 1.0 / field.len() as f64;
        for c in &mut buf {
            *c *= scale;
        }
        buf
    }

    /// Inverse of [`Spectral::forward`], returning the real part.
    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        for a in 0..self.grid.d + 1 {
            self.transform_axis(&mut buf, a, false);
        }
        buf.iter().map(|c| c.re).collect()
    }

    /// Spectral derivative along one axis (spatial axes 0..d-1, time = d).
    pub fn derivative_axis(&self, field: &TorusField, axis: usize) -> TorusField {
        let axes = self.grid.axes();
        let n_ax = axes[axis];
        if n_ax == 1 {
            return TorusField::zeros(self.grid);
        }
        let mut buf: Vec<Complex64> = field.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform_axis(&mut buf, axis, true);
        let stride: usize = axes[axis + 1..].iter().product();
        let block = n_ax * stride;
        let n_blocks = buf.len() / block;
        let scale = 1.0 / n_ax as f64;
        for b in 0..n_blocks {
            for k in 0..n_ax {
                let mult = Complex64::new(0.0, 2.0 * PI * freq_d1(n_ax, k)) * scale;
                let base = b * block + k * stride;
                for p in 0..stride {
                    buf[base + p] *= mult;
                }
            }
        }
        self.transform_axis(&mut buf, axis, false);
        TorusField {
            grid: self.grid,
            data: buf.iter().map(|c| c.re).collect(),
        }
    }

    /// Apply a diagonal Fourier symbol: `out_hat(k) = f(k) * in_hat(k)`.
    /// The symbol receives the signed frequency vector (spatial, then time).
    pub fn apply_symbol<F>(&self, field: &[f64], symbol: F) -> Vec<f64>
    where
        F: Fn(&[i64]) -> Complex64,
    {
        let coeffs = self.forward(field);
        let axes = self.grid.axes();
        let mut out = vec![Complex64::default(); coeffs.len()];
        let mut ks = vec![0i64; axes.len()];
        for (i, c) in coeffs.iter().enumerate() {
            let mut rem = i;
            for a in (0..axes.len()).rev() {
                let idx = rem % axes[a];
                rem /= axes[a];
                ks[a] = freq(axes[a], idx);
            }
            out[i] = symbol(&ks) * c;
        }
        self.inverse(&out)
    }

    /// Invert the (d+1)-dimensional Laplacian on the torus with a zero-mean
    /// convention: `f_hat(k) = -b_hat(k) / (4 pi^2 |k|^2)`, `f_hat(0) = 0`.
    pub fn poisson_inverse(&self, rhs: &TorusField) -> TorusField {
        let data = self.apply_symbol(&rhs.data, |ks| {
            let k2: f64 = ks.iter().map(|&k| (k * k) as f64).sum();
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(-1.0 / (4.0 * PI * PI * k2), 0.0)
            }
        });
        TorusField {
            grid: self.grid,
            data,
        }
    }

    /// Invert the constant-coefficient parabolic operator
    /// `d_s - c * Lap_y` on the mean-zero subspace (zero mode dropped).
    pub fn parabolic_inverse(&self, rhs: &[f64], c: f64) -> Vec<f64> {
        let d = self.grid.d;
        self.apply_symbol(rhs, |ks| {
            let k2: f64 = ks[..d].iter().map(|&k| (k * k) as f64).sum();
            let kt = ks[d] as f64;
            let sym = Complex64::new(4.0 * PI * PI * c * k2, 2.0 * PI * kt);
            if sym.norm_sqr() == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                sym.inv()
            }
        })
    }
}

/// Fourier representation of a periodic field, for exact trigonometric
/// interpolation at off-grid points.
#[derive(Debug, Clone)]
pub struct TorusSpectrum {
    pub grid: CellGrid,
    coeffs: Vec<Complex64>,
}

impl TorusSpectrum {
    pub fn from_field(spec: &Spectral, field: &TorusField) -> Self {
        TorusSpectrum {
            grid: field.grid,
            coeffs: spec.forward(&field.data),
        }
    }

    /// Evaluate the interpolant at one point of `[0,1)^{d+1}`.
    pub fn eval(&self, point: &[f64]) -> f64 {
        let phases: Vec<Vec<f64>> = point.iter().map(|&p| vec![p]).collect();
        self.eval_tensor(&phases)[0]
    }

    /// Evaluate on the tensor product of per-axis phase lists, returned
    /// row-major with the last (time) axis fastest.
    ///
    /// Contraction proceeds axis by axis against precomputed complex
    /// exponentials, so the cost is a sequence of small dense products
    /// rather than `points x modes`.
    pub fn eval_tensor(&self, phases: &[Vec<f64>]) -> Vec<f64> {
        let axes = self.grid.axes();
        assert_eq!(phases.len(), axes.len());
        let mut dims = axes.clone();
        let mut data = self.coeffs.clone();
        for ax in 0..axes.len() {
            let n_modes = axes[ax];
            let n_phase = phases[ax].len();
            // exponential matrix: e[p][k] = exp(2 pi i freq(k) y_p)
            let mut expm = vec![Complex64::default(); n_phase * n_modes];
            for (p, &y) in phases[ax].iter().enumerate() {
                for k in 0..n_modes {
                    let f = freq(n_modes, k) as f64;
                    let arg = 2.0 * PI * f * y;
                    expm[p * n_modes + k] = Complex64::new(arg.cos(), arg.sin());
                }
            }
            let pre: usize = dims[..ax].iter().product();
            let post: usize = dims[ax + 1..].iter().product();
            let mut next = vec![Complex64::default(); pre * n_phase * post];
            for b in 0..pre {
                for p in 0..n_phase {
                    let erow = &expm[p * n_modes..(p + 1) * n_modes];
                    for q in 0..post {
                        let mut acc = Complex64::default();
                        let base = b * n_modes * post + q;
                        for (k, e) in erow.iter().enumerate() {
                            acc += data[base + k * post] * e;
                        }
                        next[(b * n_phase + p) * post + q] = acc;
                    }
                }
            }
            data = next;
            dims[ax] = n_phase;
        }
        data.iter().map(|c| c.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::CellGrid;
    use std::f64::consts::PI;

    fn grid_1d() -> CellGrid {
        CellGrid::new(1, 16, 8).unwrap()
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let g = grid_1d();
        let spec = Spectral::new(g);
        let f = TorusField::from_fn(g, |p| (2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).cos() + 0.3);
        let back = spec.inverse(&spec.forward(&f.data));
        for (a, b) in f.data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn derivative_of_single_mode() {
        let g = grid_1d();
        let spec = Spectral::new(g);
        let f = TorusField::from_fn(g, |p| (2.0 * PI * p[0]).sin());
        let df = spec.derivative_axis(&f, 0);
        let exact = TorusField::from_fn(g, |p| 2.0 * PI * (2.0 * PI * p[0]).cos());
        for (a, b) in df.data.iter().zip(&exact.data) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
        // time derivative of a space-only field vanishes
        let ds = spec.derivative_axis(&f, 1);
        assert!(ds.max_abs() < 1e-12);
    }

    #[test]
    fn poisson_inverse_is_exact_on_eigenfunction() {
        let g = grid_1d();
        let spec = Spectral::new(g);
        let b = TorusField::from_fn(g, |p| (2.0 * PI * p[0]).sin());
        let f = spec.poisson_inverse(&b);
        let expect = TorusField::from_fn(g, |p| -(2.0 * PI * p[0]).sin() / (4.0 * PI * PI));
        for (a, e) in f.data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolation_matches_samples_and_off_grid() {
        let g = grid_1d();
        let spec = Spectral::new(g);
        let f = TorusField::from_fn(g, |p| {
            (2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).sin() + (2.0 * PI * 2.0 * p[0]).cos()
        });
        let s = TorusSpectrum::from_field(&spec, &f);
        // on-grid
        for idx in [0usize, 5, 100] {
            let pt = g.point(idx % g.len());
            let v = s.eval(&pt);
            assert!((v - f.data[idx % g.len()]).abs() < 1e-12);
        }
        // off-grid against the analytic band-limited function
        let pt = [0.137, 0.619];
        let exact = (2.0 * PI * pt[0]).sin() * (2.0 * PI * pt[1]).sin()
            + (2.0 * PI * 2.0 * pt[0]).cos();
        assert!((s.eval(&pt) - exact).abs() < 1e-12);
    }

    #[test]
    fn tensor_eval_matches_pointwise() {
        let g = grid_1d();
        let spec = Spectral::new(g);
        let f = TorusField::from_fn(g, |p| (2.0 * PI * (p[0] + 2.0 * p[1])).sin());
        let s = TorusSpectrum::from_field(&spec, &f);
        let ys = vec![0.0, 0.25, 0.8];
        let ss = vec![0.1, 0.6];
        let vals = s.eval_tensor(&[ys.clone(), ss.clone()]);
        for (iy, &y) in ys.iter().enumerate() {
            for (is, &t) in ss.iter().enumerate() {
                let v = s.eval(&[y, t]);
                assert!((vals[iy * ss.len() + is] - v).abs() < 1e-12);
            }
        }
    }
}
