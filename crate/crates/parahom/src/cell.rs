//! The space-time periodic cell problem: correctors, homogenized matrix,
//! and the flux-discrepancy field.
//!
//! For each direction j and system index beta the corrector solves
//! `(d_s + L_1)(chi) = div_y(A e_j)` on the cell with 1-periodicity and
//! zero mean, where `L_1 = -div_y(A grad_y)`. The discretization is Fourier
//! collocation in all d+1 variables with the variable-coefficient product
//! formed pointwise in physical space. The linear solve is restarted GMRES
//! on the mean-zero subspace, preconditioned by the exact Fourier inverse of
//! `d_s - c Lap_y` with `c` the mean coefficient trace.

use crate::coeff::{CoeffSample, CoefficientField};
use crate::error::{Error, Result};
use crate::fft::Spectral;
use crate::krylov::gmres;
use crate::torus::{CellGrid, TorusField};

/// Iteration cap for the cell solver.
pub const CELL_ITERATION_CAP: usize = 10_000;
/// Default relative residual tolerance.
pub const CELL_DEFAULT_TOL: f64 = 1e-10;
const GMRES_RESTART: usize = 60;

/// The constant homogenized tensor, entries `(i, j, alpha, beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedMatrix {
    pub d: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl HomogenizedMatrix {
    pub fn entry(&self, i: usize, j: usize, alpha: usize, beta: usize) -> f64 {
        self.data[((i * self.d + j) * self.m + alpha) * self.m + beta]
    }

    /// Lower ellipticity probe with coordinate and random matrices.
    pub fn check_ellipticity(&self, mu: f64) -> Result<()> {
        let d = self.d;
        let m = self.m;
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            for a in 0..m {
                let mut xi = vec![0.0; d * m];
                xi[i * m + a] = 1.0;
                probes.push(xi);
            }
        }
        let mut state = 0x243f6a8885a308d3u64;
        for _ in 0..16 {
            probes.push(
                (0..d * m)
                    .map(|_| {
                        state = state
                            .wrapping_mul(6364136223846793005)
                            .wrapping_add(1442695040888963407);
                        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                    })
                    .collect(),
            );
        }
        for xi in &probes {
            let norm2: f64 = xi.iter().map(|v| v * v).sum();
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    for a in 0..m {
                        for b in 0..m {
                            q += self.entry(i, j, a, b) * xi[i * m + a] * xi[j * m + b];
                        }
                    }
                }
            }
            if q < mu * norm2 - 1e-9 * norm2 {
                return Err(Error::EllipticityViolation {
                    location: vec![],
                    value: q,
                    lower: mu * norm2,
                    upper: f64::INFINITY,
                });
            }
        }
        Ok(())
    }
}

/// The flux-discrepancy field `b_ij^{ab}` with the extended time row
/// `b_{(d+1)j} = -chi_j`. Row index `i` runs over `0..=d` where `i = d` is
/// the cell-time row.
#[derive(Debug, Clone)]
pub struct DiscrepancyField {
    pub d: usize,
    pub m: usize,
    pub grid: CellGrid,
    rows: Vec<TorusField>,
}

impl DiscrepancyField {
    pub fn entry(&self, i: usize, j: usize, alpha: usize, beta: usize) -> &TorusField {
        &self.rows[((i * self.d + j) * self.m + alpha) * self.m + beta]
    }
}

/// Correctors on the cell, the homogenized matrix and the discrepancy field.
pub struct CorrectorSet {
    pub d: usize,
    pub m: usize,
    pub grid: CellGrid,
    chi: Vec<TorusField>,
    pub a_hat: Option<HomogenizedMatrix>,
    pub b: Option<DiscrepancyField>,
    /// Max absolute discrete L2(Y) residual of `(d_s + L_1)(chi + P)` over
    /// all (j, beta) columns.
    pub residual: f64,
    /// Residual relative to the norm of the cell right-hand side.
    pub relative_residual: f64,
    pub iterations: usize,
}

impl CorrectorSet {
    /// Component alpha of the corrector for direction j, system index beta.
    pub fn chi(&self, j: usize, alpha: usize, beta: usize) -> &TorusField {
        &self.chi[((j * self.m + beta) * self.m) + alpha]
    }
}

fn vec_l2y(v: &[f64], points: usize) -> f64 {
    let ss: f64 = v.iter().map(|x| x * x).sum();
    (ss / points as f64).sqrt()
}

/// Apply `T(chi) = d_s chi - div_y(A grad_y chi)` to the concatenated
/// component vector, projecting out the zero mode of each component.
fn apply_cell_operator(spec: &Spectral, sample: &CoeffSample, x: &[f64]) -> Vec<f64> {
    let grid = sample.grid;
    let d = sample.d;
    let m = sample.m;
    let n = grid.len();
    // gradients of every component
    let mut grads: Vec<TorusField> = Vec::with_capacity(d * m);
    for gamma in 0..m {
        let xf = TorusField {
            grid,
            data: x[gamma * n..(gamma + 1) * n].to_vec(),
        };
        for k in 0..d {
            grads.push(spec.derivative_axis(&xf, k));
        }
    }
    let grad = |k: usize, gamma: usize| &grads[gamma * d + k];

    let mut out = vec![0.0; m * n];
    for alpha in 0..m {
        let xf = TorusField {
            grid,
            data: x[alpha * n..(alpha + 1) * n].to_vec(),
        };
        let mut acc = spec.derivative_axis(&xf, d).data;
        for i in 0..d {
            let mut flux = vec![0.0; n];
            for k in 0..d {
                for gamma in 0..m {
                    let a = sample.entry(i, k, alpha, gamma);
                    let g = grad(k, gamma);
                    for idx in 0..n {
                        flux[idx] += a.data[idx] * g.data[idx];
                    }
                }
            }
            let dflux = spec.derivative_axis(&TorusField { grid, data: flux }, i);
            for idx in 0..n {
                acc[idx] -= dflux.data[idx];
            }
        }
        let mean: f64 = acc.iter().sum::<f64>() / n as f64;
        for (o, a) in out[alpha * n..(alpha + 1) * n].iter_mut().zip(&acc) {
            *o = a - mean;
        }
    }
    out
}

/// Right-hand side `div_y(A e_j e^beta)` for one corrector column.
fn cell_rhs(spec: &Spectral, sample: &CoeffSample, j: usize, beta: usize) -> Vec<f64> {
    let grid = sample.grid;
    let n = grid.len();
    let m = sample.m;
    let mut rhs = vec![0.0; m * n];
    for alpha in 0..m {
        let mut acc = vec![0.0; n];
        for i in 0..sample.d {
            let da = spec.derivative_axis(sample.entry(i, j, alpha, beta), i);
            for idx in 0..n {
                acc[idx] += da.data[idx];
            }
        }
        let mean: f64 = acc.iter().sum::<f64>() / n as f64;
        for (o, a) in rhs[alpha * n..(alpha + 1) * n].iter_mut().zip(&acc) {
            *o = a - mean;
        }
    }
    rhs
}

/// Solve the cell problem for every `(j, beta)` column.
pub fn solve_cell_problem(a: &CoefficientField, grid: &CellGrid, tol: f64) -> Result<CorrectorSet> {
    if tol <= 0.0 {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let d = a.d;
    let m = a.m;
    let sample = a.sample_on(*grid);
    sample.check_ellipticity(a.mu)?;
    let spec = Spectral::new(*grid);
    let n = grid.len();
    let trace = sample.mean_trace();

    let columns: Vec<(usize, usize)> = (0..d)
        .flat_map(|j| (0..m).map(move |beta| (j, beta)))
        .collect();

    struct ColumnSolve {
        j: usize,
        beta: usize,
        chi: Vec<f64>,
        residual: f64,
        relative: f64,
        iterations: usize,
        error: Option<Error>,
    }

    let solved: Vec<ColumnSolve> = crate::par::map_collect(columns, |(j, beta)| {
        let rhs = cell_rhs(&spec, &sample, j, beta);
        let gnorm = vec_l2y(&rhs, n);
        let mut x = vec![0.0; m * n];
        if gnorm < 1e-14 {
            return ColumnSolve {
                j,
                beta,
                chi: x,
                residual: gnorm,
                relative: 0.0,
                iterations: 0,
                error: None,
            };
        }
        let apply = |v: &[f64]| apply_cell_operator(&spec, &sample, v);
        let precond = |v: &[f64]| {
            let mut out = vec![0.0; m * n];
            for alpha in 0..m {
                let inv = spec.parabolic_inverse(&v[alpha * n..(alpha + 1) * n], trace);
                out[alpha * n..(alpha + 1) * n].copy_from_slice(&inv);
            }
            out
        };
        let mut used = 0usize;
        let mut rtol_eff = tol;
        loop {
            let out = gmres(
                apply,
                precond,
                &rhs,
                &mut x,
                rtol_eff,
                CELL_ITERATION_CAP - used,
                GMRES_RESTART,
            );
            used += out.iterations;
            let ax = apply(&x);
            let res: Vec<f64> = ax.iter().zip(&rhs).map(|(p, q)| p - q).collect();
            let true_res = vec_l2y(&res, n);
            if true_res <= tol * gnorm {
                return ColumnSolve {
                    j,
                    beta,
                    chi: x,
                    residual: true_res,
                    relative: true_res / gnorm,
                    iterations: used,
                    error: None,
                };
            }
            if used >= CELL_ITERATION_CAP {
                return ColumnSolve {
                    j,
                    beta,
                    chi: x,
                    residual: true_res,
                    relative: true_res / gnorm,
                    iterations: used,
                    error: Some(Error::IterationLimitExceeded {
                        iterations: used,
                        residual: true_res / gnorm,
                        target: tol,
                    }),
                };
            }
            rtol_eff *= 0.1;
        }
    });

    let mut chi = vec![TorusField::zeros(*grid); d * m * m];
    let mut residual = 0.0f64;
    let mut relative = 0.0f64;
    let mut iterations = 0usize;
    for col in solved {
        if let Some(err) = col.error {
            return Err(err);
        }
        residual = residual.max(col.residual);
        relative = relative.max(col.relative);
        iterations = iterations.max(col.iterations);
        for alpha in 0..m {
            let mut f = TorusField {
                grid: *grid,
                data: col.chi[alpha * n..(alpha + 1) * n].to_vec(),
            };
            f.project_mean_zero();
            chi[(col.j * m + col.beta) * m + alpha] = f;
        }
    }

    Ok(CorrectorSet {
        d,
        m,
        grid: *grid,
        chi,
        a_hat: None,
        b: None,
        residual,
        relative_residual: relative,
        iterations,
    })
}

/// Cell average of `A + A grad chi`, stored into `corr.a_hat`.
pub fn homogenized_matrix(a: &CoefficientField, corr: &mut CorrectorSet) -> Result<HomogenizedMatrix> {
    let d = corr.d;
    let m = corr.m;
    let sample = a.sample_on(corr.grid);
    let spec = Spectral::new(corr.grid);
    let n = corr.grid.len();

    // spectral gradients of every corrector component
    let mut dchi = vec![TorusField::zeros(corr.grid); d * d * m * m];
    for j in 0..d {
        for beta in 0..m {
            for gamma in 0..m {
                let f = corr.chi(j, gamma, beta);
                for k in 0..d {
                    dchi[((k * d + j) * m + gamma) * m + beta] = spec.derivative_axis(f, k);
                }
            }
        }
    }

    let mut data = vec![0.0; d * d * m * m];
    for i in 0..d {
        for j in 0..d {
            for alpha in 0..m {
                for beta in 0..m {
                    let mut acc = sample.entry(i, j, alpha, beta).mean();
                    for k in 0..d {
                        for gamma in 0..m {
                            let aa = sample.entry(i, k, alpha, gamma);
                            let g = &dchi[((k * d + j) * m + gamma) * m + beta];
                            acc += crate::par::det_sum(n, |idx| aa.data[idx] * g.data[idx])
                                / n as f64;
                        }
                    }
                    data[((i * d + j) * m + alpha) * m + beta] = acc;
                }
            }
        }
    }
    let a_hat = HomogenizedMatrix { d, m, data };
    a_hat.check_ellipticity(a.mu)?;
    corr.a_hat = Some(a_hat.clone());
    Ok(a_hat)
}

/// The discrepancy field `b = A + A grad chi - A_hat` with the extra time
/// row `b_{(d+1)j} = -chi_j`, stored into `corr.b`.
pub fn b_field(a: &CoefficientField, corr: &mut CorrectorSet) -> Result<()> {
    let a_hat = corr
        .a_hat
        .clone()
        .ok_or_else(|| Error::InvalidConfig("b_field requires a_hat populated".into()))?;
    let d = corr.d;
    let m = corr.m;
    let n = corr.grid.len();
    let sample = a.sample_on(corr.grid);
    let spec = Spectral::new(corr.grid);

    let mut dchi = vec![TorusField::zeros(corr.grid); d * d * m * m];
    for j in 0..d {
        for beta in 0..m {
            for gamma in 0..m {
                let f = corr.chi(j, gamma, beta);
                for k in 0..d {
                    dchi[((k * d + j) * m + gamma) * m + beta] = spec.derivative_axis(f, k);
                }
            }
        }
    }

    let mut rows = Vec::with_capacity((d + 1) * d * m * m);
    for i in 0..=d {
        for j in 0..d {
            for alpha in 0..m {
                for beta in 0..m {
                    let field = if i < d {
                        let mut data = sample.entry(i, j, alpha, beta).data.clone();
                        for k in 0..d {
                            for gamma in 0..m {
                                let aa = sample.entry(i, k, alpha, gamma);
                                let g = &dchi[((k * d + j) * m + gamma) * m + beta];
                                for idx in 0..n {
                                    data[idx] += aa.data[idx] * g.data[idx];
                                }
                            }
                        }
                        let ah = a_hat.entry(i, j, alpha, beta);
                        for v in &mut data {
                            *v -= ah;
                        }
                        TorusField {
                            grid: corr.grid,
                            data,
                        }
                    } else {
                        TorusField {
                            grid: corr.grid,
                            data: corr.chi(j, alpha, beta).data.iter().map(|v| -v).collect(),
                        }
                    };
                    rows.push(field);
                }
            }
        }
    }
    corr.b = Some(DiscrepancyField {
        d,
        m,
        grid: corr.grid,
        rows,
    });
    Ok(())
}

/// Convenience: solve the cell problem and populate `a_hat` and `b`.
pub fn solve_corrector_suite(a: &CoefficientField, grid: &CellGrid, tol: f64) -> Result<CorrectorSet> {
    let mut corr = solve_cell_problem(a, grid, tol)?;
    homogenized_matrix(a, &mut corr)?;
    b_field(a, &mut corr)?;
    Ok(corr)
}

/// Residual of the divergence identity `sum_i d_i b_ij - d_s chi_j`
/// in the discrete L2(Y) norm, maximized over (j, alpha, beta).
pub fn divergence_identity_residual(corr: &CorrectorSet) -> Result<f64> {
    let b = corr
        .b
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("divergence identity requires b populated".into()))?;
    let spec = Spectral::new(corr.grid);
    let d = corr.d;
    let n = corr.grid.len();
    let mut worst = 0.0f64;
    for j in 0..d {
        for alpha in 0..corr.m {
            for beta in 0..corr.m {
                let mut acc = vec![0.0; n];
                for i in 0..d {
                    let di = spec.derivative_axis(b.entry(i, j, alpha, beta), i);
                    for idx in 0..n {
                        acc[idx] += di.data[idx];
                    }
                }
                let ds = spec.derivative_axis(corr.chi(j, alpha, beta), d);
                for idx in 0..n {
                    acc[idx] -= ds.data[idx];
                }
                worst = worst.max(vec_l2y(&acc, n));
            }
        }
    }
    Ok(worst)
}
