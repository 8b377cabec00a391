//! Two-scale expansion assembly and the weak-form error identity.
//!
//! `w_eps = u_eps - u0 - eps chi^eps K_eps(grad u0)
//!          - eps^2 phi_{(d+1) i j}^eps d_i K_eps(grad u0)`
//! with the periodic fields evaluated at `(x/eps, t/eps^2)` by exact
//! trigonometric interpolation of their Fourier representations. The
//! identity check pairs `w_eps` with smooth compactly supported test fields
//! and compares the weak form of `(d_t + L_eps) w_eps` against the six-term
//! right-hand side, reporting per-field residuals.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cell::CorrectorSet;
use crate::coeff::CoefficientField;
use crate::dual::DualCorrectorSet;
use crate::error::{Error, Result};
use crate::fft::{Spectral, TorusSpectrum};
use crate::smooth::{
    grad_k_eps, k_eps, k_eps_derivative, KernelDerivative, SmoothingKernel,
};
use crate::solver::{GridFunction, SpaceTimeGrid};
use crate::torus::TorusField;

fn wrap01(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w == 1.0 {
        0.0
    } else {
        w
    }
}

/// Evaluates periodic cell fields at `(x/eps, t/eps^2)` over a space-time
/// grid. Per-axis phases are deduplicated bit-exactly, so policy-aligned
/// grids collapse to a tiny phase table that is tiled across the grid.
pub struct ScaledTorusEvaluator {
    grid: SpaceTimeGrid,
    spec: Spectral,
    /// distinct phase values per axis (spatial axes then time)
    phases: Vec<Vec<f64>>,
    /// per-axis map from grid index to distinct-phase index
    index: Vec<Vec<usize>>,
}

impl ScaledTorusEvaluator {
    pub fn new(cell_grid: crate::torus::CellGrid, grid: &SpaceTimeGrid, eps: f64) -> Self {
        let d = grid.d();
        let mut phases = Vec::with_capacity(d + 1);
        let mut index = Vec::with_capacity(d + 1);
        for a in 0..d {
            let vals: Vec<f64> = (0..grid.n[a]).map(|i| wrap01(grid.coord(a, i) / eps)).collect();
            let (ph, ix) = dedup_bits(&vals);
            phases.push(ph);
            index.push(ix);
        }
        let tvals: Vec<f64> = (0..grid.n_time)
            .map(|l| wrap01(grid.time(l) / (eps * eps)))
            .collect();
        let (ph, ix) = dedup_bits(&tvals);
        phases.push(ph);
        index.push(ix);
        ScaledTorusEvaluator {
            grid: grid.clone(),
            spec: Spectral::new(cell_grid),
            phases,
            index,
        }
    }

    /// `field(x/eps, t/eps^2)` as a scalar grid function.
    pub fn eval(&self, field: &TorusField) -> GridFunction {
        let spectrum = TorusSpectrum::from_field(&self.spec, field);
        let table = spectrum.eval_tensor(&self.phases);
        let d = self.grid.d();
        let sp = self.grid.space_len();
        let tstride = self.phases[d].len();
        let mut out = GridFunction::zeros(self.grid.clone(), 1);
        let grid = self.grid.clone();
        let index = &self.index;
        crate::par::fill_chunks(&mut out.values, sp, |lvl, slab| {
            let pt = index[d][lvl];
            match d {
                1 => {
                    for (i, v) in slab.iter_mut().enumerate() {
                        *v = table[index[0][i] * tstride + pt];
                    }
                }
                2 => {
                    let n1 = grid.n[1];
                    let s1 = self.phases[1].len() * tstride;
                    for (idx, v) in slab.iter_mut().enumerate() {
                        let (i, j) = (idx / n1, idx % n1);
                        *v = table[index[0][i] * s1 + index[1][j] * tstride + pt];
                    }
                }
                _ => unreachable!(),
            }
        });
        out
    }
}

fn dedup_bits(vals: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut distinct = Vec::new();
    let mut index = Vec::with_capacity(vals.len());
    for &v in vals {
        let key = v.to_bits();
        let id = *seen.entry(key).or_insert_with(|| {
            distinct.push(v);
            distinct.len() - 1
        });
        index.push(id);
    }
    (distinct, index)
}

/// Solved fields and the assembled two-scale discrepancy.
pub struct ExpansionBundle {
    pub u_eps: GridFunction,
    pub u0: GridFunction,
    pub w_eps: GridFunction,
    pub eps: f64,
    pub delta: f64,
}

/// Assemble `w_eps` from the solved oscillating and homogenized fields and
/// the corrector data.
pub fn build_w_eps(
    u_eps: &GridFunction,
    u0: &GridFunction,
    corr: &CorrectorSet,
    dual: &DualCorrectorSet,
    eps: f64,
    delta: f64,
    kernel: &SmoothingKernel,
) -> Result<ExpansionBundle> {
    if !u_eps.same_grid(u0) {
        return Err(Error::GridMismatch(
            "u_eps and u0 must share a grid".into(),
        ));
    }
    let grid = u_eps.grid.clone();
    let d = grid.d();
    let m = u_eps.m;
    let sp = grid.space_len();

    let mut w = u_eps.sub(u0)?;

    let evaluator = ScaledTorusEvaluator::new(corr.grid, &grid, eps);
    // K_eps(d_j u0) and d_i K_eps(d_j u0), each m-component
    let mut k_fields = Vec::with_capacity(d);
    let mut dk_fields = Vec::with_capacity(d * d);
    for j in 0..d {
        let gj = u0.derivative(j);
        k_fields.push(k_eps(&gj, eps, delta, kernel)?);
        let dkj = grad_k_eps(&gj, eps, delta, kernel)?;
        dk_fields.extend(dkj);
    }
    // dk_fields layout: (j, i) -> d_i K_eps(d_j u0)
    let dk = |i: usize, j: usize| &dk_fields[j * d + i];

    for alpha in 0..m {
        for j in 0..d {
            for beta in 0..m {
                let chi_e = evaluator.eval(corr.chi(j, alpha, beta));
                let kj = &k_fields[j];
                for lvl in 0..grid.n_time {
                    for idx in 0..sp {
                        let v = w.at(lvl, idx, alpha)
                            - eps * chi_e.at(lvl, idx, 0) * kj.at(lvl, idx, beta);
                        w.set(lvl, idx, alpha, v);
                    }
                }
                for i in 0..d {
                    let phi_e = evaluator.eval(dual.phi(d, i, j, alpha, beta));
                    let dkij = dk(i, j);
                    for lvl in 0..grid.n_time {
                        for idx in 0..sp {
                            let v = w.at(lvl, idx, alpha)
                                - eps * eps * phi_e.at(lvl, idx, 0) * dkij.at(lvl, idx, beta);
                            w.set(lvl, idx, alpha, v);
                        }
                    }
                }
            }
        }
    }

    Ok(ExpansionBundle {
        u_eps: u_eps.clone(),
        u0: u0.clone(),
        w_eps: w,
        eps,
        delta,
    })
}

/// A smooth compactly supported space-time bump with analytic derivatives,
/// used as a weak-form test field.
#[derive(Debug, Clone, Serialize)]
pub struct BumpField {
    /// Center, spatial coordinates then time.
    pub center: Vec<f64>,
    /// Support half-widths, spatial then time.
    pub width: Vec<f64>,
}

fn bump(r: f64) -> f64 {
    let r2 = r * r;
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

fn bump_deriv(r: f64) -> f64 {
    let r2 = r * r;
    if r2 < 1.0 {
        let om = 1.0 - r2;
        bump(r) * (-2.0 * r / (om * om))
    } else {
        0.0
    }
}

impl BumpField {
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        let mut v = 1.0;
        for (a, &xa) in x.iter().enumerate() {
            v *= bump((xa - self.center[a]) / self.width[a]);
            if v == 0.0 {
                return 0.0;
            }
        }
        let d = x.len();
        v * bump((t - self.center[d]) / self.width[d])
    }

    pub fn grad(&self, x: &[f64], t: f64, axis: usize) -> f64 {
        let d = x.len();
        let mut v = 1.0;
        for (a, &xa) in x.iter().enumerate() {
            let r = (xa - self.center[a]) / self.width[a];
            v *= if a == axis {
                bump_deriv(r) / self.width[a]
            } else {
                bump(r)
            };
            if v == 0.0 {
                return 0.0;
            }
        }
        v * bump((t - self.center[d]) / self.width[d])
    }

    pub fn dt(&self, x: &[f64], t: f64) -> f64 {
        let d = x.len();
        let mut v = 1.0;
        for (a, &xa) in x.iter().enumerate() {
            v *= bump((xa - self.center[a]) / self.width[a]);
            if v == 0.0 {
                return 0.0;
            }
        }
        let r = (t - self.center[d]) / self.width[d];
        v * bump_deriv(r) / self.width[d]
    }

    /// Support box strictly inside `Omega x (0, T)`?
    fn supported_inside(&self, grid: &SpaceTimeGrid) -> bool {
        let d = grid.d();
        for a in 0..d {
            if self.center[a] - self.width[a] <= 0.0
                || self.center[a] + self.width[a] >= grid.domain.lengths[a]
            {
                return false;
            }
        }
        self.center[d] - self.width[d] > 0.0 && self.center[d] + self.width[d] < grid.domain.time
    }
}

/// Tensor-product bumps with seeded random centers and widths, compactly
/// supported in the cylinder.
pub fn seeded_test_fields(
    domain: &crate::solver::DomainSpec,
    count: usize,
    seed: u64,
) -> Vec<BumpField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.d();
    (0..count)
        .map(|_| {
            let mut center = Vec::with_capacity(d + 1);
            let mut width = Vec::with_capacity(d + 1);
            for &l in &domain.lengths {
                let w = l * rng.gen_range(0.15..0.30);
                let c = rng.gen_range(w + 0.02 * l..l - w - 0.02 * l);
                center.push(c);
                width.push(w);
            }
            let wt = domain.time * rng.gen_range(0.15..0.30);
            let ct = rng.gen_range(wt + 0.02 * domain.time..domain.time - wt - 0.02 * domain.time);
            center.push(ct);
            width.push(wt);
            BumpField { center, width }
        })
        .collect()
}

/// Per-test-field outcome of the weak-form identity check.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityRow {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
}

/// Identity-check report: one row per test field plus grid metadata.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub eps: f64,
    pub delta: f64,
    pub grid_nodes: Vec<usize>,
    pub time_levels: usize,
    pub seed: Option<u64>,
    pub rows: Vec<IdentityRow>,
}

impl IdentityReport {
    pub fn max_rel_residual(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.rel_residual))
    }
}

/// Evaluate both sides of the weak-form error identity for each test field.
///
/// LHS: `-int w d_t psi + int A^eps grad w . grad psi` (the time pairing
/// integrated by parts against the compactly supported psi). RHS: the six
/// integrals with the corrector, dual-corrector and smoothed-gradient
/// factors. Gradients of `w_eps` use fourth-order interior differences; the
/// test fields vanish near the boundary where the stencil degrades.
pub fn verify_error_identity(
    bundle: &ExpansionBundle,
    a: &CoefficientField,
    corr: &CorrectorSet,
    dual: &DualCorrectorSet,
    kernel: &SmoothingKernel,
    psis: &[BumpField],
    seed: Option<u64>,
) -> Result<IdentityReport> {
    let grid = bundle.w_eps.grid.clone();
    let d = grid.d();
    let m = bundle.w_eps.m;
    let sp = grid.space_len();
    let eps = bundle.eps;
    let delta = bundle.delta;

    for (k, psi) in psis.iter().enumerate() {
        if psi.center.len() != d + 1 || psi.width.len() != d + 1 {
            return Err(Error::InvalidConfig(format!(
                "test field {k} has wrong dimension"
            )));
        }
        if !psi.supported_inside(&grid) {
            return Err(Error::TestFieldSupportViolation {
                index: k,
                value: 1.0,
                location: psi.center.clone(),
            });
        }
    }

    let a_hat = corr
        .a_hat
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("identity check requires a_hat".into()))?;

    // oscillating coefficient on the grid
    let mut a_eps = Vec::with_capacity(d * d * m * m);
    for i in 0..d {
        for j in 0..d {
            for al in 0..m {
                for be in 0..m {
                    a_eps.push(GridFunction::from_fn(grid.clone(), 1, |x, t, _| {
                        let y: Vec<f64> = x.iter().map(|&v| v / eps).collect();
                        a.eval(i, j, al, be, &y, t / (eps * eps))
                    }));
                }
            }
        }
    }
    let ae = |i: usize, j: usize, al: usize, be: usize| {
        &a_eps[((i * d + j) * m + al) * m + be]
    };

    // smoothed gradient fields
    let mut grad_u0 = Vec::with_capacity(d);
    for j in 0..d {
        grad_u0.push(bundle.u0.derivative(j));
    }
    let mut k_f = Vec::with_capacity(d);
    let mut dk_f = Vec::with_capacity(d * d);
    let mut dtk_f = Vec::with_capacity(d);
    let mut d2k_f = Vec::with_capacity(d * d * d);
    for j in 0..d {
        k_f.push(k_eps(&grad_u0[j], eps, delta, kernel)?);
        for i in 0..d {
            dk_f.push(k_eps_derivative(
                &grad_u0[j],
                eps,
                delta,
                kernel,
                KernelDerivative::Space(i),
            )?);
        }
        dtk_f.push(k_eps_derivative(
            &grad_u0[j],
            eps,
            delta,
            kernel,
            KernelDerivative::Time,
        )?);
        for p in 0..d {
            for q in 0..d {
                d2k_f.push(k_eps_derivative(
                    &grad_u0[j],
                    eps,
                    delta,
                    kernel,
                    KernelDerivative::SpaceSpace(p, q),
                )?);
            }
        }
    }
    let kf = |j: usize| &k_f[j];
    let dkf = |i: usize, j: usize| &dk_f[j * d + i];
    let dtkf = |j: usize| &dtk_f[j];
    let d2kf = |p: usize, q: usize, j: usize| &d2k_f[(j * d + p) * d + q];

    // periodic fields at (x/eps, t/eps^2)
    let evaluator = ScaledTorusEvaluator::new(corr.grid, &grid, eps);
    let cell_spec = Spectral::new(corr.grid);
    let mut chi_e = Vec::with_capacity(d * m * m);
    for kdir in 0..d {
        for al in 0..m {
            for be in 0..m {
                chi_e.push(evaluator.eval(corr.chi(kdir, al, be)));
            }
        }
    }
    let chie = |k: usize, al: usize, be: usize| &chi_e[(k * m + al) * m + be];
    let n_axes = d + 1;
    let mut phi_e = vec![None; n_axes * n_axes * d * m * m];
    for k in 0..n_axes {
        for i in 0..n_axes {
            for j in 0..d {
                for al in 0..m {
                    for be in 0..m {
                        // terms 3-6 touch phi_{kij} (k, i spatial), phi_{k(d+1)j},
                        // and phi_{(d+1)lk}; skip the unused (d+1)(d+1) slot
                        if k == d && i == d {
                            continue;
                        }
                        let f = evaluator.eval(dual.phi(k, i, j, al, be));
                        phi_e[(((k * n_axes + i) * d + j) * m + al) * m + be] = Some(f);
                    }
                }
            }
        }
    }
    let phie = |k: usize, i: usize, j: usize, al: usize, be: usize| {
        phi_e[(((k * n_axes + i) * d + j) * m + al) * m + be]
            .as_ref()
            .expect("phi component evaluated")
    };
    // (d_{y_j} phi_{(d+1) l k})^eps
    let mut dphi_e = Vec::with_capacity(d * d * d * m * m);
    for j in 0..d {
        for l in 0..d {
            for kdir in 0..d {
                for al in 0..m {
                    for be in 0..m {
                        let df = cell_spec.derivative_axis(dual.phi(d, l, kdir, al, be), j);
                        dphi_e.push(evaluator.eval(&df));
                    }
                }
            }
        }
    }
    let dphie = |j: usize, l: usize, kdir: usize, al: usize, be: usize| {
        &dphi_e[(((j * d + l) * d + kdir) * m + al) * m + be]
    };

    // fourth-order interior gradients of w
    let grad_w: Vec<GridFunction> = (0..d).map(|axis| derivative4(&bundle.w_eps, axis)).collect();

    let meas = grid.cell_measure() * grid.tau;
    let mut rows = Vec::with_capacity(psis.len());
    for psi in psis {
        // sample psi derivatives once per field
        let mut lhs_terms = vec![0.0; grid.n_time];
        let mut rhs_terms = vec![0.0; grid.n_time];
        let per_level: Vec<(f64, f64)> =
            crate::par::map_collect((0..grid.n_time).collect(), |lvl| {
                let t = grid.time(lvl);
                let tw = grid.time_weight(lvl);
                let mut lhs = 0.0;
                let mut rhs = 0.0;
                for idx in 0..sp {
                    let x = grid.spatial_point(idx);
                    let qw = grid.quad_weight(idx);
                    // psi is scalar; applied to every component
                    let dpsi_t = psi.dt(&x, t);
                    let dpsi: Vec<f64> = (0..d).map(|axis| psi.grad(&x, t, axis)).collect();
                    if dpsi_t == 0.0 && dpsi.iter().all(|v| *v == 0.0) && psi.value(&x, t) == 0.0 {
                        continue;
                    }
                    let w = qw;
                    for al in 0..m {
                        // LHS
                        lhs -= w * bundle.w_eps.at(lvl, idx, al) * dpsi_t;
                        for i in 0..d {
                            for j in 0..d {
                                for be in 0..m {
                                    lhs += w
                                        * ae(i, j, al, be).at(lvl, idx, 0)
                                        * grad_w[j].at(lvl, idx, be)
                                        * dpsi[i];
                                }
                            }
                        }
                        // RHS term 1: (a_hat - a^eps)(grad u0 - K(grad u0)) . grad psi
                        for i in 0..d {
                            for j in 0..d {
                                for be in 0..m {
                                    let gap = a_hat.entry(i, j, al, be)
                                        - ae(i, j, al, be).at(lvl, idx, 0);
                                    rhs += w
                                        * gap
                                        * (grad_u0[j].at(lvl, idx, be)
                                            - kf(j).at(lvl, idx, be))
                                        * dpsi[i];
                                }
                            }
                        }
                        // term 2: -eps a^eps chi^eps d_j K(d_k u0) . d_i psi
                        for i in 0..d {
                            for j in 0..d {
                                for kdir in 0..d {
                                    for be in 0..m {
                                        for ga in 0..m {
                                            rhs -= w
                                                * eps
                                                * ae(i, j, al, be).at(lvl, idx, 0)
                                                * chie(kdir, be, ga).at(lvl, idx, 0)
                                                * dkf(j, kdir).at(lvl, idx, ga)
                                                * dpsi[i];
                                        }
                                    }
                                }
                            }
                        }
                        // term 3: -eps phi_{kij} d_i K(d_j u0) . d_k psi
                        for kdir in 0..d {
                            for i in 0..d {
                                for j in 0..d {
                                    for be in 0..m {
                                        rhs -= w
                                            * eps
                                            * phie(kdir, i, j, al, be).at(lvl, idx, 0)
                                            * dkf(i, j).at(lvl, idx, be)
                                            * dpsi[kdir];
                                    }
                                }
                            }
                        }
                        // term 4: -eps^2 phi_{k(d+1)j} d_t K(d_j u0) . d_k psi
                        for kdir in 0..d {
                            for j in 0..d {
                                for be in 0..m {
                                    rhs -= w
                                        * eps
                                        * eps
                                        * phie(kdir, d, j, al, be).at(lvl, idx, 0)
                                        * dtkf(j).at(lvl, idx, be)
                                        * dpsi[kdir];
                                }
                            }
                        }
                        // term 5: +eps a^eps (d_j phi_{(d+1) l k})^eps d_l K(d_k u0) . d_i psi
                        for i in 0..d {
                            for j in 0..d {
                                for l in 0..d {
                                    for kdir in 0..d {
                                        for be in 0..m {
                                            for ga in 0..m {
                                                rhs += w
                                                    * eps
                                                    * ae(i, j, al, be).at(lvl, idx, 0)
                                                    * dphie(j, l, kdir, be, ga).at(lvl, idx, 0)
                                                    * dkf(l, kdir).at(lvl, idx, ga)
                                                    * dpsi[i];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        // term 6: +eps^2 a^eps phi_{(d+1) l k} d2_{j l} K(d_k u0) . d_i psi
                        for i in 0..d {
                            for j in 0..d {
                                for l in 0..d {
                                    for kdir in 0..d {
                                        for be in 0..m {
                                            for ga in 0..m {
                                                rhs += w
                                                    * eps
                                                    * eps
                                                    * ae(i, j, al, be).at(lvl, idx, 0)
                                                    * phie(d, l, kdir, be, ga).at(lvl, idx, 0)
                                                    * d2kf(j, l, kdir).at(lvl, idx, ga)
                                                    * dpsi[i];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (lhs * tw, rhs * tw)
            });
        for (lvl, (l, r)) in per_level.iter().enumerate() {
            lhs_terms[lvl] = *l;
            rhs_terms[lvl] = *r;
        }
        let lhs = crate::par::det_sum_slice(&lhs_terms) * meas;
        let rhs = crate::par::det_sum_slice(&rhs_terms) * meas;
        let abs = (lhs - rhs).abs();
        let rel = abs / lhs.abs().max(rhs.abs()).max(1e-300);
        rows.push(IdentityRow {
            lhs,
            rhs,
            abs_residual: abs,
            rel_residual: rel,
        });
    }

    Ok(IdentityReport {
        eps,
        delta,
        grid_nodes: grid.n.clone(),
        time_levels: grid.n_time,
        seed,
        rows,
    })
}

/// Fourth-order centered first derivative in the interior, falling back to
/// second-order stencils within two nodes of the boundary.
pub fn derivative4(u: &GridFunction, axis: usize) -> GridFunction {
    let grid = u.grid.clone();
    let m = u.m;
    let sp = grid.space_len();
    let h = grid.h[axis];
    let n_ax = grid.n[axis];
    let stride = match (grid.d(), axis) {
        (1, 0) => 1usize,
        (2, 0) => grid.n[1],
        (2, 1) => 1,
        _ => unreachable!(),
    };
    let values = &u.values;
    let mut out = GridFunction::zeros(grid.clone(), m);
    crate::par::fill_chunks(&mut out.values, sp * m, |lvl, slab| {
        let base = lvl * sp * m;
        for idx in 0..sp {
            let ia = match (grid.d(), axis) {
                (1, 0) => idx,
                (2, 0) => idx / grid.n[1],
                (2, 1) => idx % grid.n[1],
                _ => unreachable!(),
            };
            for c in 0..m {
                let v = |off: isize| {
                    values[base + (idx as isize + off * stride as isize) as usize * m + c]
                };
                let dv = if ia >= 2 && ia + 2 < n_ax {
                    (v(-2) - 8.0 * v(-1) + 8.0 * v(1) - v(2)) / (12.0 * h)
                } else if ia == 0 {
                    (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
                } else if ia == n_ax - 1 {
                    (3.0 * v(0) - 4.0 * v(-1) + v(-2)) / (2.0 * h)
                } else {
                    (v(1) - v(-1)) / (2.0 * h)
                };
                slab[idx * m + c] = dv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::solve_corrector_suite;
    use crate::solver::{DomainSpec, GridPolicy};
    use crate::torus::CellGrid;

    #[test]
    fn scaled_evaluator_matches_direct_interpolation() {
        let cell = CellGrid::new(1, 16, 8).unwrap();
        let spec = Spectral::new(cell);
        let f = TorusField::from_fn(cell, |p| {
            (2.0 * std::f64::consts::PI * p[0]).sin()
                + (2.0 * std::f64::consts::PI * (p[0] + p[1])).cos()
        });
        let grid = SpaceTimeGrid::with_policy(
            DomainSpec::interval(1.0, 0.25),
            0.125,
            GridPolicy::default(),
        )
        .unwrap();
        let ev = ScaledTorusEvaluator::new(cell, &grid, 0.125);
        let gf = ev.eval(&f);
        let spectrum = TorusSpectrum::from_field(&spec, &f);
        for lvl in [0, 7, grid.n_time - 1] {
            for idx in [0, 13, grid.n[0] - 1] {
                let x = grid.coord(0, idx);
                let t = grid.time(lvl);
                let y = wrap01(x / 0.125);
                let s = wrap01(t / (0.125 * 0.125));
                let want = spectrum.eval(&[y, s]);
                let got = gf.at(lvl, idx, 0);
                assert!((want - got).abs() < 1e-11, "({lvl},{idx}): {want} vs {got}");
            }
        }
    }

    #[test]
    fn phase_tables_collapse_on_aligned_grids() {
        let cell = CellGrid::new(1, 16, 8).unwrap();
        let grid = SpaceTimeGrid::with_policy(
            DomainSpec::interval(1.0, 0.25),
            0.0625,
            GridPolicy::default(),
        )
        .unwrap();
        let ev = ScaledTorusEvaluator::new(cell, &grid, 0.0625);
        assert_eq!(ev.phases[0].len(), 16);
        assert_eq!(ev.phases[1].len(), 8);
    }

    #[test]
    fn seeded_fields_are_deterministic_and_supported() {
        let domain = DomainSpec::interval(1.0, 0.5);
        let a = seeded_test_fields(&domain, 5, 42);
        let b = seeded_test_fields(&domain, 5, 42);
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.center, fb.center);
            assert_eq!(fa.width, fb.width);
        }
        for f in &a {
            assert_eq!(f.value(&[0.0], 0.25), 0.0);
            assert_eq!(f.value(&[1.0], 0.25), 0.0);
            assert_eq!(f.value(&[0.5], 0.0), 0.0);
            assert_eq!(f.value(&[0.5], 0.5), 0.0);
        }
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let f = BumpField {
            center: vec![0.5, 0.25],
            width: vec![0.3, 0.2],
        };
        let h = 1e-6;
        for (x, t) in [(0.45, 0.2), (0.6, 0.3), (0.35, 0.15)] {
            let gx = f.grad(&[x], t, 0);
            let fd = (f.value(&[x + h], t) - f.value(&[x - h], t)) / (2.0 * h);
            assert!((gx - fd).abs() < 1e-6, "grad {gx} vs fd {fd}");
            let gt = f.dt(&[x], t);
            let fd = (f.value(&[x], t + h) - f.value(&[x], t - h)) / (2.0 * h);
            assert!((gt - fd).abs() < 1e-6, "dt {gt} vs fd {fd}");
        }
    }

    #[test]
    fn constant_coefficient_w_is_bitwise_zero() {
        use crate::solver::{solve_ibvp, BcType, IBVPProblem, OperatorSpec, SolverOptions};
        use std::sync::Arc;
        let a = CoefficientField::constant(1, 1, 1.5);
        let cell = CellGrid::new(1, 16, 8).unwrap();
        let corr = solve_corrector_suite(&a, &cell, 1e-10).unwrap();
        let dual = crate::dual::solve_dual(corr.b.as_ref().unwrap()).unwrap();
        let eps = 0.125;
        let grid = SpaceTimeGrid::with_policy(
            DomainSpec::interval(1.0, 0.25),
            eps,
            GridPolicy::default(),
        )
        .unwrap();
        let source: crate::solver::SpaceTimeFn = Arc::new(|_x: &[f64], _t: f64, _c| 1.0);
        let initial: crate::solver::SpatialFn = Arc::new(|_x: &[f64], _c| 0.0);
        let u_eps = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Oscillating { a: &a, eps },
                source: source.clone(),
                initial: initial.clone(),
                bc: BcType::Dirichlet,
            },
            &grid,
            &SolverOptions::default(),
        )
        .unwrap();
        // same discrete operator for the homogenized solve
        let u0 = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Constant {
                    a_hat: crate::cell::HomogenizedMatrix {
                        d: 1,
                        m: 1,
                        data: vec![1.5],
                    },
                },
                source,
                initial,
                bc: BcType::Dirichlet,
            },
            &grid,
            &SolverOptions::default(),
        )
        .unwrap();
        let kernel = SmoothingKernel::standard_bump(1);
        let delta = 2.0 * eps * (1.0 + 1e-6);
        let bundle = build_w_eps(&u_eps, &u0, &corr, &dual, eps, delta, &kernel).unwrap();
        assert!(bundle.w_eps.values.iter().all(|v| *v == 0.0));
    }
}
