//! Finite-difference solvers for the oscillating and homogenized
//! initial-boundary value problems on `Omega x (0, T)`, plus the discrete
//! space-time norms.
//!
//! The time integrator is the theta-scheme in flux form (Crank-Nicolson by
//! default, backward Euler via `theta = 1`). Oscillating coefficients are
//! sampled at cell-face midpoints and at the intermediate time level, which
//! preserves the divergence form. In 1D each step is a block-tridiagonal
//! solve; in 2D (diagonal coefficient tensors) steps use BiCGStab with a
//! Jacobi preconditioner.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cell::HomogenizedMatrix;
use crate::coeff::CoefficientField;
use crate::error::{Error, Result};
use crate::krylov::bicgstab;

/// Interval `[0, L]` (d = 1) or axis-aligned rectangle (d = 2), with final
/// time `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lengths: Vec<f64>,
    pub time: f64,
}

impl DomainSpec {
    pub fn interval(length: f64, time: f64) -> Self {
        DomainSpec {
            lengths: vec![length],
            time,
        }
    }

    pub fn d(&self) -> usize {
        self.lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "domain must have 1 or 2 spatial axes, got {}",
                self.lengths.len()
            )));
        }
        if self.lengths.iter().any(|&l| l <= 0.0) || self.time <= 0.0 {
            return Err(Error::InvalidConfig(
                "domain side lengths and final time must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Distance to the lateral boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        let mut dist = f64::INFINITY;
        for (a, &l) in self.lengths.iter().enumerate() {
            dist = dist.min(x[a]).min(l - x[a]);
        }
        dist
    }
}

/// Grid-policy multipliers: `h = eps / space_mult`, `tau = eps^2 / time_mult`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub space_mult: f64,
    pub time_mult: f64,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            space_mult: 16.0,
            time_mult: 8.0,
        }
    }
}

impl GridPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.space_mult < 8.0 || self.time_mult < 8.0 {
            return Err(Error::InvalidConfig(format!(
                "policy multipliers must be >= 8, got ({}, {})",
                self.space_mult, self.time_mult
            )));
        }
        Ok(())
    }
}

/// Uniform node-centered space-time grid over `Omega x [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub domain: DomainSpec,
    /// Nodes per spatial axis, endpoints included.
    pub n: Vec<usize>,
    /// Time levels, `t = 0` and `t = T` included.
    pub n_time: usize,
    pub h: Vec<f64>,
    pub tau: f64,
}

impl SpaceTimeGrid {
    /// Grid with the given cell counts per axis and time-step count.
    pub fn uniform(domain: DomainSpec, cells: &[usize], steps: usize) -> Result<Self> {
        domain.validate()?;
        if cells.len() != domain.d() || cells.iter().any(|&c| c < 2) || steps < 2 {
            return Err(Error::InvalidConfig(
                "need >= 2 cells per axis and >= 2 time steps".into(),
            ));
        }
        let h: Vec<f64> = cells
            .iter()
            .zip(&domain.lengths)
            .map(|(&c, &l)| l / c as f64)
            .collect();
        let tau = domain.time / steps as f64;
        Ok(SpaceTimeGrid {
            n: cells.iter().map(|&c| c + 1).collect(),
            n_time: steps + 1,
            domain,
            h,
            tau,
        })
    }

    /// Grid resolving the oscillation scale `eps` under a policy.
    pub fn with_policy(domain: DomainSpec, eps: f64, policy: GridPolicy) -> Result<Self> {
        policy.validate()?;
        let cells: Vec<usize> = domain
            .lengths
            .iter()
            .map(|&l| (l * policy.space_mult / eps).round().max(2.0) as usize)
            .collect();
        let steps = (domain.time * policy.time_mult / (eps * eps)).round().max(2.0) as usize;
        SpaceTimeGrid::uniform(domain, &cells, steps)
    }

    pub fn d(&self) -> usize {
        self.n.len()
    }

    /// Nodes per time level.
    pub fn space_len(&self) -> usize {
        self.n.iter().product()
    }

    /// Total space-time node count.
    pub fn len(&self) -> usize {
        self.space_len() * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.h[axis]
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.tau
    }

    /// Spatial node coordinates from the flat spatial index.
    pub fn spatial_point(&self, idx: usize) -> Vec<f64> {
        match self.d() {
            1 => vec![self.coord(0, idx)],
            2 => {
                let n1 = self.n[1];
                vec![self.coord(0, idx / n1), self.coord(1, idx % n1)]
            }
            _ => unreachable!(),
        }
    }

    /// True if the spatial node lies on the lateral boundary.
    pub fn on_boundary(&self, idx: usize) -> bool {
        match self.d() {
            1 => idx == 0 || idx == self.n[0] - 1,
            2 => {
                let n1 = self.n[1];
                let (i, j) = (idx / n1, idx % n1);
                i == 0 || i == self.n[0] - 1 || j == 0 || j == n1 - 1
            }
            _ => unreachable!(),
        }
    }

    /// Trapezoid quadrature weight of a spatial node (product over axes).
    pub fn quad_weight(&self, idx: usize) -> f64 {
        let mut w = 1.0;
        match self.d() {
            1 => {
                if idx == 0 || idx == self.n[0] - 1 {
                    w = 0.5;
                }
            }
            2 => {
                let n1 = self.n[1];
                let (i, j) = (idx / n1, idx % n1);
                if i == 0 || i == self.n[0] - 1 {
                    w *= 0.5;
                }
                if j == 0 || j == n1 - 1 {
                    w *= 0.5;
                }
            }
            _ => unreachable!(),
        }
        w
    }

    /// Trapezoid weight of a time level.
    pub fn time_weight(&self, level: usize) -> f64 {
        if level == 0 || level == self.n_time - 1 {
            0.5
        } else {
            1.0
        }
    }

    /// Spatial cell measure `prod h`.
    pub fn cell_measure(&self) -> f64 {
        self.h.iter().product()
    }
}

/// Scalar or vector field sampled on a [`SpaceTimeGrid`], time level major,
/// component fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: SpaceTimeGrid,
    pub m: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: SpaceTimeGrid, m: usize) -> Self {
        let len = grid.len() * m;
        GridFunction {
            grid,
            m,
            values: vec![0.0; len],
        }
    }

    pub fn from_fn<F: Fn(&[f64], f64, usize) -> f64 + Sync>(
        grid: SpaceTimeGrid,
        m: usize,
        f: F,
    ) -> Self {
        let sp = grid.space_len();
        let mut out = GridFunction::zeros(grid, m);
        let grid = out.grid.clone();
        crate::par::fill_chunks(&mut out.values, sp * m, |lvl, slab| {
            let t = grid.time(lvl);
            for idx in 0..sp {
                let x = grid.spatial_point(idx);
                for c in 0..m {
                    slab[idx * m + c] = f(&x, t, c);
                }
            }
        });
        out
    }

    #[inline]
    pub fn at(&self, level: usize, spatial: usize, comp: usize) -> f64 {
        self.values[(level * self.grid.space_len() + spatial) * self.m + comp]
    }

    #[inline]
    pub fn set(&mut self, level: usize, spatial: usize, comp: usize, v: f64) {
        let sp = self.grid.space_len();
        self.values[(level * sp + spatial) * self.m + comp] = v;
    }

    pub fn level(&self, level: usize) -> &[f64] {
        let stride = self.grid.space_len() * self.m;
        &self.values[level * stride..(level + 1) * stride]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [f64] {
        let stride = self.grid.space_len() * self.m;
        &mut self.values[level * stride..(level + 1) * stride]
    }

    pub fn same_grid(&self, other: &GridFunction) -> bool {
        self.grid == other.grid && self.m == other.m
    }

    /// Componentwise difference, erroring on mismatched grids.
    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch("sub of fields on different grids".into()));
        }
        Ok(GridFunction {
            grid: self.grid.clone(),
            m: self.m,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Spatial derivative along `axis`: centered in the interior, one-sided
    /// second order at the boundary, level by level.
    pub fn derivative(&self, axis: usize) -> GridFunction {
        let grid = self.grid.clone();
        let m = self.m;
        let sp = grid.space_len();
        let h = grid.h[axis];
        let n_ax = grid.n[axis];
        let stride = match (grid.d(), axis) {
            (1, 0) => 1,
            (2, 0) => grid.n[1],
            (2, 1) => 1,
            _ => unreachable!(),
        };
        let mut out = GridFunction::zeros(grid.clone(), m);
        let values = &self.values;
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
                    let dv = if ia == 0 {
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

    /// Second spatial derivative along one axis, centered with one-sided
    /// second-order closures at the boundary.
    pub fn second_derivative(&self, axis: usize) -> GridFunction {
        let grid = self.grid.clone();
        let m = self.m;
        let sp = grid.space_len();
        let h2 = grid.h[axis] * grid.h[axis];
        let n_ax = grid.n[axis];
        let stride = match (grid.d(), axis) {
            (1, 0) => 1,
            (2, 0) => grid.n[1],
            (2, 1) => 1,
            _ => unreachable!(),
        };
        let mut out = GridFunction::zeros(grid.clone(), m);
        let values = &self.values;
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
                    let dv = if ia == 0 {
                        (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / h2
                    } else if ia == n_ax - 1 {
                        (2.0 * v(0) - 5.0 * v(-1) + 4.0 * v(-2) - v(-3)) / h2
                    } else {
                        (v(1) - 2.0 * v(0) + v(-1)) / h2
                    };
                    slab[idx * m + c] = dv;
                }
            }
        });
        out
    }
}

// --- norms -----------------------------------------------------------------

fn weighted_sq_integral(u: &GridFunction) -> f64 {
    let grid = &u.grid;
    let sp = grid.space_len();
    let m = u.m;
    let meas = grid.cell_measure() * grid.tau;
    let per_level: Vec<f64> = crate::par::map_collect((0..grid.n_time).collect(), |lvl| {
        let slab = u.level(lvl);
        let mut acc = 0.0;
        for idx in 0..sp {
            let w = grid.quad_weight(idx);
            for c in 0..m {
                let v = slab[idx * m + c];
                acc += w * v * v;
            }
        }
        acc * grid.time_weight(lvl)
    });
    crate::par::det_sum_slice(&per_level) * meas
}

/// `|| u ||_{L2(Omega_T)}` by composite trapezoid quadrature.
pub fn norm_l2_spacetime(u: &GridFunction) -> f64 {
    weighted_sq_integral(u).sqrt()
}

/// `|| grad u ||_{L2(Omega_T)}` (spatial gradient only).
pub fn norm_grad_l2(u: &GridFunction) -> f64 {
    let mut acc = 0.0;
    for axis in 0..u.grid.d() {
        acc += weighted_sq_integral(&u.derivative(axis));
    }
    acc.sqrt()
}

/// Full `|| u ||_{L2(0,T; H1)}`.
pub fn norm_l2_h1(u: &GridFunction) -> f64 {
    let mut acc = weighted_sq_integral(u);
    for axis in 0..u.grid.d() {
        acc += weighted_sq_integral(&u.derivative(axis));
    }
    acc.sqrt()
}

/// Full `|| u ||_{L2(0,T; H2)}` with all second partials (mixed ones via
/// composed first derivatives).
pub fn norm_l2_h2(u: &GridFunction) -> f64 {
    let d = u.grid.d();
    let mut acc = weighted_sq_integral(u);
    let mut grads = Vec::with_capacity(d);
    for axis in 0..d {
        let g = u.derivative(axis);
        acc += weighted_sq_integral(&g);
        grads.push(g);
    }
    for a in 0..d {
        acc += weighted_sq_integral(&u.second_derivative(a));
        for b in a + 1..d {
            // mixed partial counted twice (d_ab and d_ba)
            acc += 2.0 * weighted_sq_integral(&grads[a].derivative(b));
        }
    }
    acc.sqrt()
}

/// The boundary-layer region `Omega_{T,delta}`: a `delta`-collar of the
/// lateral boundary for all times, plus `delta^2`-thick initial and final
/// time slabs.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryLayerRegion {
    pub delta: f64,
}

impl BoundaryLayerRegion {
    pub fn contains(&self, domain: &DomainSpec, x: &[f64], t: f64) -> bool {
        domain.boundary_distance(x) <= self.delta
            || t <= self.delta * self.delta
            || t >= domain.time - self.delta * self.delta
    }
}

/// L2 norm of `u` restricted to `Omega_{T,delta}`.
pub fn layer_norm(u: &GridFunction, region: &BoundaryLayerRegion) -> f64 {
    let grid = &u.grid;
    let sp = grid.space_len();
    let m = u.m;
    let meas = grid.cell_measure() * grid.tau;
    let per_level: Vec<f64> = crate::par::map_collect((0..grid.n_time).collect(), |lvl| {
        let t = grid.time(lvl);
        let slab = u.level(lvl);
        let mut acc = 0.0;
        for idx in 0..sp {
            let x = grid.spatial_point(idx);
            if !region.contains(&grid.domain, &x, t) {
                continue;
            }
            let w = grid.quad_weight(idx);
            for c in 0..m {
                let v = slab[idx * m + c];
                acc += w * v * v;
            }
        }
        acc * grid.time_weight(lvl)
    });
    (crate::par::det_sum_slice(&per_level) * meas).sqrt()
}

/// The windowed-gradient supremum of Theorem-style diagnostics:
/// `sup_{eps^2 < t < T} ( eps^{-1} int_{t-eps^2}^t int_Omega |grad u|^2 )^{1/2}`.
pub fn boundary_layer_sup(u0: &GridFunction, eps: f64) -> Result<f64> {
    let grid = &u0.grid;
    let window = eps * eps;
    let levels_per_window = (window / grid.tau).round() as usize;
    if levels_per_window < 2 {
        return Err(Error::WindowTooCoarse {
            levels: levels_per_window,
        });
    }
    // spatial integral of |grad u|^2 per level
    let sp = grid.space_len();
    let m = u0.m;
    let mut g2 = vec![0.0; grid.n_time];
    let grads: Vec<GridFunction> = (0..grid.d()).map(|a| u0.derivative(a)).collect();
    for (lvl, g2v) in g2.iter_mut().enumerate() {
        let mut acc = 0.0;
        for idx in 0..sp {
            let w = grid.quad_weight(idx);
            for g in &grads {
                for c in 0..m {
                    let v = g.at(lvl, idx, c);
                    acc += w * v * v;
                }
            }
        }
        *g2v = acc * grid.cell_measure();
    }
    // trapezoid over sliding windows of length eps^2
    let k = levels_per_window;
    let mut sup: f64 = 0.0;
    for hi in k..grid.n_time {
        let mut window_int = 0.0;
        for l in hi - k..=hi {
            let w = if l == hi - k || l == hi { 0.5 } else { 1.0 };
            window_int += w * g2[l];
        }
        window_int *= grid.tau;
        sup = sup.max((window_int / eps).sqrt());
    }
    Ok(sup)
}

// --- IBVP solver -------------------------------------------------------------

/// Boundary condition type; boundary data is zero in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcType {
    Dirichlet,
    Neumann,
}

/// Either the oscillating operator at scale `eps` or a constant-coefficient
/// operator (the homogenized one).
pub enum OperatorSpec<'a> {
    Oscillating { a: &'a CoefficientField, eps: f64 },
    Constant { a_hat: HomogenizedMatrix },
}

impl OperatorSpec<'_> {
    fn m(&self) -> usize {
        match self {
            OperatorSpec::Oscillating { a, .. } => a.m,
            OperatorSpec::Constant { a_hat } => a_hat.m,
        }
    }

    /// Diagonal-tensor face block `a_{aa}^{alpha beta}` at a face midpoint.
    fn face_block(&self, axis: usize, x: &[f64], t: f64, block: &mut [f64]) {
        match self {
            OperatorSpec::Oscillating { a, eps } => {
                let y: Vec<f64> = x.iter().map(|&v| v / eps).collect();
                let s = t / (eps * eps);
                let m = a.m;
                for al in 0..m {
                    for be in 0..m {
                        block[al * m + be] = a.eval(axis, axis, al, be, &y, s);
                    }
                }
            }
            OperatorSpec::Constant { a_hat } => {
                let m = a_hat.m;
                for al in 0..m {
                    for be in 0..m {
                        block[al * m + be] = a_hat.entry(axis, axis, al, be);
                    }
                }
            }
        }
    }
}

pub type SpaceTimeFn = Arc<dyn Fn(&[f64], f64, usize) -> f64 + Send + Sync>;
pub type SpatialFn = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// One oscillating or homogenized initial-boundary value problem with zero
/// lateral boundary data.
pub struct IBVPProblem<'a> {
    pub op: OperatorSpec<'a>,
    pub source: SpaceTimeFn,
    pub initial: SpatialFn,
    pub bc: BcType,
}

/// Time-integrator options. `theta = 0.5` is Crank-Nicolson, `theta = 1.0`
/// backward Euler.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub theta: f64,
    pub step_rtol: f64,
    pub max_step_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            theta: 0.5,
            step_rtol: 1e-10,
            max_step_iters: 2000,
        }
    }
}

/// March the theta-scheme over the grid and return the full space-time field.
pub fn solve_ibvp(
    problem: &IBVPProblem,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
) -> Result<GridFunction> {
    let m = problem.op.m();
    if let OperatorSpec::Oscillating { eps, a } = &problem.op {
        if a.d != grid.d() {
            return Err(Error::GridMismatch(format!(
                "coefficient dimension {} vs grid dimension {}",
                a.d,
                grid.d()
            )));
        }
        let slack = 1.0 + 1e-9;
        for (axis, &h) in grid.h.iter().enumerate() {
            if h > eps / 8.0 * slack {
                return Err(Error::PolicyViolation(format!(
                    "h[{axis}] = {h:.3e} does not resolve eps = {eps:.3e} (need h <= eps/8)"
                )));
            }
        }
        if grid.tau > eps * eps / 8.0 * slack {
            return Err(Error::PolicyViolation(format!(
                "tau = {:.3e} does not resolve eps^2 = {:.3e} (need tau <= eps^2/8)",
                grid.tau,
                eps * eps
            )));
        }
    }

    let mut u = GridFunction::zeros(grid.clone(), m);
    // initial data, with Dirichlet rows pinned to zero
    let sp = grid.space_len();
    for idx in 0..sp {
        let x = grid.spatial_point(idx);
        for c in 0..m {
            let v = if problem.bc == BcType::Dirichlet && grid.on_boundary(idx) {
                0.0
            } else {
                (problem.initial)(&x, c)
            };
            u.set(0, idx, c, v);
        }
    }

    match grid.d() {
        1 => march_1d(problem, grid, opts, &mut u)?,
        2 => march_2d(problem, grid, opts, &mut u)?,
        _ => unreachable!(),
    }
    if !u.is_finite() {
        return Err(Error::StepSolveFailure {
            step: grid.n_time - 1,
            detail: "non-finite values in solution".into(),
        });
    }
    Ok(u)
}

// Small dense m x m solve with partial pivoting, used by the block-Thomas
// sweep. `a` is row-major and is destroyed.
fn solve_small(a: &mut [f64], rhs: &mut [f64], m: usize, ncols: usize) -> Result<()> {
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if a[piv * m + col].abs() < 1e-300 {
            return Err(Error::StepSolveFailure {
                step: 0,
                detail: "singular block pivot".into(),
            });
        }
        if piv != col {
            for c in 0..m {
                a.swap(col * m + c, piv * m + c);
            }
            for c in 0..ncols {
                rhs.swap(col * ncols + c, piv * ncols + c);
            }
        }
        let inv = 1.0 / a[col * m + col];
        for r in col + 1..m {
            let f = a[r * m + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..m {
                a[r * m + c] -= f * a[col * m + c];
            }
            for c in 0..ncols {
                rhs[r * ncols + c] -= f * rhs[col * ncols + c];
            }
        }
    }
    for col in (0..m).rev() {
        let inv = 1.0 / a[col * m + col];
        for c in 0..ncols {
            let mut acc = rhs[col * ncols + c];
            for k in col + 1..m {
                acc -= a[col * m + k] * rhs[k * ncols + c];
            }
            rhs[col * ncols + c] = acc * inv;
        }
    }
    Ok(())
}

fn march_1d(
    problem: &IBVPProblem,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
    u: &mut GridFunction,
) -> Result<()> {
    let m = problem.op.m();
    let n = grid.n[0];
    let h = grid.h[0];
    let tau = grid.tau;
    let theta = opts.theta;
    let mm = m * m;
    let dirichlet = problem.bc == BcType::Dirichlet;

    let mut faces = vec![0.0; (n - 1) * mm];
    let mut lower = vec![0.0; n * mm];
    let mut diag = vec![0.0; n * mm];
    let mut upper = vec![0.0; n * mm];
    let mut rhs = vec![0.0; n * m];
    let mut block = vec![0.0; mm];
    let mut next = vec![0.0; n * m];

    for step in 0..grid.n_time - 1 {
        let t_eval = grid.time(step) + theta * tau;
        // face coefficients at the intermediate level
        for f in 0..n - 1 {
            let x = [(f as f64 + 0.5) * h];
            problem.op.face_block(0, &x, t_eval, &mut block);
            faces[f * mm..(f + 1) * mm].copy_from_slice(&block);
        }

        let r = tau / (h * h);
        let un = u.level(step).to_vec();
        // explicit part: u^n + tau (1-theta) D u^n + tau F
        for i in 0..n {
            let x = [grid.coord(0, i)];
            for al in 0..m {
                let mut acc = un[i * m + al] + tau * (problem.source)(&x, t_eval, al);
                let expl = tau * (1.0 - theta) / (h * h);
                if i > 0 && i < n - 1 {
                    for be in 0..m {
                        let ap = faces[i * mm + al * m + be];
                        let am = faces[(i - 1) * mm + al * m + be];
                        acc += expl
                            * (ap * (un[(i + 1) * m + be] - un[i * m + be])
                                - am * (un[i * m + be] - un[(i - 1) * m + be]));
                    }
                } else if !dirichlet {
                    // half-cell flux closure at a zero-flux boundary
                    if i == 0 {
                        for be in 0..m {
                            let ap = faces[al * m + be];
                            acc += 2.0 * expl * ap * (un[m + be] - un[be]);
                        }
                    } else {
                        for be in 0..m {
                            let am = faces[(n - 2) * mm + al * m + be];
                            acc -= 2.0 * expl * am * (un[(n - 1) * m + be] - un[(n - 2) * m + be]);
                        }
                    }
                }
                rhs[i * m + al] = acc;
            }
        }

        // implicit blocks
        lower.fill(0.0);
        upper.fill(0.0);
        diag.fill(0.0);
        let imp = theta * r;
        for i in 0..n {
            if dirichlet && (i == 0 || i == n - 1) {
                for al in 0..m {
                    diag[i * mm + al * m + al] = 1.0;
                    rhs[i * m + al] = 0.0;
                }
                continue;
            }
            for al in 0..m {
                diag[i * mm + al * m + al] = 1.0;
            }
            if i > 0 && i < n - 1 {
                for al in 0..m {
                    for be in 0..m {
                        let ap = faces[i * mm + al * m + be];
                        let am = faces[(i - 1) * mm + al * m + be];
                        lower[i * mm + al * m + be] = -imp * am;
                        upper[i * mm + al * m + be] = -imp * ap;
                        diag[i * mm + al * m + be] += imp * (ap + am);
                    }
                }
            } else if i == 0 {
                for al in 0..m {
                    for be in 0..m {
                        let ap = faces[al * m + be];
                        upper[al * m + be] = -2.0 * imp * ap;
                        diag[al * m + be] += 2.0 * imp * ap;
                    }
                }
            } else {
                for al in 0..m {
                    for be in 0..m {
                        let am = faces[(n - 2) * mm + al * m + be];
                        lower[i * mm + al * m + be] = -2.0 * imp * am;
                        diag[i * mm + al * m + be] += 2.0 * imp * am;
                    }
                }
            }
        }

        // block-Thomas forward sweep
        for i in 1..n {
            // factor = lower_i * diag_{i-1}^{-1}
            let mut dprev = diag[(i - 1) * mm..i * mm].to_vec();
            // solve dprev^T X^T = ... -> easier: compute diag_{i-1}^{-1} upper_{i-1} and
            // diag_{i-1}^{-1} rhs_{i-1} once
            let mut aug = vec![0.0; m * (m + 1)];
            for r_ in 0..m {
                for c in 0..m {
                    aug[r_ * (m + 1) + c] = upper[(i - 1) * mm + r_ * m + c];
                }
                aug[r_ * (m + 1) + m] = rhs[(i - 1) * m + r_];
            }
            solve_small(&mut dprev, &mut aug, m, m + 1).map_err(|_| Error::StepSolveFailure {
                step,
                detail: "singular tridiagonal pivot".into(),
            })?;
            // diag_i -= lower_i * (D^{-1} upper), rhs_i -= lower_i * (D^{-1} rhs)
            for r_ in 0..m {
                for c in 0..m {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += lower[i * mm + r_ * m + k] * aug[k * (m + 1) + c];
                    }
                    diag[i * mm + r_ * m + c] -= acc;
                }
                let mut acc = 0.0;
                for k in 0..m {
                    acc += lower[i * mm + r_ * m + k] * aug[k * (m + 1) + m];
                }
                rhs[i * m + r_] -= acc;
            }
        }
        // back substitution
        for i in (0..n).rev() {
            let mut local = rhs[i * m..(i + 1) * m].to_vec();
            if i < n - 1 {
                for r_ in 0..m {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += upper[i * mm + r_ * m + k] * next[(i + 1) * m + k];
                    }
                    local[r_] -= acc;
                }
            }
            let mut d = diag[i * mm..(i + 1) * mm].to_vec();
            solve_small(&mut d, &mut local, m, 1).map_err(|_| Error::StepSolveFailure {
                step,
                detail: "singular tridiagonal pivot".into(),
            })?;
            next[i * m..(i + 1) * m].copy_from_slice(&local);
        }
        u.level_mut(step + 1).copy_from_slice(&next);
    }
    Ok(())
}

fn march_2d(
    problem: &IBVPProblem,
    grid: &SpaceTimeGrid,
    opts: &SolverOptions,
    u: &mut GridFunction,
) -> Result<()> {
    let m = problem.op.m();
    let sp = grid.space_len();
    let (n0, n1) = (grid.n[0], grid.n[1]);
    let tau = grid.tau;
    let theta = opts.theta;
    let mm = m * m;
    let dirichlet = problem.bc == BcType::Dirichlet;

    // reject genuinely anisotropic tensors: the 5-point flux form has no
    // cross-derivative faces
    if let OperatorSpec::Oscillating { a, .. } = &problem.op {
        for probe in 0..8 {
            let y = [0.1 + 0.11 * probe as f64, 0.23 + 0.07 * probe as f64];
            for al in 0..m {
                for be in 0..m {
                    if a.eval(0, 1, al, be, &y, 0.3).abs() > 1e-14
                        || a.eval(1, 0, al, be, &y, 0.3).abs() > 1e-14
                    {
                        return Err(Error::InvalidConfig(
                            "2D solver supports diagonal coefficient tensors only".into(),
                        ));
                    }
                }
            }
        }
    }

    let n_faces0 = (n0 - 1) * n1;
    let n_faces1 = n0 * (n1 - 1);
    let mut faces0 = vec![0.0; n_faces0 * mm];
    let mut faces1 = vec![0.0; n_faces1 * mm];
    let mut block = vec![0.0; mm];

    // matrix-free apply of v -> v - tau*theta*D v (Dirichlet rows pinned)
    let apply_op = |v: &[f64], faces0: &[f64], faces1: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; sp * m];
        let r0 = tau * theta / (grid.h[0] * grid.h[0]);
        let r1 = tau * theta / (grid.h[1] * grid.h[1]);
        for i in 0..n0 {
            for j in 0..n1 {
                let idx = i * n1 + j;
                if dirichlet && grid.on_boundary(idx) {
                    for al in 0..m {
                        out[idx * m + al] = v[idx * m + al];
                    }
                    continue;
                }
                for al in 0..m {
                    let mut acc = v[idx * m + al];
                    // axis 0
                    for be in 0..m {
                        let vc = v[idx * m + be];
                        if i > 0 && i < n0 - 1 {
                            let ap = faces0[(i * n1 + j) * mm + al * m + be];
                            let am = faces0[((i - 1) * n1 + j) * mm + al * m + be];
                            acc -= r0
                                * (ap * (v[(idx + n1) * m + be] - vc)
                                    - am * (vc - v[(idx - n1) * m + be]));
                        } else if i == 0 {
                            let ap = faces0[j * mm + al * m + be];
                            acc -= 2.0 * r0 * ap * (v[(idx + n1) * m + be] - vc);
                        } else {
                            let am = faces0[((n0 - 2) * n1 + j) * mm + al * m + be];
                            acc += 2.0 * r0 * am * (vc - v[(idx - n1) * m + be]);
                        }
                        // axis 1
                        if j > 0 && j < n1 - 1 {
                            let ap = faces1[(i * (n1 - 1) + j) * mm + al * m + be];
                            let am = faces1[(i * (n1 - 1) + j - 1) * mm + al * m + be];
                            acc -= r1
                                * (ap * (v[(idx + 1) * m + be] - vc)
                                    - am * (vc - v[(idx - 1) * m + be]));
                        } else if j == 0 {
                            let ap = faces1[(i * (n1 - 1)) * mm + al * m + be];
                            acc -= 2.0 * r1 * ap * (v[(idx + 1) * m + be] - vc);
                        } else {
                            let am = faces1[(i * (n1 - 1) + n1 - 2) * mm + al * m + be];
                            acc += 2.0 * r1 * am * (vc - v[(idx - 1) * m + be]);
                        }
                    }
                    out[idx * m + al] = acc;
                }
            }
        }
        out
    };

    for step in 0..grid.n_time - 1 {
        let t_eval = grid.time(step) + theta * tau;
        for i in 0..n0 - 1 {
            for j in 0..n1 {
                let x = [(i as f64 + 0.5) * grid.h[0], grid.coord(1, j)];
                problem.op.face_block(0, &x, t_eval, &mut block);
                faces0[(i * n1 + j) * mm..(i * n1 + j + 1) * mm].copy_from_slice(&block);
            }
        }
        for i in 0..n0 {
            for j in 0..n1 - 1 {
                let x = [grid.coord(0, i), (j as f64 + 0.5) * grid.h[1]];
                problem.op.face_block(1, &x, t_eval, &mut block);
                faces1[(i * (n1 - 1) + j) * mm..(i * (n1 - 1) + j + 1) * mm]
                    .copy_from_slice(&block);
            }
        }

        // rhs = u^n + tau (1-theta) D u^n + tau F, Dirichlet rows zero
        let un = u.level(step).to_vec();
        let expl_fields = {
            // reuse apply with theta' = -(1-theta)/theta to get u + tau(1-theta) D u
            // more simply: compute D u^n directly by calling apply with theta=1
            // and recovering: apply gives v - tau*theta*Dv => Dv = (v - apply(v))/(tau*theta)
            let av = apply_op(&un, &faces0, &faces1);
            let mut rhs = vec![0.0; sp * m];
            for i in 0..sp * m {
                let dv = (un[i] - av[i]) / (tau * theta);
                rhs[i] = un[i] + tau * (1.0 - theta) * dv;
            }
            rhs
        };
        let mut rhs = expl_fields;
        for idx in 0..sp {
            let x = grid.spatial_point(idx);
            if dirichlet && grid.on_boundary(idx) {
                for al in 0..m {
                    rhs[idx * m + al] = 0.0;
                }
                continue;
            }
            for al in 0..m {
                rhs[idx * m + al] += tau * (problem.source)(&x, t_eval, al);
            }
        }

        // Jacobi preconditioner from the diagonal of the implicit operator
        let mut inv_diag = vec![1.0; sp * m];
        {
            let r0 = tau * theta / (grid.h[0] * grid.h[0]);
            let r1 = tau * theta / (grid.h[1] * grid.h[1]);
            for i in 0..n0 {
                for j in 0..n1 {
                    let idx = i * n1 + j;
                    if dirichlet && grid.on_boundary(idx) {
                        continue;
                    }
                    for al in 0..m {
                        let mut dv = 1.0;
                        if i > 0 && i < n0 - 1 {
                            dv += r0
                                * (faces0[(i * n1 + j) * mm + al * m + al]
                                    + faces0[((i - 1) * n1 + j) * mm + al * m + al]);
                        } else if i == 0 {
                            dv += 2.0 * r0 * faces0[j * mm + al * m + al];
                        } else {
                            dv += 2.0 * r0 * faces0[((n0 - 2) * n1 + j) * mm + al * m + al];
                        }
                        if j > 0 && j < n1 - 1 {
                            dv += r1
                                * (faces1[(i * (n1 - 1) + j) * mm + al * m + al]
                                    + faces1[(i * (n1 - 1) + j - 1) * mm + al * m + al]);
                        } else if j == 0 {
                            dv += 2.0 * r1 * faces1[(i * (n1 - 1)) * mm + al * m + al];
                        } else {
                            dv += 2.0 * r1 * faces1[(i * (n1 - 1) + n1 - 2) * mm + al * m + al];
                        }
                        inv_diag[idx * m + al] = 1.0 / dv;
                    }
                }
            }
        }

        let mut next = un;
        let out = bicgstab(
            |v| apply_op(v, &faces0, &faces1),
            &inv_diag,
            &rhs,
            &mut next,
            opts.step_rtol,
            opts.max_step_iters,
        );
        if !out.converged {
            return Err(Error::StepSolveFailure {
                step,
                detail: format!(
                    "BiCGStab stalled: residual {:.3e} after {} iterations",
                    out.residual, out.iterations
                ),
            });
        }
        u.level_mut(step + 1).copy_from_slice(&next);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn heat_grid(cells: usize, steps: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.1), &[cells], steps).unwrap()
    }

    fn max_err_vs(u: &GridFunction, exact: impl Fn(&[f64], f64) -> f64) -> f64 {
        let mut worst = 0.0f64;
        for lvl in 0..u.grid.n_time {
            let t = u.grid.time(lvl);
            for idx in 0..u.grid.space_len() {
                let x = u.grid.spatial_point(idx);
                worst = worst.max((u.at(lvl, idx, 0) - exact(&x, t)).abs());
            }
        }
        worst
    }

    #[test]
    fn heat_equation_separation_of_variables() {
        // u_t = u_xx, u(x,0) = sin(pi x), Dirichlet: u = e^{-pi^2 t} sin(pi x)
        let a_hat = HomogenizedMatrix {
            d: 1,
            m: 1,
            data: vec![1.0],
        };
        let problem = IBVPProblem {
            op: OperatorSpec::Constant { a_hat },
            source: Arc::new(|_x, _t, _c| 0.0),
            initial: Arc::new(|x: &[f64], _c| (PI * x[0]).sin()),
            bc: BcType::Dirichlet,
        };
        let mut errs = Vec::new();
        for (cells, steps) in [(16, 20), (32, 40), (64, 80)] {
            let grid = heat_grid(cells, steps);
            let u = solve_ibvp(&problem, &grid, &SolverOptions::default()).unwrap();
            errs.push(max_err_vs(&u, |x, t| (-PI * PI * t).exp() * (PI * x[0]).sin()));
        }
        // second order in (h, tau)
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!((r1 - 2.0).abs() < 0.3, "observed order {r1}");
        assert!((r2 - 2.0).abs() < 0.3, "observed order {r2}");
    }

    #[test]
    fn neumann_conserves_mass_without_source() {
        let a_hat = HomogenizedMatrix {
            d: 1,
            m: 1,
            data: vec![0.7],
        };
        let problem = IBVPProblem {
            op: OperatorSpec::Constant { a_hat },
            source: Arc::new(|_x, _t, _c| 0.0),
            initial: Arc::new(|x: &[f64], _c| (2.0 * PI * x[0]).cos() + 1.0),
            bc: BcType::Neumann,
        };
        let grid = heat_grid(64, 100);
        let u = solve_ibvp(&problem, &grid, &SolverOptions::default()).unwrap();
        // FV mass: trapezoid of u over Omega is invariant under zero-flux bc
        let mass = |lvl: usize| -> f64 {
            let mut acc = 0.0;
            for idx in 0..grid.space_len() {
                acc += grid.quad_weight(idx) * u.at(lvl, idx, 0);
            }
            acc * grid.h[0]
        };
        let m0 = mass(0);
        let mt = mass(grid.n_time - 1);
        assert!((m0 - mt).abs() < 1e-12, "mass drift {}", (m0 - mt).abs());
    }

    #[test]
    fn dirichlet_energy_decays_without_source() {
        let a_hat = HomogenizedMatrix {
            d: 1,
            m: 1,
            data: vec![1.3],
        };
        let problem = IBVPProblem {
            op: OperatorSpec::Constant { a_hat },
            source: Arc::new(|_x, _t, _c| 0.0),
            initial: Arc::new(|x: &[f64], _c| (PI * x[0]).sin() + 0.3 * (3.0 * PI * x[0]).sin()),
            bc: BcType::Dirichlet,
        };
        let grid = heat_grid(32, 50);
        let u = solve_ibvp(&problem, &grid, &SolverOptions::default()).unwrap();
        let l2 = |lvl: usize| -> f64 {
            let mut acc = 0.0;
            for idx in 0..grid.space_len() {
                let v = u.at(lvl, idx, 0);
                acc += grid.quad_weight(idx) * v * v;
            }
            (acc * grid.h[0]).sqrt()
        };
        let mut prev = l2(0);
        for lvl in 1..grid.n_time {
            let cur = l2(lvl);
            assert!(cur <= prev + 1e-14, "energy grew at level {lvl}");
            prev = cur;
        }
    }

    #[test]
    fn norms_match_closed_forms() {
        let grid = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 1.0), &[200], 200).unwrap();
        let one = GridFunction::from_fn(grid.clone(), 1, |_x, _t, _c| 1.0);
        assert!((norm_l2_spacetime(&one) - 1.0).abs() < 1e-12);
        let sine = GridFunction::from_fn(grid.clone(), 1, |x, _t, _c| (PI * x[0]).sin());
        assert!((norm_l2_spacetime(&sine) - (0.5f64).sqrt()).abs() < 1e-5);
        let zero = GridFunction::zeros(grid, 1);
        assert_eq!(norm_l2_spacetime(&zero), 0.0);
    }

    #[test]
    fn windowed_sup_of_linear_profile() {
        // u0 = x on (0,1): the window integral is eps^2, so the sup is sqrt(eps)
        let grid = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.5), &[64], 512).unwrap();
        let u0 = GridFunction::from_fn(grid, 1, |x, _t, _c| x[0]);
        let eps = 0.125;
        let sup = boundary_layer_sup(&u0, eps).unwrap();
        assert!((sup - eps.sqrt()).abs() < 1e-10, "sup {sup}");
        // too-coarse window errors
        let coarse = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.5), &[16], 8).unwrap();
        let u0 = GridFunction::from_fn(coarse, 1, |x, _t, _c| x[0]);
        assert!(matches!(
            boundary_layer_sup(&u0, 0.05),
            Err(Error::WindowTooCoarse { .. })
        ));
    }

    #[test]
    fn layer_norm_covers_whole_domain_for_large_delta() {
        let grid = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 1.0), &[50], 50).unwrap();
        let one = GridFunction::from_fn(grid, 1, |_x, _t, _c| 1.0);
        let full = layer_norm(&one, &BoundaryLayerRegion { delta: 2.0 });
        assert!((full - norm_l2_spacetime(&one)).abs() < 1e-12);
        assert_eq!(layer_norm(&GridFunction::zeros(one.grid.clone(), 1), &BoundaryLayerRegion { delta: 0.1 }), 0.0);
    }

    #[test]
    fn policy_violation_detected() {
        let a = CoefficientField::laminate_1d(0.5).unwrap();
        let grid = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.1), &[16], 100).unwrap();
        let problem = IBVPProblem {
            op: OperatorSpec::Oscillating { a: &a, eps: 0.05 },
            source: Arc::new(|_x, _t, _c| 1.0),
            initial: Arc::new(|_x, _c| 0.0),
            bc: BcType::Dirichlet,
        };
        assert!(matches!(
            solve_ibvp(&problem, &grid, &SolverOptions::default()),
            Err(Error::PolicyViolation(_))
        ));
    }

    #[test]
    fn oscillating_and_homogenized_agree_for_constant_coefficient() {
        let a = CoefficientField::constant(1, 1, 1.4);
        let grid = SpaceTimeGrid::with_policy(
            DomainSpec::interval(1.0, 0.25),
            0.125,
            GridPolicy::default(),
        )
        .unwrap();
        let source: SpaceTimeFn = Arc::new(|x: &[f64], t: f64, _c| x[0] + t);
        let initial: SpatialFn = Arc::new(|x: &[f64], _c| (PI * x[0]).sin());
        let u_osc = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Oscillating { a: &a, eps: 0.125 },
                source: source.clone(),
                initial: initial.clone(),
                bc: BcType::Dirichlet,
            },
            &grid,
            &SolverOptions::default(),
        )
        .unwrap();
        let u_hom = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Constant {
                    a_hat: HomogenizedMatrix {
                        d: 1,
                        m: 1,
                        data: vec![1.4],
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
        // identical discrete operators: bitwise-equal trajectories
        assert_eq!(u_osc.values, u_hom.values);
    }

    #[test]
    fn two_dimensional_heat_equation_second_order() {
        // u = e^{-2 pi^2 t} sin(pi x) sin(pi y) on the unit square
        let a_hat = HomogenizedMatrix {
            d: 2,
            m: 1,
            data: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mut errs = Vec::new();
        for (cells, steps) in [(8, 10), (16, 20), (32, 40)] {
            let grid = SpaceTimeGrid::uniform(
                DomainSpec {
                    lengths: vec![1.0, 1.0],
                    time: 0.05,
                },
                &[cells, cells],
                steps,
            )
            .unwrap();
            let problem = IBVPProblem {
                op: OperatorSpec::Constant {
                    a_hat: a_hat.clone(),
                },
                source: Arc::new(|_x, _t, _c| 0.0),
                initial: Arc::new(|x: &[f64], _c| (PI * x[0]).sin() * (PI * x[1]).sin()),
                bc: BcType::Dirichlet,
            };
            let u = solve_ibvp(&problem, &grid, &SolverOptions::default()).unwrap();
            errs.push(max_err_vs(&u, |x, t| {
                (-2.0 * PI * PI * t).exp() * (PI * x[0]).sin() * (PI * x[1]).sin()
            }));
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!((r1 - 2.0).abs() < 0.4, "observed order {r1}");
        assert!((r2 - 2.0).abs() < 0.4, "observed order {r2}");
    }
}
