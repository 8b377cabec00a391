//! The parabolic smoothing operator `S_eps`, the space/time cutoffs, and
//! the composite operator `K_eps(f) = S_eps(eta1 eta2 f)`.
//!
//! `S_eps` convolves with an anisotropically scaled bump: radius `eps` in
//! space and `eps^2` in time. The convolution is realized as direct
//! quadrature over the kernel support (the support is O(eps), so the stencil
//! is small), not transform-based, which keeps the zero-extension near the
//! boundary exact. Derivatives of `K_eps` convolve with the analytically
//! differentiated kernel.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::solver::{DomainSpec, GridFunction, SpaceTimeGrid};

/// Nodes and weights of the 20-point Gauss-Legendre rule on [-1, 1].
const GAUSS20: [(f64, f64); 10] = [
    (0.0765265211334973, 0.1527533871307258),
    (0.2277858511416451, 0.1491729864726037),
    (0.3737060887154195, 0.1420961093183820),
    (0.5108670019508271, 0.1316886384491766),
    (0.6360536807265150, 0.1181945319615184),
    (0.7463319064601508, 0.1019301198172404),
    (0.8391169718222188, 0.0832767415767048),
    (0.9122344282513259, 0.0626720483341091),
    (0.9639719272779138, 0.0406014298003869),
    (0.9931285991850949, 0.0176140071391521),
];

fn gauss20<F: Fn(f64) -> f64>(lo: f64, hi: f64, f: F) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut acc = 0.0;
    for (x, w) in GAUSS20 {
        acc += w * (f(mid + half * x) + f(mid - half * x));
    }
    acc * half
}

fn bump_profile(rho: f64) -> f64 {
    // g(rho) = exp(-1/(1 - rho)) for rho = |p|^2 < 1
    if rho < 1.0 {
        (-1.0 / (1.0 - rho)).exp()
    } else {
        0.0
    }
}

/// Smooth nonnegative radial bump on `R^{d+1}`, supported in the unit ball,
/// normalized to unit integral.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingKernel {
    /// Spatial dimension; the kernel lives on `R^{d+1}`.
    pub d: usize,
    norm: f64,
}

impl SmoothingKernel {
    /// The standard bump `c exp(-1/(1-|p|^2))` with `c` fixed by high-order
    /// radial quadrature of the unit integral.
    pub fn standard_bump(d: usize) -> Self {
        let dim = d + 1;
        // surface area of the unit sphere S^{dim-1}
        let omega = match dim {
            1 => 2.0,
            2 => 2.0 * PI,
            3 => 4.0 * PI,
            _ => unreachable!("kernel dimension {dim}"),
        };
        // split the radial integral at the inflection region for accuracy
        let integral = omega
            * (gauss20(0.0, 0.5, |r| r.powi(dim as i32 - 1) * bump_profile(r * r))
                + gauss20(0.5, 0.8, |r| r.powi(dim as i32 - 1) * bump_profile(r * r))
                + gauss20(0.8, 1.0, |r| r.powi(dim as i32 - 1) * bump_profile(r * r)));
        SmoothingKernel {
            d,
            norm: 1.0 / integral,
        }
    }

    /// Kernel value at `p in R^{d+1}`.
    pub fn theta(&self, p: &[f64]) -> f64 {
        let rho: f64 = p.iter().map(|v| v * v).sum();
        self.norm * bump_profile(rho)
    }

    /// Partial derivative of theta along coordinate `axis`.
    pub fn theta_deriv(&self, p: &[f64], axis: usize) -> f64 {
        let rho: f64 = p.iter().map(|v| v * v).sum();
        if rho >= 1.0 {
            return 0.0;
        }
        let g = bump_profile(rho);
        let om = 1.0 - rho;
        -2.0 * self.norm * p[axis] * g / (om * om)
    }

    /// Second partial derivative along coordinates `a`, `b`.
    pub fn theta_deriv2(&self, p: &[f64], a: usize, b: usize) -> f64 {
        let rho: f64 = p.iter().map(|v| v * v).sum();
        if rho >= 1.0 {
            return 0.0;
        }
        let g = bump_profile(rho);
        let om = 1.0 - rho;
        let gp = -g / (om * om);
        let gpp = g * (1.0 / om.powi(4) - 2.0 / om.powi(3));
        let mut out = gpp * 4.0 * p[a] * p[b];
        if a == b {
            out += 2.0 * gp;
        }
        self.norm * out
    }

    /// Re-integrate the kernel with an independent quadrature (for tests).
    pub fn integral(&self) -> f64 {
        let dim = self.d + 1;
        let omega = match dim {
            2 => 2.0 * PI,
            3 => 4.0 * PI,
            _ => unreachable!(),
        };
        let mut acc = 0.0;
        let pieces = 64;
        for k in 0..pieces {
            let lo = k as f64 / pieces as f64;
            let hi = (k + 1) as f64 / pieces as f64;
            acc += gauss20(lo, hi, |r| r.powi(dim as i32 - 1) * bump_profile(r * r));
        }
        omega * acc * self.norm
    }
}

/// What to convolve with: the kernel itself or one of its derivatives,
/// scaled consistently with the chain rule of `theta(x/eps, t/eps^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelDerivative {
    Value,
    /// d/dx_axis
    Space(usize),
    /// d/dt
    Time,
    /// d^2/dx_a dx_b
    SpaceSpace(usize, usize),
}

struct Stencil {
    /// Tap extents per spatial axis.
    p: Vec<usize>,
    /// Tap extent in time.
    q: usize,
    /// Row-major over (time offset, spatial offsets...), innermost last axis.
    weights: Vec<f64>,
}

fn build_stencil(
    grid: &SpaceTimeGrid,
    eps: f64,
    kernel: &SmoothingKernel,
    deriv: KernelDerivative,
) -> Result<Stencil> {
    let d = grid.d();
    if kernel.d != d {
        return Err(Error::GridMismatch(format!(
            "kernel dimension {} vs grid dimension {}",
            kernel.d, d
        )));
    }
    let mut p = Vec::with_capacity(d);
    for (axis, &h) in grid.h.iter().enumerate() {
        let cells = eps / h;
        if cells < 4.0 {
            return Err(Error::UnderResolvedKernel {
                axis,
                cells,
                min: 4.0,
            });
        }
        p.push(cells.floor() as usize);
    }
    let tcells = eps * eps / grid.tau;
    if tcells < 4.0 {
        return Err(Error::UnderResolvedKernel {
            axis: d,
            cells: tcells,
            min: 4.0,
        });
    }
    let q = tcells.floor() as usize;

    let meas = grid.cell_measure() * grid.tau;
    let base_scale = meas / eps.powi(d as i32 + 2);
    let deriv_scale = match deriv {
        KernelDerivative::Value => 1.0,
        KernelDerivative::Space(_) => 1.0 / eps,
        KernelDerivative::Time => 1.0 / (eps * eps),
        KernelDerivative::SpaceSpace(_, _) => 1.0 / (eps * eps),
    };

    let spatial_taps: usize = p.iter().map(|&pa| 2 * pa + 1).product();
    let mut weights = vec![0.0; (2 * q + 1) * spatial_taps];
    let mut raw_mass = 0.0;
    let mut pt = vec![0.0; d + 1];
    for (flat, w) in weights.iter_mut().enumerate() {
        let mut rem = flat;
        // innermost: last spatial axis; outermost: time
        let mut offs = vec![0isize; d + 1];
        for axis in (0..d).rev() {
            let span = 2 * p[axis] + 1;
            offs[axis + 1] = (rem % span) as isize - p[axis] as isize;
            rem /= span;
        }
        offs[0] = (rem % (2 * q + 1)) as isize - q as isize;
        for axis in 0..d {
            pt[axis] = offs[axis + 1] as f64 * grid.h[axis] / eps;
        }
        pt[d] = offs[0] as f64 * grid.tau / (eps * eps);
        let theta_val = match deriv {
            KernelDerivative::Value => kernel.theta(&pt),
            KernelDerivative::Space(a) => kernel.theta_deriv(&pt, a),
            KernelDerivative::Time => kernel.theta_deriv(&pt, d),
            KernelDerivative::SpaceSpace(a, b) => kernel.theta_deriv2(&pt, a, b),
        };
        *w = theta_val * base_scale * deriv_scale;
        raw_mass += kernel.theta(&pt) * base_scale;
    }
    // normalize by the sampled kernel mass so discrete contractivity and
    // constant-preservation hold exactly
    let inv = 1.0 / raw_mass;
    for w in &mut weights {
        *w *= inv;
    }
    Ok(Stencil { p, q, weights })
}

fn convolve(f: &GridFunction, st: &Stencil) -> GridFunction {
    let grid = f.grid.clone();
    let m = f.m;
    let sp = grid.space_len();
    let n_time = grid.n_time;
    let mut out = GridFunction::zeros(grid.clone(), m);
    let q = st.q as isize;

    match grid.d() {
        1 => {
            let nx = grid.n[0];
            let p0 = st.p[0] as isize;
            let span0 = (2 * st.p[0] + 1) as isize;
            crate::par::fill_chunks(&mut out.values, sp * m, |lvl, slab| {
                let lvl = lvl as isize;
                for dr in -q..=q {
                    let src_lvl = lvl - dr;
                    if src_lvl < 0 || src_lvl >= n_time as isize {
                        continue;
                    }
                    let in_row = f.level(src_lvl as usize);
                    let wrow = &st.weights
                        [((dr + q) as usize * span0 as usize)..((dr + q + 1) as usize * span0 as usize)];
                    for dq in -p0..=p0 {
                        let w = wrow[(dq + p0) as usize];
                        if w == 0.0 {
                            continue;
                        }
                        let lo = dq.max(0) as usize;
                        let hi = ((nx as isize + dq).min(nx as isize)) as usize;
                        if lo >= hi {
                            continue;
                        }
                        let dst = &mut slab[lo * m..hi * m];
                        let src = &in_row[(lo as isize - dq) as usize * m
                            ..(hi as isize - dq) as usize * m];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            });
        }
        2 => {
            let (n0, n1) = (grid.n[0], grid.n[1]);
            let p0 = st.p[0] as isize;
            let p1 = st.p[1] as isize;
            let span1 = (2 * st.p[1] + 1) as usize;
            let span0 = (2 * st.p[0] + 1) as usize;
            crate::par::fill_chunks(&mut out.values, sp * m, |lvl, slab| {
                let lvl = lvl as isize;
                for dr in -q..=q {
                    let src_lvl = lvl - dr;
                    if src_lvl < 0 || src_lvl >= n_time as isize {
                        continue;
                    }
                    let in_lvl = f.level(src_lvl as usize);
                    let wplane = (dr + q) as usize * span0 * span1;
                    for d0 in -p0..=p0 {
                        let wrow = &st.weights[wplane + (d0 + p0) as usize * span1
                            ..wplane + ((d0 + p0) as usize + 1) * span1];
                        for i0 in 0..n0 as isize {
                            let s0 = i0 - d0;
                            if s0 < 0 || s0 >= n0 as isize {
                                continue;
                            }
                            let out_row = &mut slab
                                [(i0 as usize * n1) * m..(i0 as usize * n1 + n1) * m];
                            let in_row =
                                &in_lvl[(s0 as usize * n1) * m..(s0 as usize * n1 + n1) * m];
                            for d1 in -p1..=p1 {
                                let w = wrow[(d1 + p1) as usize];
                                if w == 0.0 {
                                    continue;
                                }
                                let lo = d1.max(0) as usize;
                                let hi = ((n1 as isize + d1).min(n1 as isize)) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let dst = &mut out_row[lo * m..hi * m];
                                let src = &in_row[(lo as isize - d1) as usize * m
                                    ..(hi as isize - d1) as usize * m];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += w * s;
                                }
                            }
                        }
                    }
                }
            });
        }
        _ => unreachable!(),
    }
    out
}

/// `S_eps(f)`: convolution with the anisotropically scaled kernel, the input
/// extended by zero outside its grid.
pub fn s_eps(f: &GridFunction, eps: f64, kernel: &SmoothingKernel) -> Result<GridFunction> {
    s_eps_derivative(f, eps, kernel, KernelDerivative::Value)
}

/// A derivative of `S_eps(f)`, realized by convolving with the analytically
/// differentiated scaled kernel.
pub fn s_eps_derivative(
    f: &GridFunction,
    eps: f64,
    kernel: &SmoothingKernel,
    deriv: KernelDerivative,
) -> Result<GridFunction> {
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let st = build_stencil(&f.grid, eps, kernel, deriv)?;
    Ok(convolve(f, &st))
}

/// Space and time cutoffs deactivating a `delta`-collar of the lateral
/// boundary and `delta^2`-thick initial/final slabs. Built from linear ramps
/// mollified by a bump of width `delta/4` (space) and `delta^2/4` (time), so
/// the gradient bounds hold with constant <= 4.
#[derive(Debug, Clone)]
pub struct CutoffPair {
    pub domain: DomainSpec,
    pub delta: f64,
    bump_mass: f64,
}

impl CutoffPair {
    pub fn new(domain: DomainSpec, delta: f64) -> Self {
        let bump_mass = gauss20(-1.0, 1.0, |u| bump_profile(u * u));
        CutoffPair {
            domain,
            delta,
            bump_mass,
        }
    }

    // Mollified ramp: exactly 0 for s <= lo, exactly 1 for s >= hi; the
    // linear transition on [lo + w, hi - w] convolved with a 1D bump of
    // half-width w = (hi - lo)/8.
    fn ramp(&self, s: f64, lo: f64, hi: f64) -> f64 {
        let w = (hi - lo) / 8.0;
        if s <= lo + 2.0 * w - w {
            // fast reject: ramp support starts at lo + w; with the mollifier
            // reach the output is zero up to s = lo
            if s <= lo {
                return 0.0;
            }
        }
        if s >= hi {
            return 1.0;
        }
        let r_lo = lo + w;
        let r_hi = hi - w;
        let ramp = |v: f64| ((v - r_lo) / (r_hi - r_lo)).clamp(0.0, 1.0);
        // integrate ramp(s - u) * bump(u/w)/(w * mass) over u in [-w, w],
        // splitting at the kinks of the ramp
        let mut cuts = vec![-w, w];
        for kink in [s - r_lo, s - r_hi] {
            if kink > -w && kink < w {
                cuts.push(kink);
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut acc = 0.0;
        for pair in cuts.windows(2) {
            acc += gauss20(pair[0], pair[1], |u| {
                ramp(s - u) * bump_profile((u / w) * (u / w))
            });
        }
        acc / (w * self.bump_mass)
    }

    /// Spatial cutoff: 0 within distance `delta` of the lateral boundary,
    /// 1 beyond `2 delta`, tensor product over axes.
    pub fn eta1(&self, x: &[f64]) -> f64 {
        let mut v = 1.0;
        for (a, &l) in self.domain.lengths.iter().enumerate() {
            let dist = x[a].min(l - x[a]);
            v *= self.ramp(dist, self.delta, 2.0 * self.delta);
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    }

    /// Temporal cutoff: 0 outside `[delta^2, T - delta^2]`, 1 on
    /// `[2 delta^2, T - 2 delta^2]`.
    pub fn eta2(&self, t: f64) -> f64 {
        let d2 = self.delta * self.delta;
        let a = self.ramp(t, d2, 2.0 * d2);
        if a == 0.0 {
            return 0.0;
        }
        a * self.ramp(self.domain.time - t, d2, 2.0 * d2)
    }
}

fn check_layer_width(eps: f64, delta: f64) -> Result<()> {
    if !(delta > 2.0 * eps && delta < 20.0 * eps) {
        return Err(Error::BadLayerWidth { delta, eps });
    }
    Ok(())
}

/// Multiply by the cutoffs, then smooth: `K_eps(f) = S_eps(eta1 eta2 f)`.
pub fn k_eps(
    f: &GridFunction,
    eps: f64,
    delta: f64,
    kernel: &SmoothingKernel,
) -> Result<GridFunction> {
    k_eps_derivative(f, eps, delta, kernel, KernelDerivative::Value)
}

/// A derivative of `K_eps(f)` via the differentiated kernel.
pub fn k_eps_derivative(
    f: &GridFunction,
    eps: f64,
    delta: f64,
    kernel: &SmoothingKernel,
    deriv: KernelDerivative,
) -> Result<GridFunction> {
    check_layer_width(eps, delta)?;
    let masked = apply_cutoffs(f, delta);
    s_eps_derivative(&masked, eps, kernel, deriv)
}

/// All spatial first derivatives of `K_eps(f)`.
pub fn grad_k_eps(
    f: &GridFunction,
    eps: f64,
    delta: f64,
    kernel: &SmoothingKernel,
) -> Result<Vec<GridFunction>> {
    check_layer_width(eps, delta)?;
    let masked = apply_cutoffs(f, delta);
    (0..f.grid.d())
        .map(|a| s_eps_derivative(&masked, eps, kernel, KernelDerivative::Space(a)))
        .collect()
}

/// Time derivative of `K_eps(f)`.
pub fn dt_k_eps(
    f: &GridFunction,
    eps: f64,
    delta: f64,
    kernel: &SmoothingKernel,
) -> Result<GridFunction> {
    k_eps_derivative(f, eps, delta, kernel, KernelDerivative::Time)
}

/// Pointwise `eta1(x) eta2(t) f`, with the per-axis cutoff factors
/// precomputed on the grid lines.
pub fn apply_cutoffs(f: &GridFunction, delta: f64) -> GridFunction {
    let grid = f.grid.clone();
    let cut = CutoffPair::new(grid.domain.clone(), delta);
    let sp = grid.space_len();
    let m = f.m;
    let eta1: Vec<f64> = (0..sp)
        .map(|idx| cut.eta1(&grid.spatial_point(idx)))
        .collect();
    let eta2: Vec<f64> = (0..grid.n_time).map(|lvl| cut.eta2(grid.time(lvl))).collect();
    let mut out = GridFunction::zeros(grid, m);
    crate::par::fill_chunks(&mut out.values, sp * m, |lvl, slab| {
        let e2 = eta2[lvl];
        let src = f.level(lvl);
        if e2 == 0.0 {
            return;
        }
        for idx in 0..sp {
            let e = eta1[idx] * e2;
            for c in 0..m {
                slab[idx * m + c] = e * src[idx * m + c];
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::norm_l2_spacetime;

    fn test_grid() -> SpaceTimeGrid {
        SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.25), &[128], 512).unwrap()
    }

    #[test]
    fn kernel_has_unit_integral() {
        for d in [1, 2] {
            let k = SmoothingKernel::standard_bump(d);
            assert!(
                (k.integral() - 1.0).abs() < 1e-10,
                "d = {d}: integral {}",
                k.integral()
            );
            assert!(k.theta(&vec![0.0; d + 1]) > 0.0);
            assert_eq!(k.theta(&vec![1.0, 0.0, 0.0][..d + 1].to_vec()), 0.0);
        }
    }

    #[test]
    fn constant_preserved_in_the_interior() {
        let grid = test_grid();
        let kernel = SmoothingKernel::standard_bump(1);
        let eps = 1.0 / 16.0;
        let f = GridFunction::from_fn(grid.clone(), 1, |_x, _t, _c| 3.25);
        let sf = s_eps(&f, eps, &kernel).unwrap();
        // interior: > eps from spatial ends, > eps^2 from temporal ends
        let lvl = grid.n_time / 2;
        let idx = grid.n[0] / 2;
        assert!((sf.at(lvl, idx, 0) - 3.25).abs() < 1e-10);
    }

    #[test]
    fn affine_preserved_by_radial_symmetry() {
        let grid = test_grid();
        let kernel = SmoothingKernel::standard_bump(1);
        let eps = 1.0 / 16.0;
        let f = GridFunction::from_fn(grid.clone(), 1, |x, _t, _c| 0.7 + 2.0 * x[0]);
        let sf = s_eps(&f, eps, &kernel).unwrap();
        let lvl = grid.n_time / 2;
        for idx in [grid.n[0] / 3, grid.n[0] / 2, 2 * grid.n[0] / 3] {
            let x = grid.coord(0, idx);
            assert!(
                (sf.at(lvl, idx, 0) - (0.7 + 2.0 * x)).abs() < 1e-8,
                "at x = {x}"
            );
        }
    }

    #[test]
    fn contractivity_on_random_fields() {
        let grid =
            SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.125), &[64], 128).unwrap();
        let kernel = SmoothingKernel::standard_bump(1);
        let eps = 1.0 / 8.0;
        let mut state = 0x853c49e6748fea9bu64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for trial in 0..20 {
            let mut f = GridFunction::zeros(grid.clone(), 1);
            for v in &mut f.values {
                *v = rng();
            }
            let sf = s_eps(&f, eps, &kernel).unwrap();
            let lhs = norm_l2_spacetime(&sf);
            let rhs = norm_l2_spacetime(&f);
            assert!(lhs <= rhs * (1.0 + 1e-6), "trial {trial}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn under_resolved_kernel_is_rejected() {
        let grid = SpaceTimeGrid::uniform(DomainSpec::interval(1.0, 0.25), &[16], 64).unwrap();
        let kernel = SmoothingKernel::standard_bump(1);
        let f = GridFunction::zeros(grid, 1);
        assert!(matches!(
            s_eps(&f, 0.1, &kernel),
            Err(Error::UnderResolvedKernel { .. })
        ));
    }

    #[test]
    fn cutoff_shapes_and_gradient_bounds() {
        let domain = DomainSpec::interval(1.0, 0.5);
        let delta = 0.06;
        let cut = CutoffPair::new(domain.clone(), delta);
        assert_eq!(cut.eta1(&[0.5 * delta]), 0.0);
        assert_eq!(cut.eta1(&[delta]), 0.0);
        assert_eq!(cut.eta1(&[2.0 * delta]), 1.0);
        assert_eq!(cut.eta1(&[0.5]), 1.0);
        assert_eq!(cut.eta1(&[1.0 - 0.9 * delta]), 0.0);
        let d2 = delta * delta;
        assert_eq!(cut.eta2(0.5 * d2), 0.0);
        assert_eq!(cut.eta2(2.5 * d2), 1.0);
        assert_eq!(cut.eta2(0.5 - 0.5 * d2), 0.0);
        // measured slope bounds: |eta1'| <= 4/delta, |eta2'| <= 4/delta^2
        let n = 4000;
        let mut max_slope1: f64 = 0.0;
        for k in 0..n {
            let x0 = k as f64 / n as f64;
            let x1 = (k + 1) as f64 / n as f64;
            let s = (cut.eta1(&[x1]) - cut.eta1(&[x0])).abs() / (x1 - x0);
            max_slope1 = max_slope1.max(s);
        }
        assert!(max_slope1 <= 4.0 / delta, "eta1 slope {max_slope1}");
        let mut max_slope2: f64 = 0.0;
        for k in 0..n {
            let t0 = 0.5 * k as f64 / n as f64;
            let t1 = 0.5 * (k + 1) as f64 / n as f64;
            let s = (cut.eta2(t1) - cut.eta2(t0)).abs() / (t1 - t0);
            max_slope2 = max_slope2.max(s);
        }
        assert!(max_slope2 <= 4.0 / d2, "eta2 slope {max_slope2}");
        // range
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            let v = cut.eta1(&[x]);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn k_eps_vanishes_on_the_boundary_layer_and_is_one_deep_inside() {
        let grid = test_grid();
        let kernel = SmoothingKernel::standard_bump(1);
        let eps = 1.0 / 16.0;
        let delta = 2.0 * eps * (1.0 + 1e-6);
        let f = GridFunction::from_fn(grid.clone(), 1, |_x, _t, _c| 1.0);
        let kf = k_eps(&f, eps, delta, &kernel).unwrap();
        // support strictly inside: zero on Omega_{T, delta - eps}
        let margin = delta - eps;
        for lvl in 0..grid.n_time {
            let t = grid.time(lvl);
            for idx in 0..grid.space_len() {
                let x = grid.coord(0, idx);
                let in_layer = x.min(1.0 - x) <= margin
                    || t <= margin * margin
                    || t >= grid.domain.time - margin * margin;
                if in_layer {
                    assert_eq!(kf.at(lvl, idx, 0), 0.0, "nonzero at x={x}, t={t}");
                }
            }
        }
        // equals 1 where the cutoffs are 1 on the whole kernel support
        let x_ok = |x: f64| x.min(1.0 - x) >= 2.0 * delta + eps;
        let t_ok = |t: f64| {
            t >= 2.0 * delta * delta + eps * eps
                && t <= grid.domain.time - 2.0 * delta * delta - eps * eps
        };
        let mut checked = 0;
        for lvl in (0..grid.n_time).step_by(37) {
            let t = grid.time(lvl);
            if !t_ok(t) {
                continue;
            }
            for idx in (0..grid.space_len()).step_by(17) {
                let x = grid.coord(0, idx);
                if !x_ok(x) {
                    continue;
                }
                assert!((kf.at(lvl, idx, 0) - 1.0).abs() < 1e-8, "x={x} t={t}");
                checked += 1;
            }
        }
        assert!(checked > 0, "interior region was empty");
    }

    #[test]
    fn bad_layer_width_rejected() {
        let grid = test_grid();
        let kernel = SmoothingKernel::standard_bump(1);
        let f = GridFunction::zeros(grid, 1);
        let eps = 1.0 / 32.0;
        assert!(matches!(
            k_eps(&f, eps, 2.0 * eps, &kernel),
            Err(Error::BadLayerWidth { .. })
        ));
        assert!(matches!(
            k_eps(&f, eps, 20.0 * eps, &kernel),
            Err(Error::BadLayerWidth { .. })
        ));
    }

    #[test]
    fn derivative_of_constant_vanishes_inside() {
        let grid = test_grid();
        let kernel = SmoothingKernel::standard_bump(1);
        let eps = 1.0 / 16.0;
        let f = GridFunction::from_fn(grid.clone(), 1, |_x, _t, _c| 2.0);
        let gf = s_eps_derivative(&f, eps, &kernel, KernelDerivative::Space(0)).unwrap();
        let df = s_eps_derivative(&f, eps, &kernel, KernelDerivative::Time).unwrap();
        let lvl = grid.n_time / 2;
        let idx = grid.n[0] / 2;
        assert!(gf.at(lvl, idx, 0).abs() < 1e-8);
        assert!(df.at(lvl, idx, 0).abs() < 1e-8);
    }

    #[test]
    fn gradient_scaling_is_eps_stable() {
        // eps ||grad S_eps f|| / ||f|| stays bounded by one constant
        let kernel = SmoothingKernel::standard_bump(1);
        let mut ratios = Vec::new();
        for k in 3..=5 {
            let eps = 0.5f64.powi(k);
            let grid = SpaceTimeGrid::uniform(
                DomainSpec::interval(1.0, 64.0 * eps * eps),
                &[(8.0 / eps) as usize],
                512,
            )
            .unwrap();
            let f = GridFunction::from_fn(grid, 1, |x, t, _c| {
                (7.0 * PI * x[0]).sin() * (1.0 + (3.0 * PI * t).cos())
            });
            let g = s_eps_derivative(&f, eps, &kernel, KernelDerivative::Space(0)).unwrap();
            ratios.push(eps * norm_l2_spacetime(&g) / norm_l2_spacetime(&f));
        }
        let coarsest = ratios[0];
        for r in &ratios {
            assert!(*r <= 2.0 * coarsest, "ratios {ratios:?}");
        }
    }
}
