//! Temporary diagnostic for the identity-check error budget.

use std::sync::Arc;

use parahom::cell::solve_corrector_suite;
use parahom::coeff::CoefficientField;
use parahom::dual::solve_dual;
use parahom::smooth::{
    k_eps, k_eps_derivative, KernelDerivative, SmoothingKernel,
};
use parahom::solver::{
    norm_grad_l2, norm_l2_spacetime, solve_ibvp, BcType, DomainSpec, GridFunction, GridPolicy,
    IBVPProblem, OperatorSpec, SolverOptions, SpaceTimeGrid,
};
use parahom::torus::CellGrid;
use parahom::twoscale::{build_w_eps, derivative4, seeded_test_fields, BumpField};

struct Pieces {
    lhs_time: f64,
    lhs_diff: f64,
    terms: [f64; 6],
}

#[allow(clippy::too_many_arguments)]
fn split_terms(
    bundle: &parahom::twoscale::ExpansionBundle,
    a: &CoefficientField,
    corr: &parahom::cell::CorrectorSet,
    dual: &parahom::dual::DualCorrectorSet,
    kernel: &SmoothingKernel,
    psi: &BumpField,
) -> Pieces {
    let grid = bundle.w_eps.grid.clone();
    let eps = bundle.eps;
    let delta = bundle.delta;
    let sp = grid.space_len();

    let a_eps = GridFunction::from_fn(grid.clone(), 1, |x, t, _| {
        a.eval(0, 0, 0, 0, &[x[0] / eps], t / (eps * eps))
    });
    let a_hat = corr.a_hat.as_ref().unwrap().entry(0, 0, 0, 0);
    let g0 = bundle.u0.derivative(0);
    let kf = k_eps(&g0, eps, delta, kernel).unwrap();
    let dkf = k_eps_derivative(&g0, eps, delta, kernel, KernelDerivative::Space(0)).unwrap();
    let dtkf = k_eps_derivative(&g0, eps, delta, kernel, KernelDerivative::Time).unwrap();
    let d2kf =
        k_eps_derivative(&g0, eps, delta, kernel, KernelDerivative::SpaceSpace(0, 0)).unwrap();

    let ev = parahom::twoscale::ScaledTorusEvaluator::new(corr.grid, &grid, eps);
    let chi_e = ev.eval(corr.chi(0, 0, 0));
    let phi_121 = ev.eval(dual.phi(0, 1, 0, 0, 0));
    let phi_211 = ev.eval(dual.phi(1, 0, 0, 0, 0));
    let spec = parahom::fft::Spectral::new(corr.grid);
    let dphi_211 = ev.eval(&spec.derivative_axis(dual.phi(1, 0, 0, 0, 0), 0));

    let gw = derivative4(&bundle.w_eps, 0);

    let meas = grid.cell_measure() * grid.tau;
    let mut lhs_time = 0.0;
    let mut lhs_diff = 0.0;
    let mut terms = [0.0f64; 6];
    for lvl in 0..grid.n_time {
        let t = grid.time(lvl);
        let tw = grid.time_weight(lvl);
        for idx in 0..sp {
            let x = grid.spatial_point(idx);
            let qw = grid.quad_weight(idx) * tw;
            let dpsi = psi.grad(&x, t, 0);
            let dpsit = psi.dt(&x, t);
            if dpsi == 0.0 && dpsit == 0.0 {
                continue;
            }
            let ae = a_eps.at(lvl, idx, 0);
            lhs_time -= qw * bundle.w_eps.at(lvl, idx, 0) * dpsit;
            lhs_diff += qw * ae * gw.at(lvl, idx, 0) * dpsi;
            terms[0] += qw * (a_hat - ae) * (g0.at(lvl, idx, 0) - kf.at(lvl, idx, 0)) * dpsi;
            terms[1] -= qw * eps * ae * chi_e.at(lvl, idx, 0) * dkf.at(lvl, idx, 0) * dpsi;
            // term 3 vanishes in 1D (phi_{111} = 0)
            terms[3] -= qw * eps * eps * phi_121.at(lvl, idx, 0) * dtkf.at(lvl, idx, 0) * dpsi;
            terms[4] += qw * eps * ae * dphi_211.at(lvl, idx, 0) * dkf.at(lvl, idx, 0) * dpsi;
            terms[5] += qw * eps * eps * ae * phi_211.at(lvl, idx, 0) * d2kf.at(lvl, idx, 0) * dpsi;
        }
    }
    Pieces {
        lhs_time: lhs_time * meas,
        lhs_diff: lhs_diff * meas,
        terms: terms.map(|v| v * meas),
    }
}

#[test]
fn diag_identity_budget() {
    let a = CoefficientField::spacetime_sin(1, 2.0, 1.0).unwrap();
    let cell = CellGrid::new(1, 64, 64).unwrap();
    let corr = solve_corrector_suite(&a, &cell, 1e-10).unwrap();
    let dual = solve_dual(corr.b.as_ref().unwrap()).unwrap();
    let eps = 0.125;
    let domain = DomainSpec::interval(1.0, 0.5);
    let kernel = SmoothingKernel::standard_bump(1);
    let delta = 2.0 * eps * (1.0 + 1e-6);
    let psis = seeded_test_fields(&domain, 5, 7);

    for policy in [
        GridPolicy::default(),
        GridPolicy {
            space_mult: 32.0,
            time_mult: 16.0,
        },
        GridPolicy {
            space_mult: 64.0,
            time_mult: 32.0,
        },
    ] {
        let grid = SpaceTimeGrid::with_policy(domain.clone(), eps, policy).unwrap();
        let source: parahom::solver::SpaceTimeFn = Arc::new(|_x: &[f64], _t: f64, _c| 1.0);
        let initial: parahom::solver::SpatialFn = Arc::new(|_x: &[f64], _c| 0.0);
        let opts = SolverOptions::default();
        let u_eps = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Oscillating { a: &a, eps },
                source: source.clone(),
                initial: initial.clone(),
                bc: BcType::Dirichlet,
            },
            &grid,
            &opts,
        )
        .unwrap();
        let u0 = solve_ibvp(
            &IBVPProblem {
                op: OperatorSpec::Constant {
                    a_hat: corr.a_hat.clone().unwrap(),
                },
                source,
                initial,
                bc: BcType::Dirichlet,
            },
            &grid,
            &opts,
        )
        .unwrap();
        let bundle = build_w_eps(&u_eps, &u0, &corr, &dual, eps, delta, &kernel).unwrap();
        println!(
            "policy ({}, {}): ||u_eps-u0|| = {:.4e}, ||grad w|| = {:.4e}",
            policy.space_mult,
            policy.time_mult,
            norm_l2_spacetime(&bundle.u_eps.sub(&bundle.u0).unwrap()),
            norm_grad_l2(&bundle.w_eps)
        );
        let p = split_terms(&bundle, &a, &corr, &dual, &kernel, &psis[0]);
        let lhs = p.lhs_time + p.lhs_diff;
        let rhs: f64 = p.terms.iter().sum();
        println!(
            "  lhs: time {:+.6e} diff {:+.6e} total {:+.6e}",
            p.lhs_time, p.lhs_diff, lhs
        );
        println!(
            "  rhs terms: 1 {:+.6e} 2 {:+.6e} 4 {:+.6e} 5 {:+.6e} 6 {:+.6e} total {:+.6e}",
            p.terms[0], p.terms[1], p.terms[3], p.terms[4], p.terms[5], rhs
        );
        println!(
            "  abs {:.3e} rel {:.3e}",
            (lhs - rhs).abs(),
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
        );
    }
}
