//! Restarted GMRES and BiCGStab on plain `f64` vectors.
//!
//! Operators and preconditioners are closures; vectors are dense slices.
//! Dot products run sequentially so results do not depend on thread count.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOutcome {
    pub converged: bool,
    pub iterations: usize,
    /// Preconditioned residual norm at exit.
    pub residual: f64,
}

/// Left-preconditioned restarted GMRES for `A x = b`.
///
/// `apply` computes `A v`, `precond` computes `M^{-1} v`. Convergence is
/// declared when the preconditioned residual drops below
/// `rtol * ||M^{-1} b||`. `x` carries the initial guess and the solution.
pub fn gmres<A, P>(
    apply: A,
    precond: P,
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
    restart: usize,
) -> KrylovOutcome
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mb = precond(b);
    let target = rtol * norm(&mb).max(f64::MIN_POSITIVE);
    let mut total_iters = 0usize;
    let mut res_norm;

    loop {
        let ax = apply(x);
        let mut r = vec![0.0; n];
        for i in 0..n {
            r[i] = b[i] - ax[i];
        }
        let mr = precond(&r);
        res_norm = norm(&mr);
        if res_norm <= target || total_iters >= max_iter {
            return KrylovOutcome {
                converged: res_norm <= target,
                iterations: total_iters,
                residual: res_norm,
            };
        }

        let m = restart.min(max_iter - total_iters);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(mr.iter().map(|v| v / res_norm).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = res_norm;
        let mut k_used = 0;

        for j in 0..m {
            let mut w = precond(&apply(&basis[j]));
            for (i, vi) in basis.iter().enumerate().take(j + 1) {
                h[i][j] = dot(&w, vi);
                axpy(-h[i][j], vi, &mut w);
            }
            h[j + 1][j] = norm(&w);
            total_iters += 1;
            k_used = j + 1;
            if h[j + 1][j] > 1e-300 {
                basis.push(w.iter().map(|v| v / h[j + 1][j]).collect());
            } else {
                // lucky breakdown: exact solution in the current subspace
                for i in 0..j {
                    let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                    h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                    h[i][j] = t;
                }
                g[j + 1] = 0.0;
                cs[j] = 1.0;
                sn[j] = 0.0;
                break;
            }
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
            cs[j] = h[j][j] / denom;
            sn[j] = h[j + 1][j] / denom;
            h[j][j] = denom;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            res_norm = g[j + 1].abs();
            if res_norm <= target {
                break;
            }
        }

        // back-substitute y from the k_used x k_used triangular system
        let k = k_used;
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for l in i + 1..k {
                acc -= h[i][l] * y[l];
            }
            y[i] = acc / h[i][i];
        }
        for (l, yl) in y.iter().enumerate() {
            axpy(*yl, &basis[l], x);
        }

        if res_norm <= target || total_iters >= max_iter {
            return KrylovOutcome {
                converged: res_norm <= target,
                iterations: total_iters,
                residual: res_norm,
            };
        }
    }
}

/// BiCGStab with a diagonal preconditioner, used by the implicit time steps.
pub fn bicgstab<A>(
    apply: A,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    max_iter: usize,
) -> KrylovOutcome
where
    A: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm(b).max(f64::MIN_POSITIVE);
    let target = rtol * bnorm;
    let ax = apply(x);
    let mut r: Vec<f64> = (0..n).map(|i| b[i] - ax[i]).collect();
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];

    for it in 0..max_iter {
        let res = norm(&r);
        if res <= target {
            return KrylovOutcome {
                converged: true,
                iterations: it,
                residual: res,
            };
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            return KrylovOutcome {
                converged: false,
                iterations: it,
                residual: res,
            };
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat: Vec<f64> = p.iter().zip(inv_diag).map(|(a, d)| a * d).collect();
        v = apply(&phat);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) <= target {
            axpy(alpha, &phat, x);
            return KrylovOutcome {
                converged: true,
                iterations: it + 1,
                residual: norm(&s),
            };
        }
        let shat: Vec<f64> = s.iter().zip(inv_diag).map(|(a, d)| a * d).collect();
        let t = apply(&shat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega.abs() < 1e-300 {
            return KrylovOutcome {
                converged: false,
                iterations: it + 1,
                residual: norm(&r),
            };
        }
    }
    KrylovOutcome {
        converged: false,
        iterations: max_iter,
        residual: norm(&r),
    }
}
