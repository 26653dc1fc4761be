//! Quasi-Newton minimization with finite-difference gradients.
//!
//! A compact BFGS (inverse-Hessian update, Armijo backtracking) driving
//! central-difference gradients with step 1e-6 * (1 + |x_j|). Objectives
//! here are smooth negative log-likelihoods in a handful of parameters, so
//! a dense inverse-Hessian carry is the right tool; no line-search
//! refinements beyond backtracking are needed.

use nalgebra::{DMatrix, DVector};

pub struct BfgsOptions {
    /// Relative coefficient for the central-difference gradient step.
    pub grad_step: f64,
    /// Convergence: max-norm of gradient <= tol * (1 + |f|).
    pub tol: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { grad_step: 1e-6, tol: 1e-6, max_iters: 500, max_backtracks: 40 }
    }
}

pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

/// Central-difference gradient with per-coordinate step `coef * (1 + |x_j|)`.
pub fn numerical_gradient<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    x: &DVector<f64>,
    coef: f64,
) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = coef * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Finite-difference Hessian (symmetric, 4-point off-diagonals) with step
/// `coef * (1 + |x_j|)`. Uses a larger default step than the gradient since
/// second differences amplify roundoff.
pub fn numerical_hessian<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    x: &DVector<f64>,
    coef: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let h: Vec<f64> = (0..n).map(|j| coef * (1.0 + x[j].abs())).collect();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in 0..i {
            let mut eval2 = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval2(1.0, 1.0) - eval2(1.0, -1.0) - eval2(-1.0, 1.0)
                + eval2(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Minimize `f` from `x0`. Gradients are central differences; convergence is
/// declared when the gradient max-norm falls below `tol * (1 + |f|)`.
pub fn minimize<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x0: DVector<f64>,
    opts: &BfgsOptions,
) -> BfgsResult {
    let n = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let mut wrapped = |x: &DVector<f64>| {
        evals.set(evals.get() + 1);
        f(x)
    };

    let mut x = x0;
    let mut fx = wrapped(&x);
    let mut g = numerical_gradient(&mut wrapped, &x, opts.grad_step);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut stalls = 0usize;

    for iter in 0..opts.max_iters {
        if g.amax() <= opts.tol * (1.0 + fx.abs()) {
            return BfgsResult { x, f: fx, grad: g, iterations: iter, evals: evals.get(), converged: true };
        }

        let mut dir = -(&hinv * &g);
        let mut gd = g.dot(&dir);
        if !gd.is_finite() || gd >= 0.0 {
            // Curvature carry went bad; restart from scaled steepest descent.
            hinv = DMatrix::identity(n, n);
            first_update = true;
            dir = -g.clone();
            gd = g.dot(&dir);
        }

        // Backtracking Armijo line search from the unit step.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let xt = &x + &dir * t;
            let ft = wrapped(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * t * gd {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No improving step along this direction: either done or stuck.
            let converged = g.amax() <= 10.0 * opts.tol * (1.0 + fx.abs());
            return BfgsResult { x, f: fx, grad: g, iterations: iter, evals: evals.get(), converged };
        };

        let g_new = numerical_gradient(&mut wrapped, &x_new, opts.grad_step);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first_update {
                // Standard initial scaling before the first BFGS update.
                let scale = sy / yv.dot(&yv);
                if scale.is_finite() && scale > 0.0 {
                    hinv = DMatrix::identity(n, n) * scale;
                }
                first_update = false;
            }
            // Inverse BFGS update: H <- (I - r s y')H(I - r y s') + r s s'.
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            hinv = hinv - (&hys + hys.transpose()) * rho + ss * (rho * (1.0 + rho * yhy));
        }

        let stalled = (fx - f_new).abs() <= 1e-14 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if stalled {
            stalls += 1;
            if stalls >= 3 {
                let converged = g.amax() <= 10.0 * opts.tol * (1.0 + fx.abs());
                return BfgsResult { x, f: fx, grad: g, iterations: iter + 1, evals: evals.get(), converged };
            }
        } else {
            stalls = 0;
        }
    }
    let converged = g.amax() <= opts.tol * (1.0 + fx.abs());
    BfgsResult { x, f: fx, grad: g, iterations: opts.max_iters, evals: evals.get(), converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let a = [3.0, 1.0, 10.0];
        let f = |x: &DVector<f64>| -> f64 {
            (0..3).map(|i| a[i] * (x[i] - i as f64) * (x[i] - i as f64)).sum()
        };
        let res = minimize(f, DVector::from_element(3, 5.0), &BfgsOptions::default());
        assert!(res.converged);
        for i in 0..3 {
            assert!((res.x[i] - i as f64).abs() < 1e-5, "coord {i}: {}", res.x[i]);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| -> f64 {
            100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
        };
        let res = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &BfgsOptions::default());
        assert!(res.converged, "grad norm {}", res.grad.amax());
        assert!((res.x[0] - 1.0).abs() < 1e-4 && (res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gradient_matches_analytic() {
        let mut f = |x: &DVector<f64>| x[0].sin() * x[1].exp() + x[0] * x[0];
        let x = DVector::from_vec(vec![0.7, -0.3]);
        let g = numerical_gradient(&mut f, &x, 1e-6);
        let gx = 0.7f64.cos() * (-0.3f64).exp() + 1.4;
        let gy = 0.7f64.sin() * (-0.3f64).exp();
        assert!((g[0] - gx).abs() < 1e-8);
        assert!((g[1] - gy).abs() < 1e-8);
    }

    #[test]
    fn hessian_matches_analytic() {
        // f = x^2 y + y^3: H = [[2y, 2x], [2x, 6y]].
        let mut f = |x: &DVector<f64>| x[0] * x[0] * x[1] + x[1].powi(3);
        let x = DVector::from_vec(vec![1.3, 0.8]);
        let h = numerical_hessian(&mut f, &x, 1e-4);
        assert!((h[(0, 0)] - 1.6).abs() < 1e-5);
        assert!((h[(0, 1)] - 2.6).abs() < 1e-5);
        assert!((h[(1, 0)] - 2.6).abs() < 1e-5);
        assert!((h[(1, 1)] - 4.8).abs() < 1e-5);
    }

    #[test]
    fn reports_nonconvergence_on_budget_exhaustion() {
        let f = |x: &DVector<f64>| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = BfgsOptions { max_iters: 3, ..Default::default() };
        let res = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &opts);
        assert!(!res.converged);
    }
}
