//! Gauss–Hermite quadrature rules (weight e^{-x^2}).
//!
//! Nodes start from the Golub–Welsch eigenvalues of the Jacobi matrix
//! (symmetric tridiagonal, zero diagonal, off-diagonal sqrt(k/2)) and are
//! polished by Newton steps on the orthonormal Hermite recurrence. Weights
//! use the Christoffel identity w = 1 / sum_{j<n} p_j(x)^2, which keeps
//! full relative accuracy even for the exponentially small extreme weights
//! that eigenvector-based formulas destroy — essential because quadrature
//! consumers work with log-weights. Rules are cached per node count.

use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

#[derive(Debug, Clone)]
pub struct GaussHermite {
    /// Nodes in ascending order.
    pub nodes: Vec<f64>,
    /// Weights for the e^{-x^2} weight function; sum is sqrt(pi).
    pub weights: Vec<f64>,
}

static CACHE: LazyLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Return the n-point Gauss–Hermite rule.
///
/// # Panics
/// Panics if `n == 0`.
pub fn gauss_hermite(n: usize) -> Arc<GaussHermite> {
    assert!(n > 0, "quadrature needs at least one node");
    if let Some(rule) = CACHE.lock().unwrap().get(&n) {
        return Arc::clone(rule);
    }
    let rule = Arc::new(compute(n));
    CACHE.lock().unwrap().insert(n, Arc::clone(&rule));
    rule
}

fn compute(n: usize) -> GaussHermite {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    if n == 1 {
        return GaussHermite { nodes: vec![0.0], weights: vec![sqrt_pi] };
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    // Polish each node, then enforce exact +/- symmetry before computing
    // weights (the Christoffel sum is even, so each pair shares a weight).
    for x in &mut nodes {
        *x = newton_refine(n, *x);
    }
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let j = n - 1 - i;
        let x = if i == j { 0.0 } else { 0.5 * (nodes[j] - nodes[i]) };
        nodes[j] = x;
        nodes[i] = -x;
        let w = 1.0 / hermite_values(n, x).sum_sq;
        weights[i] = w;
        weights[j] = w;
    }
    GaussHermite { nodes, weights }
}

struct HermiteEval {
    /// p_n(x) and p_{n-1}(x) for the orthonormal (weight e^{-x^2}) family.
    p_n: f64,
    p_nm1: f64,
    /// sum_{j=0}^{n-1} p_j(x)^2; its reciprocal is the Gauss weight.
    sum_sq: f64,
}

/// One pass of the three-term recurrence p_{k+1} = (x p_k - sqrt(k/2)
/// p_{k-1}) / sqrt((k+1)/2), starting from p_0 = pi^{-1/4}.
fn hermite_values(n: usize, x: f64) -> HermiteEval {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25);
    let mut sum_sq = cur * cur;
    for k in 0..n {
        let next = (x * cur - (k as f64 / 2.0).sqrt() * prev) / ((k as f64 + 1.0) / 2.0).sqrt();
        prev = cur;
        cur = next;
        if k + 1 < n {
            sum_sq += cur * cur;
        }
    }
    HermiteEval { p_n: cur, p_nm1: prev, sum_sq }
}

fn newton_refine(n: usize, x0: f64) -> f64 {
    let mut x = x0;
    for _ in 0..10 {
        let ev = hermite_values(n, x);
        // p_n'(x) = sqrt(2n) p_{n-1}(x)
        let deriv = (2.0 * n as f64).sqrt() * ev.p_nm1;
        if deriv == 0.0 {
            break;
        }
        let step = ev.p_n / deriv;
        x -= step;
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}
