//! Cluster-robust covariance and the cluster bootstrap.
//!
//! The sandwich estimator treats each group as the independent sampling
//! unit: bread from the observed (penalized) information, meat from the
//! outer products of per-group score contributions. Two implementations
//! exist on purpose — `crse` assembles matrix products from the working
//! weights, `crse_reference` accumulates per-observation scores in loops —
//! and the test suite holds them to agreement at machine precision.
//!
//! The bootstrap resamples whole groups with replacement, relabels each
//! draw as a distinct group, and refits through a caller-supplied closure,
//! so any estimator (including warm-started ones) can be plugged in.

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::irls::FitResult;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Small-sample scaling for the sandwich covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    /// No scaling.
    None,
    /// G / (G - 1).
    #[default]
    ClusterRatio,
    /// (G / (G - 1)) * ((N - 1) / (N - k)) with k the number of estimated
    /// coefficients, matching common econometrics software.
    Stata,
}

impl Correction {
    pub fn name(&self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::ClusterRatio => "cluster-ratio",
            Correction::Stata => "stata",
        }
    }

    fn factor(&self, g: usize, n: usize, k: usize) -> Result<f64> {
        if g < 2 {
            return Err(Error::InvalidConfig(
                "cluster-robust covariance needs at least two groups".into(),
            ));
        }
        let (gf, nf, kf) = (g as f64, n as f64, k as f64);
        Ok(match self {
            Correction::None => 1.0,
            Correction::ClusterRatio => gf / (gf - 1.0),
            Correction::Stata => {
                if n <= k {
                    return Err(Error::InvalidConfig(format!(
                        "stata correction undefined: {n} observations, {k} coefficients"
                    )));
                }
                gf / (gf - 1.0) * (nf - 1.0) / (nf - kf)
            }
        })
    }
}

impl std::str::FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Correction::None),
            "cluster-ratio" => Ok(Correction::ClusterRatio),
            "stata" => Ok(Correction::Stata),
            other => Err(Error::InvalidConfig(format!(
                "unknown correction '{other}'; expected none, cluster-ratio, or stata"
            ))),
        }
    }
}

/// Cluster-robust covariance of the fixed effects.
#[derive(Debug, Clone)]
pub struct CrseOutput {
    /// Covariance of the fixed-effect coefficients (base plus augmentation
    /// columns of the fitted design).
    pub cov: DMatrix<f64>,
    pub se: DVector<f64>,
    /// Small-sample factor applied.
    pub factor: f64,
    pub n_clusters: usize,
    /// Separated groups whose effect blocks were excluded from the
    /// sandwich (their coefficients are at infinity; their observations
    /// still contribute to the fixed-effect scores).
    pub excluded_groups: Vec<usize>,
}

/// Index bookkeeping shared by both sandwich routes: which free
/// coefficients are kept (separated groups' blocks are dropped).
struct Kept {
    idx: Vec<usize>,
    /// kept-local offset of each group's block, if kept.
    group_off: Vec<Option<usize>>,
}

fn kept_coefficients(fit: &FitResult) -> Kept {
    let layout = &fit.layout;
    let mut idx: Vec<usize> = (0..layout.p).collect();
    let mut group_off = vec![None; layout.n_groups];
    for g in 0..layout.n_groups {
        if fit.separated.contains(&g) {
            continue;
        }
        if let Some(off) = layout.gamma_offset(g) {
            group_off[g] = Some(idx.len());
            for a in 0..layout.d {
                idx.push(off + a);
            }
        }
    }
    Kept { idx, group_off }
}

fn check_pairing(ds: &GroupedDataset, fit: &FitResult) -> Result<()> {
    if ds.n() != fit.eta.len() || ds.p() != fit.layout.p || ds.n_groups() != fit.layout.n_groups
    {
        return Err(Error::InvalidData(
            "fit and dataset shapes disagree; pass the dataset the fit was computed on".into(),
        ));
    }
    Ok(())
}

/// Sandwich covariance from working-weight matrix products.
/// Penalty inverse covariance for a fit, if penalized.
fn fit_omega_inv(fit: &FitResult) -> Result<Option<DMatrix<f64>>> {
    match &fit.omega {
        Some(om) => Ok(Some(
            Cholesky::new(om.clone())
                .ok_or_else(|| Error::InvalidConfig("penalty covariance is not SPD".into()))?
                .inverse(),
        )),
        None => Ok(None),
    }
}

/// Kept design columns U (n x k: fixed columns then surviving group
/// blocks) and the penalized observed information U' W U + penalty blocks,
/// with W = v(mu) / s(theta).
fn design_and_information(
    ds: &GroupedDataset,
    fit: &FitResult,
    kept: &Kept,
    omega_inv: Option<&DMatrix<f64>>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let layout = &fit.layout;
    let k = kept.idx.len();
    let n = ds.n();
    let mut u = DMatrix::zeros(n, k);
    for g in 0..ds.n_groups() {
        for i in ds.group_range(g) {
            for j in 0..layout.p {
                u[(i, j)] = ds.x()[(i, j)];
            }
            if let Some(off) = kept.group_off[g] {
                for a in 0..layout.d {
                    u[(i, off + a)] = ds.z()[(i, a)];
                }
            }
        }
    }
    let mut wu = u.clone();
    for i in 0..n {
        let w = fit.family.weight_eta(fit.mu[i], fit.theta_hat);
        for j in 0..k {
            wu[(i, j)] *= w;
        }
    }
    let mut info = u.transpose() * &wu;
    if let Some(oi) = omega_inv {
        for g in 0..ds.n_groups() {
            if let Some(off) = kept.group_off[g] {
                for a in 0..layout.d {
                    for b in 0..layout.d {
                        info[(off + a, off + b)] += oi[(a, b)];
                    }
                }
            }
        }
    }
    (u, info)
}

/// Conventional (non-robust) standard errors for the fixed-effect
/// coefficients: square roots of the diagonal of the inverse penalized
/// observed information at the fit. Separated groups' blocks are excluded
/// the same way as in the sandwich.
pub fn model_based_se(ds: &GroupedDataset, fit: &FitResult) -> Result<DVector<f64>> {
    check_pairing(ds, fit)?;
    let kept = kept_coefficients(fit);
    let omega_inv = fit_omega_inv(fit)?;
    let (_, info) = design_and_information(ds, fit, &kept, omega_inv.as_ref());
    let chol = Cholesky::new(info).ok_or_else(|| {
        Error::SingularSystem("observed information is not positive definite".into())
    })?;
    let cov = chol.inverse();
    let p = fit.layout.p;
    let mut se = DVector::zeros(p);
    for j in 0..p {
        let v = cov[(j, j)];
        if v < 0.0 {
            return Err(Error::SingularSystem(format!(
                "negative variance for coefficient {j}"
            )));
        }
        se[j] = v.sqrt();
    }
    Ok(se)
}

pub fn crse(ds: &GroupedDataset, fit: &FitResult, corr: Correction) -> Result<CrseOutput> {
    check_pairing(ds, fit)?;
    let layout = &fit.layout;
    let kept = kept_coefficients(fit);
    let k = kept.idx.len();
    let s_theta = fit.theta_hat;
    let omega_inv = fit_omega_inv(fit)?;
    let (u, bread) = design_and_information(ds, fit, &kept, omega_inv.as_ref());

    // Meat: per-group scores of the penalized objective. With canonical
    // links W (A - eta) = y - mu, so the working residual route is
    // U_g' (y - mu)_g / s(theta) minus the group's penalty gradient.
    let mut meat = DMatrix::zeros(k, k);
    for g in 0..ds.n_groups() {
        let range = ds.group_range(g);
        let mut score = DVector::zeros(k);
        for i in range {
            let r = fit.family.score_eta(ds.y()[i], fit.mu[i], s_theta);
            for j in 0..k {
                score[j] += u[(i, j)] * r;
            }
        }
        if let (Some(oi), Some(off)) = (&omega_inv, kept.group_off[g]) {
            for a in 0..layout.d {
                let mut v = 0.0;
                for b in 0..layout.d {
                    v += oi[(a, b)] * fit.free_coefs[kept.idx[off + b]];
                }
                score[off + a] -= v;
            }
        }
        meat.syger(1.0, &score, &score, 1.0);
    }
    for i in 0..k {
        for j in 0..i {
            meat[(j, i)] = meat[(i, j)];
        }
    }

    finish_sandwich(ds, fit, bread, meat, corr, k)
}

/// Per-observation reference implementation of the same sandwich: family
/// scores and curvatures accumulated in plain loops. Retained as an
/// independent cross-check of `crse`.
pub fn crse_reference(ds: &GroupedDataset, fit: &FitResult, corr: Correction) -> Result<CrseOutput> {
    check_pairing(ds, fit)?;
    let layout = &fit.layout;
    let kept = kept_coefficients(fit);
    let k = kept.idx.len();
    let s_theta = fit.theta_hat;
    let omega_inv = match &fit.omega {
        Some(om) => Some(
            Cholesky::new(om.clone())
                .ok_or_else(|| Error::InvalidConfig("penalty covariance is not SPD".into()))?
                .inverse(),
        ),
        None => None,
    };

    let row_of = |i: usize, g: usize| -> DVector<f64> {
        let mut r = DVector::zeros(k);
        for j in 0..layout.p {
            r[j] = ds.x()[(i, j)];
        }
        if let Some(off) = kept.group_off[g] {
            for a in 0..layout.d {
                r[off + a] = ds.z()[(i, a)];
            }
        }
        r
    };

    let mut bread = DMatrix::zeros(k, k);
    let mut meat = DMatrix::zeros(k, k);
    for g in 0..ds.n_groups() {
        let mut score = DVector::zeros(k);
        for i in ds.group_range(g) {
            let row = row_of(i, g);
            let mu = fit.family.link_inverse(fit.eta[i]);
            let obs_score = (ds.y()[i] - mu) / s_theta;
            let curv = fit.family.variance_fn(mu) / s_theta;
            score.axpy(obs_score, &row, 1.0);
            bread.syger(curv, &row, &row, 1.0);
        }
        if let (Some(oi), Some(off)) = (&omega_inv, kept.group_off[g]) {
            for a in 0..layout.d {
                let mut pa = 0.0;
                for b in 0..layout.d {
                    pa += oi[(a, b)] * fit.free_coefs[kept.idx[off + b]];
                    if a >= b {
                        bread[(off + a, off + b)] += oi[(a, b)];
                    }
                }
                score[off + a] -= pa;
            }
        }
        meat.syger(1.0, &score, &score, 1.0);
    }
    for i in 0..k {
        for j in 0..i {
            bread[(j, i)] = bread[(i, j)];
            meat[(j, i)] = meat[(i, j)];
        }
    }

    finish_sandwich(ds, fit, bread, meat, corr, k)
}

fn finish_sandwich(
    ds: &GroupedDataset,
    fit: &FitResult,
    bread: DMatrix<f64>,
    meat: DMatrix<f64>,
    corr: Correction,
    k: usize,
) -> Result<CrseOutput> {
    let p = fit.layout.p;
    let chol = Cholesky::new(bread)
        .ok_or_else(|| Error::SingularSystem("observed information in the sandwich".into()))?;
    let half = chol.solve(&meat);
    let full = chol.solve(&half.transpose());
    let factor = corr.factor(ds.n_groups(), ds.n(), k)?;
    let cov = full.view((0, 0), (p, p)).into_owned() * factor;
    let mut se = DVector::zeros(p);
    for j in 0..p {
        let v = cov[(j, j)];
        if v < 0.0 {
            return Err(Error::SingularSystem(format!(
                "negative sandwich variance for coefficient {j}"
            )));
        }
        se[j] = v.sqrt();
    }
    Ok(CrseOutput {
        cov,
        se,
        factor,
        n_clusters: ds.n_groups(),
        excluded_groups: fit.separated.clone(),
    })
}

// ---------------------------------------------------------------------------
// Cluster bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub n_replicates: usize,
    /// Two-sided miscoverage; 0.05 gives a 95% interval.
    pub alpha: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions { n_replicates: 200, alpha: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapCi {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Successful replicate statistics, in replicate order.
    pub draws: Vec<DVector<f64>>,
    pub n_failed: usize,
}

/// Resample whole groups with replacement and relabel each draw as its own
/// group (a group sampled twice becomes two distinct groups downstream).
pub fn resample_groups(ds: &GroupedDataset, indices: &[usize]) -> Result<GroupedDataset> {
    let rows: usize = indices.iter().map(|&g| ds.group_size(g)).sum();
    let mut y = Vec::with_capacity(rows);
    let mut x = DMatrix::zeros(rows, ds.p());
    let mut labels = Vec::with_capacity(rows);
    let mut r = 0;
    for (new_g, &g) in indices.iter().enumerate() {
        if g >= ds.n_groups() {
            return Err(Error::InvalidData(format!(
                "resample index {g} out of range for {} groups",
                ds.n_groups()
            )));
        }
        for i in ds.group_range(g) {
            y.push(ds.y()[i]);
            for j in 0..ds.p() {
                x[(r, j)] = ds.x()[(i, j)];
            }
            labels.push(format!("{new_g:06}"));
            r += 1;
        }
    }
    GroupedDataset::build(
        y,
        x,
        &labels,
        ds.col_names().to_vec(),
        ds.z_spec().clone(),
    )
}

/// Percentile cluster bootstrap. `refit` maps a resampled dataset to the
/// statistic vector; replicates whose refit errors are dropped, and more
/// than 20% failures abort the run. Confidence limits are interpolated
/// order statistics at (m + 1) * alpha/2 and (m + 1) * (1 - alpha/2) over
/// the m successful draws.
pub fn cluster_bootstrap<F>(
    ds: &GroupedDataset,
    opts: &BootstrapOptions,
    rng: &mut ChaCha8Rng,
    mut refit: F,
) -> Result<BootstrapCi>
where
    F: FnMut(&GroupedDataset) -> Result<DVector<f64>>,
{
    let g = ds.n_groups();
    if g < 2 {
        return Err(Error::InvalidConfig(
            "cluster bootstrap needs at least two groups".into(),
        ));
    }
    if !(0.0..1.0).contains(&opts.alpha) || opts.alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "bootstrap alpha must be in (0, 1), got {}",
            opts.alpha
        )));
    }
    if opts.n_replicates == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least one replicate".into()));
    }

    let b = opts.n_replicates;
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(b);
    let mut n_failed = 0usize;
    let mut dim: Option<usize> = None;
    let mut indices = vec![0usize; g];
    for _ in 0..b {
        for slot in indices.iter_mut() {
            *slot = rng.random_range(0..g);
        }
        let stat = resample_groups(ds, &indices).and_then(|rds| refit(&rds));
        match stat {
            Ok(v) => {
                if let Some(d0) = dim {
                    if v.len() != d0 {
                        return Err(Error::InvalidData(format!(
                            "bootstrap statistic changed length: {} then {}",
                            d0,
                            v.len()
                        )));
                    }
                } else {
                    dim = Some(v.len());
                }
                draws.push(v);
            }
            Err(_) => n_failed += 1,
        }
    }
    if n_failed * 5 > b {
        return Err(Error::BootstrapFailed(format!(
            "{n_failed} of {b} replicates failed to refit (limit is 20%)"
        )));
    }
    let dim = dim.ok_or_else(|| Error::BootstrapFailed("no successful replicates".into()))?;

    let m = draws.len();
    let mut lower = DVector::zeros(dim);
    let mut upper = DVector::zeros(dim);
    let mut col = vec![0.0; m];
    for j in 0..dim {
        for (r, d) in draws.iter().enumerate() {
            col[r] = d[j];
        }
        col.sort_by(f64::total_cmp);
        lower[j] = order_stat(&col, opts.alpha / 2.0);
        upper[j] = order_stat(&col, 1.0 - opts.alpha / 2.0);
    }
    Ok(BootstrapCi { lower, upper, draws, n_failed })
}

/// Interpolated order statistic: position (m + 1) p on the 1-based sorted
/// sample, clamped to the observed range.
fn order_stat(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let h = p * (m as f64 + 1.0);
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= m as f64 {
        return sorted[m - 1];
    }
    let lo = h.floor() as usize; // 1-based index of the lower order stat
    let frac = h - lo as f64;
    sorted[lo - 1] * (1.0 - frac) + sorted[lo] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ZSpec;
    use crate::family::Family;
    use crate::irls::{RidgePenalty, fit_fe, fit_pooled, fit_regfe};
    use rand::SeedableRng;
    use std::cell::Cell;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn grouped_bernoulli(seed: u64, g: usize, n_per: usize) -> GroupedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g * n_per;
        let mut y = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for gi in 0..g {
            let gam = normal(&mut rng) * 0.8;
            for r in 0..n_per {
                let i = gi * n_per + r;
                let xv = normal(&mut rng);
                x[(i, 0)] = 1.0;
                x[(i, 1)] = xv;
                let mu = Family::Bernoulli.link_inverse(0.3 + 0.9 * xv + gam);
                let u: f64 = rng.random();
                y.push(f64::from(u < mu));
                labels.push(format!("{gi:03}"));
            }
        }
        GroupedDataset::build(
            y,
            x,
            &labels,
            vec!["intercept".into(), "x1".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap()
    }

    #[test]
    fn matrix_and_reference_routes_agree() {
        let ds = grouped_bernoulli(1, 8, 20);
        let fe = fit_fe(&ds, Family::Bernoulli).unwrap();
        let a = crse(&ds, &fe, Correction::ClusterRatio).unwrap();
        let b = crse_reference(&ds, &fe, Correction::ClusterRatio).unwrap();
        assert!((&a.cov - &b.cov).amax() < 1e-12 * (1.0 + a.cov.amax()));

        let pen = RidgePenalty::intercept(0.64).unwrap();
        let rf = fit_regfe(&ds, Family::Bernoulli, &pen, 1.0).unwrap();
        let a = crse(&ds, &rf, Correction::Stata).unwrap();
        let b = crse_reference(&ds, &rf, Correction::Stata).unwrap();
        assert!((&a.cov - &b.cov).amax() < 1e-12 * (1.0 + a.cov.amax()));
        assert_eq!(a.factor, b.factor);
    }

    #[test]
    fn pooled_logistic_matches_longhand_formula() {
        let ds = grouped_bernoulli(2, 5, 12);
        let fit = fit_pooled(&ds, Family::Bernoulli).unwrap();
        let out = crse(&ds, &fit, Correction::None).unwrap();

        // Longhand: H = sum mu(1-mu) x x', meat = sum_g (X_g' r_g)^{x2}.
        let p = ds.p();
        let mut h = DMatrix::zeros(p, p);
        let mut meat = DMatrix::zeros(p, p);
        for g in 0..ds.n_groups() {
            let mut sg = DVector::zeros(p);
            for i in ds.group_range(g) {
                let eta: f64 = (0..p).map(|j| ds.x()[(i, j)] * fit.beta_hat[j]).sum();
                let mu = 1.0 / (1.0 + (-eta).exp());
                let xi = ds.x().row(i).transpose();
                h += mu * (1.0 - mu) * &xi * xi.transpose();
                sg += (ds.y()[i] - mu) * xi;
            }
            meat += &sg * sg.transpose();
        }
        let hinv = h.try_inverse().unwrap();
        let expect = &hinv * meat * &hinv;
        assert!((&out.cov - &expect).amax() < 1e-8 * (1.0 + expect.amax()));
    }

    #[test]
    fn correction_factors_scale_covariance() {
        let ds = grouped_bernoulli(3, 9, 15);
        let fit = fit_fe(&ds, Family::Bernoulli).unwrap();
        let base = crse(&ds, &fit, Correction::None).unwrap();
        let ratio = crse(&ds, &fit, Correction::ClusterRatio).unwrap();
        let stata = crse(&ds, &fit, Correction::Stata).unwrap();
        let g = ds.n_groups() as f64;
        let n = ds.n() as f64;
        let k = (ds.p() + ds.n_groups() - 1) as f64; // pinned FE layout
        assert!((ratio.factor - g / (g - 1.0)).abs() < 1e-15);
        let expect = g / (g - 1.0) * (n - 1.0) / (n - k);
        assert!((stata.factor - expect).abs() < 1e-12);
        for j in 0..ds.p() {
            assert!(
                (ratio.cov[(j, j)] - base.cov[(j, j)] * ratio.factor).abs()
                    < 1e-12 * ratio.cov[(j, j)].abs()
            );
            assert!(
                (stata.cov[(j, j)] - base.cov[(j, j)] * stata.factor).abs()
                    < 1e-12 * stata.cov[(j, j)].abs()
            );
        }
    }

    #[test]
    fn singleton_clusters_reduce_to_hc0() {
        // One observation per group: the cluster sandwich without
        // correction is exactly HC0.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let mut y = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let xv = normal(&mut rng);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = xv;
            let mu = Family::Bernoulli.link_inverse(0.2 + 0.7 * xv);
            let u: f64 = rng.random();
            y.push(f64::from(u < mu));
            labels.push(format!("{i:03}"));
        }
        let ds = GroupedDataset::build(
            y,
            x,
            &labels,
            vec!["intercept".into(), "x1".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap();
        let fit = fit_pooled(&ds, Family::Bernoulli).unwrap();
        let out = crse(&ds, &fit, Correction::None).unwrap();

        let p = ds.p();
        let mut h = DMatrix::zeros(p, p);
        let mut meat = DMatrix::zeros(p, p);
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| ds.x()[(i, j)] * fit.beta_hat[j]).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let xi = ds.x().row(i).transpose();
            h += mu * (1.0 - mu) * &xi * xi.transpose();
            let r = ds.y()[i] - mu;
            meat += r * r * &xi * xi.transpose();
        }
        let hinv = h.try_inverse().unwrap();
        let hc0 = &hinv * meat * &hinv;
        assert!((&out.cov - &hc0).amax() < 1e-8 * (1.0 + hc0.amax()));
    }

    #[test]
    fn separated_group_block_is_excluded() {
        // Group 0 has all-one outcomes; its FE diverges but the fixed
        // effects keep finite cluster-robust standard errors.
        let mut ds_y = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = 6;
        let n_per = 14;
        let mut x = DMatrix::zeros(g * n_per, 2);
        for gi in 0..g {
            for r in 0..n_per {
                let i = gi * n_per + r;
                let xv = normal(&mut rng);
                x[(i, 0)] = 1.0;
                x[(i, 1)] = xv;
                if gi == 0 {
                    ds_y.push(1.0);
                } else {
                    let mu = Family::Bernoulli.link_inverse(0.2 * xv);
                    let u: f64 = rng.random();
                    ds_y.push(f64::from(u < mu));
                }
                labels.push(format!("{gi:03}"));
            }
        }
        let ds = GroupedDataset::build(
            ds_y,
            x,
            &labels,
            vec!["intercept".into(), "x1".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap();
        let fit = fit_fe(&ds, Family::Bernoulli).unwrap();
        assert!(!fit.separated.is_empty());
        let out = crse(&ds, &fit, Correction::ClusterRatio).unwrap();
        assert_eq!(out.excluded_groups, fit.separated);
        for j in 0..ds.p() {
            assert!(out.se[j].is_finite() && out.se[j] > 0.0);
        }
    }

    #[test]
    fn resample_relabels_and_copies_rows() {
        let ds = grouped_bernoulli(6, 4, 5);
        let rds = resample_groups(&ds, &[1, 1, 3]).unwrap();
        assert_eq!(rds.n_groups(), 3);
        assert_eq!(rds.n(), 15);
        // First resampled group is a row-for-row copy of source group 1.
        let src = ds.group_range(1);
        let dst = rds.group_range(0);
        for (a, b) in src.zip(dst) {
            assert_eq!(ds.y()[a], rds.y()[b]);
            assert_eq!(ds.x()[(a, 1)], rds.x()[(b, 1)]);
        }
        // Duplicate draws are distinct groups.
        assert_eq!(rds.group_size(0), ds.group_size(1));
        assert_eq!(rds.group_size(1), ds.group_size(1));
    }

    #[test]
    fn bootstrap_is_deterministic_per_stream() {
        let ds = grouped_bernoulli(7, 6, 10);
        let opts = BootstrapOptions { n_replicates: 25, alpha: 0.1 };
        let run = |stream: u64| {
            let mut rng = crate::rng::stream_rng(99, 0, crate::rng::Role::Bootstrap);
            if stream > 0 {
                rng = crate::rng::stream_rng(99, stream, crate::rng::Role::Bootstrap);
            }
            cluster_bootstrap(&ds, &opts, &mut rng, |r| {
                Ok(fit_pooled(r, Family::Bernoulli)?.beta_hat)
            })
            .unwrap()
        };
        let a = run(0);
        let b = run(0);
        let c = run(1);
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.upper, b.upper);
        assert!(a.lower != c.lower || a.upper != c.upper);
    }

    #[test]
    fn percentile_convention_frozen() {
        let ds = grouped_bernoulli(8, 5, 6);
        // Replicate b returns b + 1, so draws are exactly 1..=B.
        let counter = Cell::new(0.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ci = cluster_bootstrap(
            &ds,
            &BootstrapOptions { n_replicates: 99, alpha: 0.05 },
            &mut rng,
            |_| {
                counter.set(counter.get() + 1.0);
                Ok(DVector::from_vec(vec![counter.get()]))
            },
        )
        .unwrap();
        // (99 + 1) * 0.025 = 2.5 -> halfway between order stats 2 and 3.
        assert!((ci.lower[0] - 2.5).abs() < 1e-12);
        assert!((ci.upper[0] - 97.5).abs() < 1e-12);

        let counter = Cell::new(0.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ci = cluster_bootstrap(
            &ds,
            &BootstrapOptions { n_replicates: 19, alpha: 0.10 },
            &mut rng,
            |_| {
                counter.set(counter.get() + 1.0);
                Ok(DVector::from_vec(vec![counter.get()]))
            },
        )
        .unwrap();
        // (19 + 1) * 0.05 = 1 -> first and last order stats exactly.
        assert!((ci.lower[0] - 1.0).abs() < 1e-12);
        assert!((ci.upper[0] - 19.0).abs() < 1e-12);
    }

    #[test]
    fn failure_budget_enforced() {
        let ds = grouped_bernoulli(9, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let counter = Cell::new(0usize);
        // Every third replicate fails: 34 of 100 > 20%.
        let res = cluster_bootstrap(
            &ds,
            &BootstrapOptions { n_replicates: 100, alpha: 0.05 },
            &mut rng,
            |_| {
                let c = counter.get();
                counter.set(c + 1);
                if c % 3 == 0 {
                    Err(Error::NonConvergence { what: "test".into(), iterations: 0 })
                } else {
                    Ok(DVector::from_vec(vec![c as f64]))
                }
            },
        );
        assert!(matches!(res, Err(Error::BootstrapFailed(_))));

        // Every sixth replicate fails: 17 of 100 is within budget.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let counter = Cell::new(0usize);
        let res = cluster_bootstrap(
            &ds,
            &BootstrapOptions { n_replicates: 100, alpha: 0.05 },
            &mut rng,
            |_| {
                let c = counter.get();
                counter.set(c + 1);
                if c % 6 == 0 {
                    Err(Error::NonConvergence { what: "test".into(), iterations: 0 })
                } else {
                    Ok(DVector::from_vec(vec![c as f64]))
                }
            },
        )
        .unwrap();
        assert_eq!(res.n_failed, 17);
        assert_eq!(res.draws.len(), 83);
    }

    #[test]
    fn single_group_is_rejected() {
        let ds = grouped_bernoulli(10, 1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let res = cluster_bootstrap(&ds, &BootstrapOptions::default(), &mut rng, |r| {
            Ok(fit_pooled(r, Family::Bernoulli)?.beta_hat)
        });
        assert!(matches!(res, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn affine_statistics_give_affine_intervals() {
        let ds = grouped_bernoulli(15, 6, 10);
        let opts = BootstrapOptions { n_replicates: 40, alpha: 0.1 };
        let mut rng1 = ChaCha8Rng::seed_from_u64(21);
        let mut rng2 = rng1.clone();
        let a = cluster_bootstrap(&ds, &opts, &mut rng1, |r| {
            Ok(fit_pooled(r, Family::Bernoulli)?.beta_hat)
        })
        .unwrap();
        let b = cluster_bootstrap(&ds, &opts, &mut rng2, |r| {
            let beta = fit_pooled(r, Family::Bernoulli)?.beta_hat;
            Ok(beta * 2.0 + DVector::from_element(2, 7.0))
        })
        .unwrap();
        for j in 0..2 {
            assert!((b.lower[j] - (2.0 * a.lower[j] + 7.0)).abs() < 1e-12);
            assert!((b.upper[j] - (2.0 * a.upper[j] + 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn model_se_matches_information_inverse() {
        // Pooled logistic: information is sum mu(1-mu) x x'.
        let ds = grouped_bernoulli(17, 6, 15);
        let fit = fit_pooled(&ds, Family::Bernoulli).unwrap();
        let se = model_based_se(&ds, &fit).unwrap();
        let p = ds.p();
        let mut h = DMatrix::zeros(p, p);
        for i in 0..ds.n() {
            let mu = fit.mu()[i];
            let xi = ds.x().row(i).transpose();
            h += mu * (1.0 - mu) * &xi * xi.transpose();
        }
        let cov = h.try_inverse().unwrap();
        for j in 0..p {
            assert!((se[j] - cov[(j, j)].sqrt()).abs() < 1e-10, "coef {j}");
        }

        // Fixed-effects fit: dense longhand with explicit dummy columns for
        // every non-pinned group.
        let fe = fit_fe(&ds, Family::Bernoulli).unwrap();
        let se_fe = model_based_se(&ds, &fe).unwrap();
        let pinned = fe.pinned.unwrap();
        let free_groups: Vec<usize> =
            (0..ds.n_groups()).filter(|&g| g != pinned).collect();
        let k = p + free_groups.len();
        let mut u = DMatrix::zeros(ds.n(), k);
        for g in 0..ds.n_groups() {
            for i in ds.group_range(g) {
                for j in 0..p {
                    u[(i, j)] = ds.x()[(i, j)];
                }
                if let Some(pos) = free_groups.iter().position(|&fg| fg == g) {
                    u[(i, p + pos)] = 1.0;
                }
            }
        }
        let mut h = DMatrix::zeros(k, k);
        for i in 0..ds.n() {
            let w = fe.mu()[i] * (1.0 - fe.mu()[i]);
            let ui = u.row(i).transpose();
            h += w * &ui * ui.transpose();
        }
        let cov = h.try_inverse().unwrap();
        for j in 0..p {
            assert!((se_fe[j] - cov[(j, j)].sqrt()).abs() < 1e-8, "fe coef {j}");
        }
    }
}
