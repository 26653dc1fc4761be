//! Penalized iteratively reweighted least squares for grouped GLMs.
//!
//! One engine serves the unpenalized fixed-effects fit (one dummy block per
//! group, reference group pinned to zero), the ridge-penalized variant
//! (every group's block shrunk by S_g = s(theta) * Omega^{-1}), and the
//! pooled GLM (no group blocks). Each update solves the blocked normal
//! equations by forming the Schur complement of the fixed-effect block, so
//! the cost is linear in the number of groups; nothing of size N x N or
//! (p + G d)^2 is ever materialized during estimation.

use crate::EstimatorKind;
use crate::data::{AugmentInfo, GroupedDataset};
use crate::error::{Error, Result};
use crate::family::Family;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Ridge penalty: gamma_g ~ N(0, Omega), contributing
/// -(1/2) gamma_g' Omega^{-1} gamma_g per group to the objective.
#[derive(Debug, Clone)]
pub struct RidgePenalty {
    pub omega: DMatrix<f64>,
}

impl RidgePenalty {
    /// Random-intercept penalty with variance `omega_sq`.
    pub fn intercept(omega_sq: f64) -> Result<Self> {
        if !(omega_sq.is_finite() && omega_sq > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "random-effect variance must be positive and finite, got {omega_sq}"
            )));
        }
        Ok(RidgePenalty { omega: DMatrix::from_element(1, 1, omega_sq) })
    }

    pub fn omega_inv(&self) -> Result<DMatrix<f64>> {
        let d = self.omega.nrows();
        Cholesky::new(self.omega.clone())
            .map(|c| c.inverse())
            .ok_or_else(|| {
                Error::InvalidConfig(format!("penalty covariance ({d} x {d}) is not SPD"))
            })
    }
}

/// Coefficient layout: fixed effects first, then one d-block per group in
/// group order, minus the pinned reference block (if any).
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub p: usize,
    pub d: usize,
    pub n_groups: usize,
    pub pinned: Option<usize>,
    /// Whether group blocks exist at all (false for the pooled GLM).
    pub with_gamma: bool,
}

impl Layout {
    pub fn n_free(&self) -> usize {
        if !self.with_gamma {
            return self.p;
        }
        let blocks = self.n_groups - usize::from(self.pinned.is_some());
        self.p + self.d * blocks
    }

    /// Offset of group g's block among the free coefficients.
    pub fn gamma_offset(&self, g: usize) -> Option<usize> {
        if !self.with_gamma {
            return None;
        }
        match self.pinned {
            Some(r) if g == r => None,
            Some(r) if g > r => Some(self.p + self.d * (g - 1)),
            _ => Some(self.p + self.d * g),
        }
    }
}

/// Convergence thresholds for the IRLS driver.
#[derive(Debug, Clone)]
pub struct IrlsOptions {
    pub max_iters: usize,
    /// Relative deviance-change stopping rule.
    pub tol: f64,
    pub max_halvings: usize,
    /// Warm-start coefficients in the fit's free layout.
    pub start: Option<DVector<f64>>,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { max_iters: 200, tol: 1e-9, max_halvings: 20, start: None }
    }
}

/// |gamma| beyond this in an unpenalized fit is treated as separation.
pub const SEPARATION_THRESHOLD: f64 = 15.0;

/// State of the running IRLS iteration, exposed for inspection.
#[derive(Debug, Clone)]
pub struct IrlsState {
    /// Coefficients in the free layout (fixed, then group blocks).
    pub coefs: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub weights: DVector<f64>,
    pub working: DVector<f64>,
    /// Penalized log-likelihood at `coefs`.
    pub objective: f64,
}

/// A converged (or abandoned) fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    pub family: Family,
    /// Fixed-effect estimates for the base design columns.
    pub beta_hat: DVector<f64>,
    /// Estimates for augmentation columns (empty when the design has none).
    pub alpha_hat: DVector<f64>,
    /// Group effects (G x d). Separated groups carry +/- infinity.
    pub gamma_hat: DMatrix<f64>,
    /// Dispersion: sigma^2 estimate for Gaussian fits, 1 otherwise.
    pub theta_hat: f64,
    /// Penalty covariance used, if any.
    pub omega: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Deviance (-2 * penalized log-likelihood) after each accepted step,
    /// starting from the initial point. Non-increasing.
    pub trace: Vec<f64>,
    /// Unpenalized log-likelihood at the estimates.
    pub loglik: f64,
    /// Groups whose unpenalized effect diverged (perfectly separated).
    pub separated: Vec<usize>,
    /// Reference group pinned to zero in unpenalized fits.
    pub pinned: Option<usize>,
    /// Augmentation metadata when fit on an augmented design.
    pub augment: Option<AugmentInfo>,
    pub(crate) layout: Layout,
    pub(crate) free_coefs: DVector<f64>,
    pub(crate) eta: DVector<f64>,
    pub(crate) mu: DVector<f64>,
}

impl FitResult {
    /// All fixed-effect coefficients (base design then augmentation).
    pub fn fixed(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.beta_hat.len() + self.alpha_hat.len());
        v.rows_mut(0, self.beta_hat.len()).copy_from(&self.beta_hat);
        v.rows_mut(self.beta_hat.len(), self.alpha_hat.len()).copy_from(&self.alpha_hat);
        v
    }

    /// Linear predictor at the estimates for the training rows.
    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Group-effect summaries reported as deviations from the across-group
    /// average, the usual presentation for dummy-coded fits. Separated
    /// groups are excluded from the average and keep their sentinels.
    pub fn gamma_centered(&self) -> DMatrix<f64> {
        let (g, d) = (self.gamma_hat.nrows(), self.gamma_hat.ncols());
        let mut out = self.gamma_hat.clone();
        for k in 0..d {
            let finite: Vec<f64> =
                (0..g).map(|i| self.gamma_hat[(i, k)]).filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                continue;
            }
            let mean = finite.iter().sum::<f64>() / finite.len() as f64;
            for i in 0..g {
                if out[(i, k)].is_finite() {
                    out[(i, k)] -= mean;
                }
            }
        }
        out
    }
}

/// Per-observation working quantities (mu, weight, working response).
/// Canonical-link weights are v(mu); the dispersion enters the update only
/// through S_g. The working residual uses stable, family-specific forms so
/// that saturated means (mu of exactly 0 or 1) cannot produce 0 * inf; the
/// tiny floors are solver guards, not link-scale clamps.
fn working_parts(fam: Family, y: f64, eta: f64, _theta: f64) -> (f64, f64, f64) {
    let mu = fam.link_inverse(eta);
    match fam {
        Family::Gaussian => (mu, 1.0, eta + (y - mu)),
        Family::Bernoulli => {
            let w = (mu * (1.0 - mu)).max(1e-280);
            let r = if y == 1.0 { 1.0 / mu.max(1e-290) } else { -1.0 / (1.0 - mu).max(1e-290) };
            (mu, w, eta + r)
        }
        Family::Poisson => {
            let w = mu.max(1e-280);
            let r = if y == 0.0 { -1.0 } else { (y - mu) / mu.max(1e-290) };
            (mu, w, eta + r)
        }
    }
}

/// Linear predictor for free-layout coefficients.
pub(crate) fn eta_from_coefs(
    ds: &GroupedDataset,
    layout: &Layout,
    coefs: &DVector<f64>,
) -> DVector<f64> {
    let n = ds.n();
    let x = ds.x();
    let z = ds.z();
    let mut eta = DVector::zeros(n);
    for i in 0..n {
        let mut v = 0.0;
        for j in 0..layout.p {
            v += x[(i, j)] * coefs[j];
        }
        eta[i] = v;
    }
    if layout.with_gamma {
        for g in 0..ds.n_groups() {
            if let Some(off) = layout.gamma_offset(g) {
                for i in ds.group_range(g) {
                    let mut v = 0.0;
                    for a in 0..layout.d {
                        v += z[(i, a)] * coefs[off + a];
                    }
                    eta[i] += v;
                }
            }
        }
    }
    eta
}

/// Penalized log-likelihood at free-layout coefficients.
pub(crate) fn penalized_loglik(
    ds: &GroupedDataset,
    fam: Family,
    layout: &Layout,
    coefs: &DVector<f64>,
    theta: f64,
    omega_inv: Option<&DMatrix<f64>>,
) -> f64 {
    let eta = eta_from_coefs(ds, layout, coefs);
    let y = ds.y();
    let mut ll = 0.0;
    for i in 0..ds.n() {
        ll += fam.loglik_obs(y[i], eta[i], theta);
    }
    if let (true, Some(oi)) = (layout.with_gamma, omega_inv) {
        for g in 0..ds.n_groups() {
            if let Some(off) = layout.gamma_offset(g) {
                let gam = coefs.rows(off, layout.d);
                ll -= 0.5 * (oi * gam).dot(&gam.into_owned());
            }
        }
    }
    ll
}

/// One Eq.-update proposal: solve the penalized weighted normal equations at
/// the current state and return the proposed free-layout coefficients.
pub fn irls_step(
    ds: &GroupedDataset,
    fam: Family,
    penalty: Option<&RidgePenalty>,
    theta: f64,
    state: &IrlsState,
) -> Result<DVector<f64>> {
    let layout = infer_layout(ds, penalty.is_some(), state.coefs.len())?;
    propose(ds, fam, penalty, theta, &layout, &state.coefs)
}

fn infer_layout(ds: &GroupedDataset, penalized: bool, n_free: usize) -> Result<Layout> {
    let (p, d, g) = (ds.p(), ds.d(), ds.n_groups());
    let candidates = [
        Layout { p, d, n_groups: g, pinned: None, with_gamma: false },
        Layout { p, d, n_groups: g, pinned: if penalized { None } else { Some(0) }, with_gamma: true },
        Layout { p, d, n_groups: g, pinned: None, with_gamma: true },
    ];
    candidates
        .into_iter()
        .find(|l| l.n_free() == n_free)
        .ok_or_else(|| {
            Error::InvalidData(format!("coefficient vector of length {n_free} matches no layout"))
        })
}

/// Assemble and solve the blocked system; returns proposed coefficients.
fn propose(
    ds: &GroupedDataset,
    fam: Family,
    penalty: Option<&RidgePenalty>,
    theta: f64,
    layout: &Layout,
    coefs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (p, d) = (layout.p, layout.d);
    let x = ds.x();
    let z = ds.z();
    let y = ds.y();
    let eta = eta_from_coefs(ds, layout, coefs);

    let s_block: Option<DMatrix<f64>> = match penalty {
        Some(pen) => {
            let mut oi = pen.omega_inv()?;
            oi *= fam.dispersion(theta);
            Some(oi)
        }
        None => None,
    };

    let mut f_mat = DMatrix::<f64>::zeros(p, p);
    let mut rx = DVector::<f64>::zeros(p);
    let mut schur = DMatrix::<f64>::zeros(p, p);
    let mut rhs_adj = DVector::<f64>::zeros(p);
    // Per-group pieces retained for the gamma backsolve.
    let mut group_pieces: Vec<Option<(DMatrix<f64>, Cholesky<f64, Dyn>, DVector<f64>)>> =
        Vec::with_capacity(ds.n_groups());

    let mut xrow = vec![0.0; p];
    for g in 0..ds.n_groups() {
        let in_system = layout.with_gamma && layout.gamma_offset(g).is_some();
        let mut b_g = DMatrix::<f64>::zeros(p, d);
        let mut d_g = DMatrix::<f64>::zeros(d, d);
        let mut rg = DVector::<f64>::zeros(d);
        for i in ds.group_range(g) {
            let (_, w, a) = working_parts(fam, y[i], eta[i], theta);
            for j in 0..p {
                xrow[j] = x[(i, j)];
            }
            for j in 0..p {
                let wxj = w * xrow[j];
                rx[j] += wxj * a;
                for k in 0..=j {
                    f_mat[(j, k)] += wxj * xrow[k];
                }
            }
            if in_system {
                for aidx in 0..d {
                    let zv = z[(i, aidx)];
                    let wz = w * zv;
                    rg[aidx] += wz * a;
                    for j in 0..p {
                        b_g[(j, aidx)] += wz * xrow[j];
                    }
                    for bidx in 0..=aidx {
                        d_g[(aidx, bidx)] += wz * z[(i, bidx)];
                    }
                }
            }
        }
        if !in_system {
            group_pieces.push(None);
            continue;
        }
        for aidx in 0..d {
            for bidx in 0..aidx {
                d_g[(bidx, aidx)] = d_g[(aidx, bidx)];
            }
        }
        if let Some(s) = &s_block {
            d_g += s;
        }
        let chol = Cholesky::new(d_g).ok_or_else(|| Error::RankDeficient {
            columns: vec![format!("group '{}'", ds.group_labels()[g])],
            context: "group block is singular (degenerate within-group design)".into(),
        })?;
        let dinv_bt = chol.solve(&b_g.transpose());
        schur += &b_g * &dinv_bt;
        rhs_adj += &b_g * chol.solve(&rg);
        group_pieces.push(Some((b_g, chol, rg)));
    }
    for j in 0..p {
        for k in 0..j {
            f_mat[(k, j)] = f_mat[(j, k)];
        }
    }

    let c_mat = &f_mat - &schur;
    let c_chol = Cholesky::new(c_mat.clone()).ok_or_else(|| {
        let cols = crate::data::dependent_columns(&weighted_design(ds, fam, &eta, theta))
            .unwrap_or_default()
            .into_iter()
            .filter(|&j| j < p)
            .map(|j| ds.col_names()[j].clone())
            .collect::<Vec<_>>();
        Error::RankDeficient {
            columns: if cols.is_empty() { vec!["<fixed block>".into()] } else { cols },
            context: "weighted fixed-effect system lost rank".into(),
        }
    })?;
    let beta = c_chol.solve(&(&rx - &rhs_adj));

    let mut out = DVector::zeros(layout.n_free());
    out.rows_mut(0, p).copy_from(&beta);
    for g in 0..ds.n_groups() {
        if let (Some(off), Some((b_g, chol, rg))) = (layout.gamma_offset(g), &group_pieces[g]) {
            let gam = chol.solve(&(rg - b_g.transpose() * &beta));
            out.rows_mut(off, d).copy_from(&gam);
        }
    }
    Ok(out)
}

/// sqrt(W) X for rank diagnosis when the fixed-effect system degenerates.
fn weighted_design(ds: &GroupedDataset, fam: Family, eta: &DVector<f64>, theta: f64) -> DMatrix<f64> {
    let (n, p) = (ds.n(), ds.p());
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        let (_, w, _) = working_parts(fam, ds.y()[i], eta[i], theta);
        let sw = w.sqrt();
        for j in 0..p {
            out[(i, j)] = sw * ds.x()[(i, j)];
        }
    }
    out
}

enum ThetaMode {
    Fixed(f64),
    /// Iterate at theta = 1 (Gaussian weights are free of theta), then set
    /// the ML estimate theta = RSS / N afterwards.
    ProfileGaussian,
}

fn drive(
    ds: &GroupedDataset,
    fam: Family,
    penalty: Option<&RidgePenalty>,
    theta_mode: ThetaMode,
    layout: Layout,
    opts: &IrlsOptions,
    estimator: EstimatorKind,
) -> Result<FitResult> {
    for i in 0..ds.n() {
        fam.check_support(ds.y()[i]).map_err(|e| match e {
            Error::Support { family, detail } => {
                Error::Support { family, detail: format!("{detail} (row {i} in group order)") }
            }
            other => other,
        })?;
    }
    let theta_iter = match theta_mode {
        ThetaMode::Fixed(t) => t,
        ThetaMode::ProfileGaussian => 1.0,
    };
    let omega_inv = match penalty {
        Some(p) => Some(p.omega_inv()?),
        None => None,
    };
    let obj = |c: &DVector<f64>| {
        penalized_loglik(ds, fam, &layout, c, theta_iter, omega_inv.as_ref())
    };

    let mut coefs = match &opts.start {
        Some(s) if s.len() == layout.n_free() => s.clone(),
        Some(s) => {
            return Err(Error::InvalidData(format!(
                "warm start has {} coefficients, layout needs {}",
                s.len(),
                layout.n_free()
            )));
        }
        None => DVector::zeros(layout.n_free()),
    };
    let mut q = obj(&coefs);
    let mut trace = vec![-2.0 * q];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        iterations = iter;
        let proposal = propose(ds, fam, penalty, theta_iter, &layout, &coefs)?;
        let mut accepted = None;
        let mut weight = 1.0;
        for _ in 0..=opts.max_halvings {
            let cand = &coefs * (1.0 - weight) + &proposal * weight;
            let qc = obj(&cand);
            if qc.is_finite() && qc >= q - 1e-12 * (1.0 + q.abs()) {
                accepted = Some((cand, qc));
                break;
            }
            weight *= 0.5;
        }
        let Some((cand, qc)) = accepted else {
            // No direction of improvement left beyond roundoff: plateau.
            converged = true;
            break;
        };
        let improve = qc - q;
        coefs = cand;
        q = qc;
        trace.push(-2.0 * q);
        if improve.abs() < opts.tol * (1.0 + q.abs()) {
            converged = true;
            break;
        }
    }

    let eta = eta_from_coefs(ds, &layout, &coefs);
    let n = ds.n();
    let mut mu = DVector::zeros(n);
    for i in 0..n {
        mu[i] = fam.link_inverse(eta[i]);
    }

    let theta_hat = match theta_mode {
        ThetaMode::Fixed(t) => t,
        ThetaMode::ProfileGaussian => {
            let rss: f64 = (0..n).map(|i| (ds.y()[i] - eta[i]).powi(2)).sum();
            rss / n as f64
        }
    };
    let mut loglik = 0.0;
    for i in 0..n {
        loglik += fam.loglik_obs(ds.y()[i], eta[i], theta_hat);
    }

    // Group-effect matrix with separation sentinels for unpenalized fits.
    let gcount = ds.n_groups();
    let mut gamma = DMatrix::zeros(gcount, layout.d);
    let mut separated = Vec::new();
    for g in 0..gcount {
        if let Some(off) = layout.gamma_offset(g) {
            for a in 0..layout.d {
                gamma[(g, a)] = coefs[off + a];
            }
            if penalty.is_none()
                && fam != Family::Gaussian
                && (0..layout.d).any(|a| gamma[(g, a)].abs() > SEPARATION_THRESHOLD)
            {
                separated.push(g);
                for a in 0..layout.d {
                    if gamma[(g, a)].abs() > SEPARATION_THRESHOLD {
                        gamma[(g, a)] = f64::INFINITY * gamma[(g, a)].signum();
                    }
                }
            }
        }
    }

    let p = layout.p;
    Ok(FitResult {
        estimator,
        family: fam,
        beta_hat: coefs.rows(0, p).into_owned(),
        alpha_hat: DVector::zeros(0),
        gamma_hat: gamma,
        theta_hat,
        omega: penalty.map(|pn| pn.omega.clone()),
        converged,
        iterations,
        trace,
        loglik,
        separated,
        pinned: if layout.with_gamma { layout.pinned } else { None },
        augment: None,
        layout,
        free_coefs: coefs,
        eta,
        mu,
    })
}

/// A group whose unpenalized intercept is infinite no matter the slopes:
/// all-0/all-1 Bernoulli outcomes, or all-zero Poisson counts.
fn degenerate_outcomes(ds: &GroupedDataset, fam: Family, g: usize) -> bool {
    let range = ds.group_range(g);
    match fam {
        Family::Gaussian => false,
        Family::Bernoulli => {
            let first = ds.y()[range.start];
            range.clone().all(|i| ds.y()[i] == first)
        }
        Family::Poisson => range.clone().all(|i| ds.y()[i] == 0.0),
    }
}

/// Unpenalized fixed-effects fit: one free d-block per group except a
/// pinned reference. The reference is the first group whose effect cannot
/// be trivially infinite (pinning a perfectly separated group would push
/// its divergence into the shared intercept instead). Gaussian fits
/// profile the dispersion and report the ML estimate RSS / N.
pub fn fit_fe(ds: &GroupedDataset, fam: Family) -> Result<FitResult> {
    fit_fe_with(ds, fam, &IrlsOptions::default())
}

pub fn fit_fe_with(ds: &GroupedDataset, fam: Family, opts: &IrlsOptions) -> Result<FitResult> {
    let pinned = (0..ds.n_groups())
        .find(|&g| !degenerate_outcomes(ds, fam, g))
        .unwrap_or(0);
    let layout = Layout {
        p: ds.p(),
        d: ds.d(),
        n_groups: ds.n_groups(),
        pinned: Some(pinned),
        with_gamma: true,
    };
    let theta = if fam.has_dispersion() { ThetaMode::ProfileGaussian } else { ThetaMode::Fixed(1.0) };
    drive(ds, fam, None, theta, layout, opts, EstimatorKind::GroupFe)
}

/// Ridge-penalized fit with penalty covariance `omega` and dispersion
/// `theta` (ignored outside the Gaussian family).
pub fn fit_regfe(
    ds: &GroupedDataset,
    fam: Family,
    penalty: &RidgePenalty,
    theta: f64,
) -> Result<FitResult> {
    fit_regfe_with(ds, fam, penalty, theta, &IrlsOptions::default())
}

pub fn fit_regfe_with(
    ds: &GroupedDataset,
    fam: Family,
    penalty: &RidgePenalty,
    theta: f64,
    opts: &IrlsOptions,
) -> Result<FitResult> {
    if penalty.omega.nrows() != ds.d() {
        return Err(Error::InvalidConfig(format!(
            "penalty is {} x {} but the random-effect design has {} columns",
            penalty.omega.nrows(),
            penalty.omega.ncols(),
            ds.d()
        )));
    }
    let layout = Layout {
        p: ds.p(),
        d: ds.d(),
        n_groups: ds.n_groups(),
        pinned: None,
        with_gamma: true,
    };
    drive(ds, fam, Some(penalty), ThetaMode::Fixed(theta), layout, opts, EstimatorKind::RegFe)
}

/// Pooled GLM: fixed effects only, group structure ignored.
pub fn fit_pooled(ds: &GroupedDataset, fam: Family) -> Result<FitResult> {
    fit_pooled_with(ds, fam, &IrlsOptions::default())
}

pub fn fit_pooled_with(ds: &GroupedDataset, fam: Family, opts: &IrlsOptions) -> Result<FitResult> {
    let layout = Layout {
        p: ds.p(),
        d: ds.d(),
        n_groups: ds.n_groups(),
        pinned: None,
        with_gamma: false,
    };
    let theta = if fam.has_dispersion() { ThetaMode::ProfileGaussian } else { ThetaMode::Fixed(1.0) };
    drive(ds, fam, None, theta, layout, opts, EstimatorKind::PooledGlm)
}
