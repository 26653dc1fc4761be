//! Grouped datasets: validation, group-sorted storage, and the two
//! group-level design augmentations used by the bias-corrected estimators.
//!
//! A dataset is stored sorted by group so that every group's rows are
//! contiguous; the permutation back to input order is retained. Groups are
//! re-indexed densely (0..G) in ascending order of their original labels,
//! numerically when every label parses as a number, lexicographically
//! otherwise.

use crate::error::{Error, Result};
use crate::family::Family;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Random-effect design specification per observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZSpec {
    /// Random intercept only: Z = 1 (d = 1).
    InterceptOnly,
    /// Random intercept plus slopes on the listed X columns (d = 1 + len).
    WithColumns(Vec<usize>),
}

impl ZSpec {
    pub fn dim(&self) -> usize {
        match self {
            ZSpec::InterceptOnly => 1,
            ZSpec::WithColumns(cols) => 1 + cols.len(),
        }
    }
}

/// Augmentation scheme for bias-corrected estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentScheme {
    /// Append per-group means of each non-intercept X column.
    GroupMeans,
    /// Append the within-group projection of each non-intercept X column
    /// onto that group's Z columns. Coincides with `GroupMeans` when Z is
    /// intercept-only.
    WithinProjection,
}

/// How a test-time design reuses training-group information.
#[derive(Debug, Clone)]
pub struct AugmentInfo {
    pub scheme: AugmentScheme,
    /// Number of appended columns.
    pub q: usize,
    /// Per-group d x q coefficient matrices: appended columns for a row in
    /// group g are z_row' * coef[g]. For `GroupMeans` this is the 1 x q row
    /// of group means.
    pub coef: Vec<DMatrix<f64>>,
}

/// Outcomes, designs, and group structure, stored sorted by group.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    group_ids: Vec<usize>,
    group_starts: Vec<usize>,
    group_labels: Vec<String>,
    perm: Vec<usize>,
    col_names: Vec<String>,
    intercept_col: usize,
    z_spec: ZSpec,
}

const RANK_TOL: f64 = 1e-10;

impl GroupedDataset {
    /// Build a dataset from parallel arrays. `x` must contain a column of
    /// ones (the intercept); columns must be linearly independent. Rows may
    /// arrive in any order; they are sorted by group label.
    pub fn build(
        y: Vec<f64>,
        x: DMatrix<f64>,
        groups: &[String],
        col_names: Vec<String>,
        z_spec: ZSpec,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        if x.nrows() != n || groups.len() != n {
            return Err(Error::InvalidData(format!(
                "length mismatch: y has {n} rows, x has {}, groups has {}",
                x.nrows(),
                groups.len()
            )));
        }
        let p = x.ncols();
        if col_names.len() != p {
            return Err(Error::InvalidData(format!(
                "{} column names for {} columns",
                col_names.len(),
                p
            )));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidData(format!("non-finite outcome at row {i}")));
            }
        }
        for j in 0..p {
            for i in 0..n {
                if !x[(i, j)].is_finite() {
                    return Err(Error::InvalidData(format!(
                        "non-finite value in column '{}' at row {i}",
                        col_names[j]
                    )));
                }
            }
        }

        let intercept_col = (0..p)
            .find(|&j| (0..n).all(|i| x[(i, j)] == 1.0))
            .ok_or_else(|| Error::InvalidData("design has no intercept column of ones".into()))?;

        // Dense group ids in ascending label order (numeric when possible).
        let mut labels: Vec<String> = groups.to_vec();
        labels.sort();
        labels.dedup();
        if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
            labels.sort_by(|a, b| {
                a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap())
            });
        }
        let label_index: std::collections::HashMap<&str, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| label_index[groups[i].as_str()]);

        let g_count = labels.len();
        let mut ys = DVector::zeros(n);
        let mut xs = DMatrix::zeros(n, p);
        let mut group_ids = Vec::with_capacity(n);
        for (row, &src) in perm.iter().enumerate() {
            ys[row] = y[src];
            for j in 0..p {
                xs[(row, j)] = x[(src, j)];
            }
            group_ids.push(label_index[groups[src].as_str()]);
        }
        let mut group_starts = vec![0usize; g_count + 1];
        for &g in &group_ids {
            group_starts[g + 1] += 1;
        }
        for g in 0..g_count {
            group_starts[g + 1] += group_starts[g];
        }

        let z = build_z(&xs, &z_spec)?;

        let ds = GroupedDataset {
            y: ys,
            x: xs,
            z,
            group_ids,
            group_starts,
            group_labels: labels,
            perm,
            col_names,
            intercept_col,
            z_spec,
        };
        ds.check_rank()?;
        Ok(ds)
    }

    /// Read a dataset from CSV. The header row is required; the `y` and
    /// `group` columns are mandatory and every remaining column is a
    /// numeric covariate. Missing or non-numeric cells are rejected with
    /// their position. An intercept column of ones is prepended.
    pub fn from_csv<R: std::io::Read>(reader: R, family: Family, z_spec: ZSpec) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find("y").ok_or_else(|| Error::CsvContract("missing column 'y'".into()))?;
        let g_col =
            find("group").ok_or_else(|| Error::CsvContract("missing column 'group'".into()))?;
        let cov_cols: Vec<usize> =
            (0..headers.len()).filter(|&j| j != y_col && j != g_col).collect();

        let mut y = Vec::new();
        let mut groups = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = idx + 2; // header is line 1
            let cell = |j: usize| -> Result<&str> {
                let v = rec.get(j).unwrap_or("");
                if v.trim().is_empty() {
                    return Err(Error::CsvContract(format!(
                        "missing value at line {line}, column '{}'",
                        &headers[j]
                    )));
                }
                Ok(v.trim())
            };
            let yv: f64 = cell(y_col)?.parse().map_err(|_| {
                Error::CsvContract(format!("non-numeric outcome at line {line}"))
            })?;
            family.check_support(yv)?;
            y.push(yv);
            groups.push(cell(g_col)?.to_string());
            let mut row = Vec::with_capacity(cov_cols.len());
            for &j in &cov_cols {
                row.push(cell(j)?.parse().map_err(|_| {
                    Error::CsvContract(format!(
                        "non-numeric value at line {line}, column '{}'",
                        &headers[j]
                    ))
                })?);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::CsvContract("no data rows".into()));
        }

        let n = rows.len();
        let p = cov_cols.len() + 1;
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for (k, v) in rows[i].iter().enumerate() {
                x[(i, k + 1)] = *v;
            }
        }
        let mut names = vec!["intercept".to_string()];
        names.extend(cov_cols.iter().map(|&j| headers[j].to_string()));
        GroupedDataset::build(y, x, &groups, names, z_spec)
    }

    /// The same dataset with a different random-effect design.
    pub fn with_z_spec(mut self, z_spec: ZSpec) -> Result<Self> {
        self.z = build_z(&self.x, &z_spec)?;
        self.z_spec = z_spec;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn d(&self) -> usize {
        self.z.ncols()
    }
    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn z_spec(&self) -> &ZSpec {
        &self.z_spec
    }
    pub fn group_ids(&self) -> &[usize] {
        &self.group_ids
    }
    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }
    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }
    pub fn intercept_col(&self) -> usize {
        self.intercept_col
    }
    /// Row range of group `g` in sorted storage.
    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        self.group_starts[g]..self.group_starts[g + 1]
    }
    pub fn group_size(&self, g: usize) -> usize {
        self.group_starts[g + 1] - self.group_starts[g]
    }
    /// Sorted row i came from input row `perm()[i]`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Indices of non-intercept columns.
    pub fn covariate_cols(&self) -> Vec<usize> {
        (0..self.p()).filter(|&j| j != self.intercept_col).collect()
    }

    /// Covariates eligible for augmentation: non-intercept columns that are
    /// not part of the random-effect design (projecting a Z column onto the
    /// Z span returns itself, which would only add collinearity).
    pub fn augment_cols(&self) -> Vec<usize> {
        let z_cols: &[usize] = match &self.z_spec {
            ZSpec::InterceptOnly => &[],
            ZSpec::WithColumns(cols) => cols,
        };
        (0..self.p())
            .filter(|&j| j != self.intercept_col && !z_cols.contains(&j))
            .collect()
    }

    fn check_rank(&self) -> Result<()> {
        if let Some(dep) = dependent_columns(&self.x) {
            return Err(Error::RankDeficient {
                columns: dep.iter().map(|&j| self.col_names[j].clone()).collect(),
                context: "fixed-effect design".into(),
            });
        }
        Ok(())
    }

    /// Append augmentation columns for a bias-corrected fit.
    pub fn augment(&self, scheme: AugmentScheme) -> Result<(GroupedDataset, AugmentInfo)> {
        let coef = self.augment_coefficients(scheme)?;
        let info = AugmentInfo { scheme, q: self.augment_cols().len(), coef };
        let ds = self.apply_augmentation(&info)?;
        Ok((ds, info))
    }

    /// Per-group coefficient matrices mapping a Z row to augmentation values.
    fn augment_coefficients(&self, scheme: AugmentScheme) -> Result<Vec<DMatrix<f64>>> {
        let covs = self.augment_cols();
        let q = covs.len();
        let d = self.d();
        let mut out = Vec::with_capacity(self.n_groups());
        for g in 0..self.n_groups() {
            let range = self.group_range(g);
            let ng = range.len() as f64;
            match scheme {
                AugmentScheme::GroupMeans => {
                    // 1 x q row of means; ignores any slope columns in Z.
                    let mut m = DMatrix::zeros(d, q);
                    for (k, &j) in covs.iter().enumerate() {
                        let s: f64 = range.clone().map(|i| self.x[(i, j)]).sum();
                        m[(0, k)] = s / ng;
                    }
                    out.push(m);
                }
                AugmentScheme::WithinProjection => {
                    // Least-squares coefficients of X_g's covariate columns
                    // on Z_g, via pseudo-inverse with tolerance relative to
                    // the largest singular value.
                    let zg = self.z.rows(range.start, range.len()).into_owned();
                    let xg = {
                        let mut m = DMatrix::zeros(range.len(), q);
                        for (k, &j) in covs.iter().enumerate() {
                            for (r, i) in range.clone().enumerate() {
                                m[(r, k)] = self.x[(i, j)];
                            }
                        }
                        m
                    };
                    let ztz = zg.transpose() * &zg;
                    let ztx = zg.transpose() * &xg;
                    let svd = ztz.svd(true, true);
                    let tol = RANK_TOL * svd.singular_values.max();
                    let coef = svd.solve(&ztx, tol).map_err(|e| {
                        Error::SingularSystem(format!("group projection for group {g}: {e}"))
                    })?;
                    out.push(coef);
                }
            }
        }
        Ok(out)
    }

    /// Build the augmented dataset using (possibly foreign) per-group
    /// coefficients — test designs reuse the training groups' coefficients.
    /// Groups are matched by label; unseen labels are an error.
    pub fn apply_augmentation(&self, info: &AugmentInfo) -> Result<GroupedDataset> {
        if info.coef.len() != self.n_groups() {
            return Err(Error::InvalidData(format!(
                "augmentation has {} groups, dataset has {}",
                info.coef.len(),
                self.n_groups()
            )));
        }
        let covs = self.augment_cols();
        let q = covs.len();
        let n = self.n();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p + q);
        x.view_mut((0, 0), (n, p)).copy_from(&self.x);
        for g in 0..self.n_groups() {
            let coef = &info.coef[g];
            for i in self.group_range(g) {
                let zrow = self.z.row(i);
                for k in 0..q {
                    let mut v = 0.0;
                    for a in 0..self.d() {
                        v += zrow[a] * coef[(a, k)];
                    }
                    x[(i, p + k)] = v;
                }
            }
        }
        let mut names = self.col_names.clone();
        let tag = match info.scheme {
            AugmentScheme::GroupMeans => "mean",
            AugmentScheme::WithinProjection => "proj",
        };
        for &j in &covs {
            names.push(format!("{}({})", tag, self.col_names[j]));
        }
        let ds = GroupedDataset {
            y: self.y.clone(),
            x,
            z: self.z.clone(),
            group_ids: self.group_ids.clone(),
            group_starts: self.group_starts.clone(),
            group_labels: self.group_labels.clone(),
            perm: self.perm.clone(),
            col_names: names,
            intercept_col: self.intercept_col,
            z_spec: self.z_spec.clone(),
        };
        ds.check_rank().map_err(|e| match e {
            Error::RankDeficient { columns, .. } => Error::RankDeficient {
                columns,
                context: "augmented design (a covariate may be constant within groups)".into(),
            },
            other => other,
        })?;
        Ok(ds)
    }

    /// The fitted augmentation values themselves (N x q), for diagnostics.
    pub fn augmentation_values(&self, info: &AugmentInfo) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, info.q);
        for g in 0..self.n_groups().min(info.coef.len()) {
            let coef = &info.coef[g];
            for i in self.group_range(g) {
                for k in 0..info.q {
                    let mut v = 0.0;
                    for a in 0..self.d() {
                        v += self.z[(i, a)] * coef[(a, k)];
                    }
                    out[(i, k)] = v;
                }
            }
        }
        out
    }
}

fn build_z(x: &DMatrix<f64>, spec: &ZSpec) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    match spec {
        ZSpec::InterceptOnly => Ok(DMatrix::from_element(n, 1, 1.0)),
        ZSpec::WithColumns(cols) => {
            let d = 1 + cols.len();
            let mut z = DMatrix::zeros(n, d);
            for i in 0..n {
                z[(i, 0)] = 1.0;
            }
            for (k, &c) in cols.iter().enumerate() {
                if c >= x.ncols() {
                    return Err(Error::InvalidData(format!(
                        "z column index {c} out of range for {} columns",
                        x.ncols()
                    )));
                }
                for i in 0..n {
                    z[(i, k + 1)] = x[(i, c)];
                }
            }
            Ok(z)
        }
    }
}

/// Pivoted Gram–Schmidt rank check. Returns the indices of columns that are
/// (numerically) linear combinations of the others, or None if full rank.
/// Tolerance is relative to each column's original norm.
pub(crate) fn dependent_columns(x: &DMatrix<f64>) -> Option<Vec<usize>> {
    let (n, p) = (x.nrows(), x.ncols());
    if p > n {
        return Some((n..p).collect());
    }
    let mut cols: Vec<DVector<f64>> = (0..p).map(|j| x.column(j).into_owned()).collect();
    let orig_norm: Vec<f64> = cols.iter().map(|c| c.norm()).collect();
    let mut remaining: Vec<usize> = (0..p).collect();
    let mut dependent = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while let Some(&best) = remaining
        .iter()
        .max_by(|&&a, &&b| cols[a].norm().total_cmp(&cols[b].norm()))
    {
        let norm = cols[best].norm();
        if norm <= RANK_TOL * orig_norm[best].max(1.0) {
            // Everything left is in the span of the accepted columns.
            dependent.extend(remaining.iter().copied());
            break;
        }
        let qcol = &cols[best] / norm;
        remaining.retain(|&j| j != best);
        for &j in &remaining {
            let proj = qcol.dot(&cols[j]);
            cols[j] -= &qcol * proj;
        }
        basis.push(qcol);
    }
    if dependent.is_empty() {
        None
    } else {
        dependent.sort();
        Some(dependent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn names(p: usize) -> Vec<String> {
        (0..p)
            .map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") })
            .collect()
    }

    #[test]
    fn sorts_rows_by_group_and_keeps_permutation() {
        // groups [2,1,2,1] with y [1,2,3,4] must store y as [2,4,1,3].
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 1.0, 20.0, 1.0, 30.0, 1.0, 40.0]);
        let ds =
            GroupedDataset::build(y, x, &labels(&["2", "1", "2", "1"]), names(2), ZSpec::InterceptOnly)
                .unwrap();
        assert_eq!(ds.y().as_slice(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(ds.group_ids(), &[0, 0, 1, 1]);
        assert_eq!(ds.group_labels(), &["1".to_string(), "2".to_string()]);
        assert_eq!(ds.perm(), &[1, 3, 0, 2]);
        assert_eq!(ds.group_range(0), 0..2);
        assert_eq!(ds.group_range(1), 2..4);
        // x rows follow y.
        assert_eq!(ds.x()[(0, 1)], 20.0);
        assert_eq!(ds.x()[(3, 1)], 30.0);
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let y = vec![0.0; 3];
        let x = DMatrix::from_element(3, 1, 1.0);
        let ds = GroupedDataset::build(
            y,
            x,
            &labels(&["10", "2", "10"]),
            vec!["intercept".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap();
        assert_eq!(ds.group_labels(), &["2".to_string(), "10".to_string()]);
    }

    #[test]
    fn rejects_missing_intercept_and_bad_values() {
        let x = DMatrix::from_row_slice(2, 1, &[2.0, 3.0]);
        let err = GroupedDataset::build(
            vec![0.0, 1.0],
            x,
            &labels(&["a", "b"]),
            vec!["x1".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap_err();
        assert!(err.to_string().contains("intercept"));

        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let err = GroupedDataset::build(
            vec![0.0, f64::NAN],
            x,
            &labels(&["a", "b"]),
            vec!["intercept".into()],
            ZSpec::InterceptOnly,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn rank_deficiency_names_columns() {
        // x2 = 2 * x1.
        let x = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0],
        );
        let err = GroupedDataset::build(
            vec![0.0; 4],
            x,
            &labels(&["a", "a", "b", "b"]),
            names(3),
            ZSpec::InterceptOnly,
        )
        .unwrap_err();
        match err {
            Error::RankDeficient { columns, .. } => {
                assert!(columns.contains(&"x1".to_string()) || columns.contains(&"x2".to_string()));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let csv_ok = "y,x1,group\n1,0.5,a\n0,-0.25,b\n1,1.5,a\n";
        let ds = GroupedDataset::from_csv(csv_ok.as_bytes(), Family::Bernoulli, ZSpec::InterceptOnly)
            .unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.col_names(), &["intercept".to_string(), "x1".to_string()]);
        assert_eq!(ds.group_labels(), &["a".to_string(), "b".to_string()]);

        let missing = "y,x1,group\n1,,a\n";
        let err = GroupedDataset::from_csv(missing.as_bytes(), Family::Bernoulli, ZSpec::InterceptOnly)
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("x1"), "{err}");

        let bad_y = "y,x1,group\n2,0.1,a\n";
        assert!(
            GroupedDataset::from_csv(bad_y.as_bytes(), Family::Bernoulli, ZSpec::InterceptOnly)
                .is_err()
        );

        let no_group = "y,x1\n1,0.1\n";
        assert!(
            GroupedDataset::from_csv(no_group.as_bytes(), Family::Bernoulli, ZSpec::InterceptOnly)
                .is_err()
        );
    }

    #[test]
    fn group_means_oracle() {
        let y = vec![0.0; 5];
        let x = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 2.0, 1.0, 4.0, 1.0, 10.0, 1.0, 20.0, 1.0, 30.0],
        );
        let ds = GroupedDataset::build(
            y,
            x,
            &labels(&["a", "a", "b", "b", "b"]),
            names(2),
            ZSpec::InterceptOnly,
        )
        .unwrap();
        let (aug, info) = ds.augment(AugmentScheme::GroupMeans).unwrap();
        assert_eq!(aug.p(), 3);
        assert_eq!(aug.col_names()[2], "mean(x1)");
        let col = aug.x().column(2);
        assert_eq!(col.as_slice(), &[3.0, 3.0, 20.0, 20.0, 20.0]);
        assert_eq!(info.coef[0][(0, 0)], 3.0);
        assert_eq!(info.coef[1][(0, 0)], 20.0);
    }

    #[test]
    fn projection_matches_group_means_for_intercept_z() {
        let y = vec![0.0; 6];
        let mut x = DMatrix::zeros(6, 2);
        for i in 0..6 {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = (i as f64).sin() * 3.0;
        }
        let ds = GroupedDataset::build(
            y,
            x,
            &labels(&["a", "a", "a", "b", "b", "b"]),
            names(2),
            ZSpec::InterceptOnly,
        )
        .unwrap();
        let (aug_m, _) = ds.augment(AugmentScheme::GroupMeans).unwrap();
        let (aug_p, _) = ds.augment(AugmentScheme::WithinProjection).unwrap();
        for i in 0..6 {
            assert!((aug_m.x()[(i, 2)] - aug_p.x()[(i, 2)]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_idempotent_and_residual_orthogonal() {
        // d = 2 random-slope design: z = [1, x2].
        let n = 9;
        let mut x = DMatrix::zeros(n, 3);
        let mut state = 0.37f64;
        for i in 0..n {
            state = (state * 997.0).fract();
            x[(i, 0)] = 1.0;
            x[(i, 1)] = state * 2.0 - 1.0;
            state = (state * 613.0 + 0.11).fract();
            x[(i, 2)] = state;
        }
        let ds = GroupedDataset::build(
            vec![0.0; n],
            x,
            &labels(&["a", "a", "a", "a", "b", "b", "b", "b", "b"]),
            vec!["intercept".into(), "x1".into(), "x2".into()],
            ZSpec::WithColumns(vec![2]),
        )
        .unwrap();
        let (_, info) = ds.augment(AugmentScheme::WithinProjection).unwrap();
        let proj = ds.augmentation_values(&info);

        // Idempotence: projecting the projected values changes nothing.
        for g in 0..ds.n_groups() {
            let range = ds.group_range(g);
            let zg = ds.z().rows(range.start, range.len()).into_owned();
            let pg = proj.rows(range.start, range.len()).into_owned();
            let ztz = zg.transpose() * &zg;
            let coef2 = ztz.clone().lu().solve(&(zg.transpose() * &pg)).unwrap();
            let again = &zg * &coef2;
            assert!((&again - &pg).amax() < 1e-10, "group {g}");

            // Orthogonality: Z_g' (X_g - proj_g) = 0.
            let covs = ds.augment_cols();
            let mut xg = DMatrix::zeros(range.len(), covs.len());
            for (k, &j) in covs.iter().enumerate() {
                for (r, i) in range.clone().enumerate() {
                    xg[(r, k)] = ds.x()[(i, j)];
                }
            }
            let resid = &xg - &pg;
            let cross = zg.transpose() * resid;
            assert!(cross.amax() < 1e-9, "group {g}: {}", cross.amax());
        }
    }

    #[test]
    fn augmentation_commutes_with_row_permutation() {
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut x = DMatrix::zeros(8, 2);
        for i in 0..8 {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = (i as f64 * 1.3).cos();
        }
        let g = labels(&["b", "a", "b", "a", "c", "c", "a", "b"]);
        let ds1 = GroupedDataset::build(y.clone(), x.clone(), &g, names(2), ZSpec::InterceptOnly)
            .unwrap();
        // Shuffle rows deterministically and rebuild.
        let order = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let y2: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let mut x2 = DMatrix::zeros(8, 2);
        let g2: Vec<String> = order.iter().map(|&i| g[i].clone()).collect();
        for (r, &i) in order.iter().enumerate() {
            x2[(r, 0)] = x[(i, 0)];
            x2[(r, 1)] = x[(i, 1)];
        }
        let ds2 = GroupedDataset::build(y2, x2, &g2, names(2), ZSpec::InterceptOnly).unwrap();
        let (a1, _) = ds1.augment(AugmentScheme::GroupMeans).unwrap();
        let (a2, _) = ds2.augment(AugmentScheme::GroupMeans).unwrap();
        // Same sorted content regardless of input order (rows within a group
        // keep input relative order, but group means are order-free).
        assert_eq!(a1.group_labels(), a2.group_labels());
        for gidx in 0..a1.n_groups() {
            let r1 = a1.group_range(gidx);
            let r2 = a2.group_range(gidx);
            assert_eq!(r1.len(), r2.len());
            let m1: f64 = r1.clone().map(|i| a1.x()[(i, 2)]).sum::<f64>() / r1.len() as f64;
            let m2: f64 = r2.clone().map(|i| a2.x()[(i, 2)]).sum::<f64>() / r2.len() as f64;
            assert!((m1 - m2).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_within_group_covariate_fails_augmented_rank_check() {
        // x1 varies only across groups, so mean(x1) duplicates x1.
        let y = vec![0.0; 4];
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 1.0, 5.0, 1.0, 9.0, 1.0, 9.0]);
        let ds = GroupedDataset::build(
            y,
            x,
            &labels(&["a", "a", "b", "b"]),
            names(2),
            ZSpec::InterceptOnly,
        )
        .unwrap();
        assert!(ds.augment(AugmentScheme::GroupMeans).is_err());
    }
}
