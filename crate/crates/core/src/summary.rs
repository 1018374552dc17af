//! Site data, the quadratic site summaries `(S_k, T_k)` and their exchange format.
//!
//! Both summaries are `(p+1) × (p+1)` matrices indexed with the outcome first:
//! row/column 0 is `y`, rows/columns `1..=p` are the design columns. With
//! `z_i = (y_i, x_iᵀ)ᵀ` a site computes
//!
//! ```text
//! S_k = Σ_i z_i z_iᵀ            T_k = s sᵀ,  s = Σ_i z_i
//! ```
//!
//! which is everything the pooled random-intercept likelihood needs besides `n_k`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::PrivacyBudget;

/// Version written into every summary file.
pub const SCHEMA_VERSION: u32 = 1;
/// The only layout currently defined: index 0 is the outcome.
pub const LAYOUT_Y_FIRST: &str = "y-first";

/// Above this many rows the summaries are accumulated with compensated summation.
const COMPENSATED_THRESHOLD: usize = 10_000;

/// Raw data held by one site. Never leaves the site; only its summary does.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    site_id: String,
    y: DVector<f64>,
    x: DMatrix<f64>,
}

impl SiteData {
    pub fn new(site_id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let site_id = site_id.into();
        if y.is_empty() {
            return Err(Error::invalid(format!("site `{site_id}` has no rows")));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid(format!("site `{site_id}` has no design columns")));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: y.len(), found: x.nrows() });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("site `{site_id}`: non-finite outcome in row {i}")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            let (i, j) = (k % x.nrows(), k / x.nrows());
            return Err(Error::invalid(format!(
                "site `{site_id}`: non-finite design entry at row {i}, column {j}"
            )));
        }
        Ok(Self { site_id, y, x })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// The object a site releases: `n_k` in the clear plus `S_k` and `T_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSummary {
    pub(crate) site_id: String,
    pub(crate) n: usize,
    pub(crate) s: DMatrix<f64>,
    pub(crate) t: DMatrix<f64>,
    pub(crate) privatized: bool,
    pub(crate) budget: Option<PrivacyBudget>,
}

impl SiteSummary {
    /// Builds a summary from its parts, checking shape, finiteness and exact symmetry.
    ///
    /// For non-privatized summaries `S` must also be positive semidefinite and `T`
    /// of rank at most one (both within a small relative tolerance).
    pub fn from_parts(
        site_id: impl Into<String>,
        n: usize,
        s: DMatrix<f64>,
        t: DMatrix<f64>,
        privatized: bool,
        budget: Option<PrivacyBudget>,
    ) -> Result<Self> {
        let site_id = site_id.into();
        if n == 0 {
            return Err(Error::invalid(format!("site `{site_id}`: n must be positive")));
        }
        let d = s.nrows();
        if d < 2 || !s.is_square() {
            return Err(Error::invalid(format!("site `{site_id}`: S must be square with p ≥ 1")));
        }
        if t.shape() != s.shape() {
            return Err(Error::DimensionMismatch { expected: d, found: t.nrows() });
        }
        for (name, m) in [("S", &s), ("T", &t)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("site `{site_id}`: {name} has non-finite entries")));
            }
            for i in 0..d {
                for j in (i + 1)..d {
                    if m[(i, j)].to_bits() != m[(j, i)].to_bits() {
                        return Err(Error::invalid(format!(
                            "site `{site_id}`: {name} is not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        if privatized && budget.is_none() {
            return Err(Error::invalid(format!(
                "site `{site_id}`: privatized summary without a recorded budget"
            )));
        }
        if !privatized {
            check_psd(&site_id, &s)?;
            check_rank_one(&site_id, &t)?;
        }
        Ok(Self { site_id, n, s, t, privatized, budget })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of design columns.
    pub fn p(&self) -> usize {
        self.s.nrows() - 1
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn privatized(&self) -> bool {
        self.privatized
    }

    pub fn budget(&self) -> Option<&PrivacyBudget> {
        self.budget.as_ref()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SummaryFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SummaryFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

fn check_psd(site_id: &str, s: &DMatrix<f64>) -> Result<()> {
    let scale = s.diagonal().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min_eig = s.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-9 * scale {
        return Err(Error::invalid(format!(
            "site `{site_id}`: S is not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

fn check_rank_one(site_id: &str, t: &DMatrix<f64>) -> Result<()> {
    let d = t.nrows();
    let (m, tmm) = (0..d)
        .map(|i| (i, t[(i, i)]))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    if tmm < 0.0 {
        return Err(Error::invalid(format!("site `{site_id}`: T has a negative diagonal")));
    }
    if tmm == 0.0 {
        if t.iter().any(|&v| v != 0.0) {
            return Err(Error::invalid(format!("site `{site_id}`: T is not of the form s sᵀ")));
        }
        return Ok(());
    }
    let root = tmm.sqrt();
    let s = DVector::from_iterator(d, (0..d).map(|j| t[(m, j)] / root));
    let resid = (t - &s * s.transpose()).amax();
    if resid > 1e-9 * tmm {
        return Err(Error::invalid(format!(
            "site `{site_id}`: T is not of the form s sᵀ (residual {resid:.3e})"
        )));
    }
    Ok(())
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Computes `(S_k, T_k)` for one site.
pub fn compute_summary(data: &SiteData) -> SiteSummary {
    let n = data.n();
    let d = data.p() + 1;
    let z = |i: usize, j: usize| if j == 0 { data.y[i] } else { data.x[(i, j - 1)] };

    let mut s = DMatrix::zeros(d, d);
    let mut sums = vec![0.0; d];
    if n > COMPENSATED_THRESHOLD {
        let mut acc = vec![CompensatedSum::default(); d * d];
        let mut tot = vec![CompensatedSum::default(); d];
        for i in 0..n {
            for a in 0..d {
                let za = z(i, a);
                tot[a].add(za);
                for b in a..d {
                    acc[a * d + b].add(za * z(i, b));
                }
            }
        }
        for a in 0..d {
            sums[a] = tot[a].value();
            for b in a..d {
                s[(a, b)] = acc[a * d + b].value();
            }
        }
    } else {
        for i in 0..n {
            for a in 0..d {
                let za = z(i, a);
                sums[a] += za;
                for b in a..d {
                    s[(a, b)] += za * z(i, b);
                }
            }
        }
    }
    let mut t = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            t[(a, b)] = sums[a] * sums[b];
            t[(b, a)] = t[(a, b)];
            s[(b, a)] = s[(a, b)];
        }
    }
    SiteSummary {
        site_id: data.site_id.clone(),
        n,
        s,
        t,
        privatized: false,
        budget: None,
    }
}

/// The coordinator's view: every site's summary, kept separate because the
/// likelihood weights each site by its own `n_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSummarySet {
    sites: Vec<SiteSummary>,
}

impl FederatedSummarySet {
    pub fn sites(&self) -> &[SiteSummary] {
        &self.sites
    }

    pub fn into_sites(self) -> Vec<SiteSummary> {
        self.sites
    }

    /// Number of sites `K`.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn p(&self) -> usize {
        self.sites[0].p()
    }

    /// Pooled sample size `N = Σ n_k`.
    pub fn total_n(&self) -> usize {
        self.sites.iter().map(|s| s.n).sum()
    }

    pub fn any_privatized(&self) -> bool {
        self.sites.iter().any(|s| s.privatized)
    }
}

/// Collects site summaries, rejecting mixed dimensions and repeated site ids.
pub fn merge_summaries(sites: Vec<SiteSummary>) -> Result<FederatedSummarySet> {
    let first = sites
        .first()
        .ok_or_else(|| Error::Insufficient("no site summaries to merge".into()))?;
    let p = first.p();
    let mut seen = HashSet::new();
    for s in &sites {
        if s.p() != p {
            return Err(Error::DimensionMismatch { expected: p, found: s.p() });
        }
        if !seen.insert(s.site_id.as_str()) {
            return Err(Error::DuplicateSite(s.site_id.clone()));
        }
    }
    Ok(FederatedSummarySet { sites })
}

/// Model metadata: column names, intercept, sensitive columns and record bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// One name per design column (including the intercept column, if any).
    pub covariate_names: Vec<String>,
    /// Whether design column 0 is the intercept.
    pub intercept: bool,
    /// Summary coordinates (`1..=p`) of privacy-sensitive covariates.
    pub sensitive: Vec<usize>,
    /// Per design column `[lo, hi]` bounds; the intercept column is `[1, 1]`.
    pub covariate_bounds: Option<Vec<(f64, f64)>>,
    pub outcome_bounds: Option<(f64, f64)>,
}

impl ModelSpec {
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::invalid("model has no design columns"));
        }
        if let Some(&bad) = self.sensitive.iter().find(|&&j| j == 0 || j > p) {
            return Err(Error::invalid(format!(
                "sensitive index {bad} is outside the covariate range 1..={p}"
            )));
        }
        if let Some(bounds) = &self.covariate_bounds {
            if bounds.len() != p {
                return Err(Error::DimensionMismatch { expected: p, found: bounds.len() });
            }
            for (j, &(lo, hi)) in bounds.iter().enumerate() {
                check_bound(&self.covariate_names[j], lo, hi)?;
            }
        }
        if let Some((lo, hi)) = self.outcome_bounds {
            check_bound("outcome", lo, hi)?;
        }
        Ok(())
    }
}

fn check_bound(name: &str, lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::invalid(format!("bound for `{name}` must be finite with lo ≤ hi")));
    }
    Ok(())
}

/// Pooled means and standard deviations used to standardize, and how to undo it.
///
/// With an intercept in column 0 the outcome and the other columns are centred and
/// scaled; without one they are only scaled, which keeps the model invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub intercept: bool,
    pub y_mean: f64,
    pub y_sd: f64,
    /// Per design column; the intercept column has mean 0 and SD 1.
    pub col_means: Vec<f64>,
    pub col_sds: Vec<f64>,
}

impl StandardizationRecord {
    /// Linear map `β = A β̃ + c` from the standardized to the original scale.
    fn affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.col_means.len();
        let mut a = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        let start = usize::from(self.intercept);
        for j in start..p {
            a[(j, j)] = self.y_sd / self.col_sds[j];
        }
        if self.intercept {
            a[(0, 0)] = self.y_sd;
            for j in 1..p {
                a[(0, j)] = -self.y_sd * self.col_means[j] / self.col_sds[j];
            }
            c[0] = self.y_mean;
        }
        (a, c)
    }

    pub fn back_transform_beta(&self, beta: &[f64]) -> Vec<f64> {
        let (a, c) = self.affine();
        let b = DVector::from_column_slice(beta);
        (a * b + c).iter().copied().collect()
    }

    /// Variance components live on the squared outcome scale.
    pub fn back_transform_variance_component(&self, v: f64) -> f64 {
        v * self.y_sd * self.y_sd
    }

    pub fn back_transform_covariance(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, _) = self.affine();
        crate::linalg::symmetrize(&(&a * v * a.transpose()))
    }
}

/// Standardizes the pooled data (oracle/simulation path only).
pub fn standardize(
    sites: &[SiteData],
    intercept: bool,
) -> Result<(Vec<SiteData>, StandardizationRecord)> {
    let first = sites
        .first()
        .ok_or_else(|| Error::Insufficient("no sites to standardize".into()))?;
    let p = first.p();
    if let Some(s) = sites.iter().find(|s| s.p() != p) {
        return Err(Error::DimensionMismatch { expected: p, found: s.p() });
    }
    let total: usize = sites.iter().map(SiteData::n).sum();
    if total < 2 {
        return Err(Error::Insufficient("standardization needs at least two rows".into()));
    }

    let moments = |get: &dyn Fn(&SiteData, usize) -> f64| {
        let mut mean = CompensatedSum::default();
        for s in sites {
            for i in 0..s.n() {
                mean.add(get(s, i));
            }
        }
        let mean = mean.value() / total as f64;
        let mut ss = CompensatedSum::default();
        for s in sites {
            for i in 0..s.n() {
                let d = get(s, i) - mean;
                ss.add(d * d);
            }
        }
        (mean, (ss.value() / (total - 1) as f64).sqrt())
    };

    let (y_mean, y_sd) = moments(&|s, i| s.y[i]);
    if !(y_sd > 0.0) {
        return Err(Error::ZeroVariance("y".into()));
    }
    let mut col_means = vec![0.0; p];
    let mut col_sds = vec![1.0; p];
    for j in usize::from(intercept)..p {
        let (m, sd) = moments(&|s, i| s.x[(i, j)]);
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance(format!("x{j}")));
        }
        col_means[j] = m;
        col_sds[j] = sd;
    }
    if !intercept {
        // Centring without an intercept would change the model.
        col_means.iter_mut().for_each(|m| *m = 0.0);
    }
    let y_center = if intercept { y_mean } else { 0.0 };

    let out = sites
        .iter()
        .map(|s| {
            let y = s.y.map(|v| (v - y_center) / y_sd);
            let mut x = s.x.clone();
            for j in usize::from(intercept)..p {
                x.column_mut(j)
                    .apply(|v| *v = (*v - col_means[j]) / col_sds[j]);
            }
            SiteData { site_id: s.site_id.clone(), y, x }
        })
        .collect();
    let record = StandardizationRecord {
        intercept,
        y_mean: y_center,
        y_sd,
        col_means,
        col_sds,
    };
    Ok((out, record))
}

/// On-disk form of a [`SiteSummary`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct SummaryFile {
    pub schema_version: u32,
    pub site_id: String,
    pub n: usize,
    pub p: usize,
    pub layout: String,
    /// Row-major `(p+1)²` entries.
    #[serde(rename = "S")]
    pub s: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<f64>,
    pub privatized: bool,
    pub budget: Option<PrivacyBudget>,
    /// Optional names of the `p` design columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&SiteSummary> for SummaryFile {
    fn from(s: &SiteSummary) -> Self {
        SummaryFile {
            schema_version: SCHEMA_VERSION,
            site_id: s.site_id.clone(),
            n: s.n,
            p: s.p(),
            layout: LAYOUT_Y_FIRST.to_string(),
            s: row_major(&s.s),
            t: row_major(&s.t),
            privatized: s.privatized,
            budget: s.budget.clone(),
            columns: None,
        }
    }
}

impl TryFrom<SummaryFile> for SiteSummary {
    type Error = Error;

    fn try_from(f: SummaryFile) -> Result<Self> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported summary schema version {}",
                f.schema_version
            )));
        }
        if f.layout != LAYOUT_Y_FIRST {
            return Err(Error::invalid(format!("unsupported summary layout `{}`", f.layout)));
        }
        if let Some(cols) = &f.columns {
            if cols.len() != f.p {
                return Err(Error::DimensionMismatch { expected: f.p, found: cols.len() });
            }
        }
        let d = f.p + 1;
        for (name, v) in [("S", &f.s), ("T", &f.t)] {
            if v.len() != d * d {
                return Err(Error::invalid(format!(
                    "{name} has {} entries, expected (p+1)² = {}",
                    v.len(),
                    d * d
                )));
            }
        }
        let s = DMatrix::from_row_slice(d, d, &f.s);
        let t = DMatrix::from_row_slice(d, d, &f.t);
        SiteSummary::from_parts(f.site_id, f.n, s, t, f.privatized, f.budget)
    }
}
