//! Pooled ML / REML for the random-intercept model, evaluated from summaries only.
//!
//! With `c_k = τ²/(σ² + n_k τ²)` and `v = (1, −βᵀ)ᵀ`, the pooled log-likelihood is
//!
//! ```text
//! l(β, σ², τ²) = −½ Σ_k [ (n_k−1) ln σ² + ln(σ² + n_k τ²) + vᵀ (S_k − c_k T_k) v / σ² ]
//! ```
//!
//! which equals the dense individual-level likelihood (without the `2π` constant).
//! For fixed variance components the maximizing `β` is the GLS solution
//! `(Σ W_k)⁻¹ Σ Q_k`, so the fit reduces to a two-dimensional profile over `(σ², τ²)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logdet_spd, solve_symmetric};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::summary::FederatedSummarySet;

/// Model parameters `(β, σ², τ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "REML")]
    Reml,
}

/// Per-site GLS pieces `W_k = X_kᵀ Σ_k⁻¹ X_k` and `Q_k = X_kᵀ Σ_k⁻¹ y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteWeights {
    pub w: DMatrix<f64>,
    pub q: DVector<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Maximized objective (log-likelihood or restricted log-likelihood).
    pub objective: f64,
    pub method: Method,
    pub converged: bool,
    /// Objective evaluations spent by the optimizer.
    pub iterations: usize,
    /// The optimum sits on the `τ² = 0` edge.
    pub boundary_tau: bool,
    #[serde(skip)]
    pub per_site_weights: Vec<SiteWeights>,
}

/// Box, tolerances and restarts for the profile optimization.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Lower bound for `σ²`, relative to the outcome scale `Σ S_yy / N`.
    pub sigma2_min: f64,
    /// Upper bound for `σ²` and `τ²`, relative to the same scale.
    pub variance_max: f64,
    pub ftol_abs: f64,
    pub xtol_rel: f64,
    /// Evaluation budget per Nelder–Mead run.
    pub max_evals: usize,
    /// Starting points spread over the `(σ², τ²)` split of the OLS variance.
    pub starts: Vec<(f64, f64)>,
    /// Holds `τ²` fixed (required for a single site).
    pub fixed_tau2: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            sigma2_min: 1e-8,
            variance_max: 1e8,
            ftol_abs: 1e-10,
            xtol_rel: 1e-8,
            max_evals: 2000,
            starts: vec![(0.5, 0.5), (0.9, 0.1), (0.2, 0.8)],
            fixed_tau2: None,
        }
    }
}

fn check_variances(sigma2: f64, tau2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(Error::Domain(format!("tau2 must be nonnegative, got {tau2}")));
    }
    Ok(())
}

/// `c_k = τ²/(σ² + n_k τ²)`.
fn shrink(sigma2: f64, tau2: f64, n: usize) -> f64 {
    tau2 / (sigma2 + n as f64 * tau2)
}

/// Pooled ML log-likelihood evaluated site by site from the summaries.
pub fn loglik_ml(theta: &Theta, set: &FederatedSummarySet) -> Result<f64> {
    check_variances(theta.sigma2, theta.tau2)?;
    let p = set.p();
    if theta.beta.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: theta.beta.len() });
    }
    let (s2, t2) = (theta.sigma2, theta.tau2);
    let mut v = DVector::zeros(p + 1);
    v[0] = 1.0;
    for (j, b) in theta.beta.iter().enumerate() {
        v[j + 1] = -b;
    }
    let mut total = 0.0;
    for site in set.sites() {
        let n = site.n() as f64;
        let c = shrink(s2, t2, site.n());
        let m = site.s() - site.t() * c;
        let quad = v.dot(&(&m * &v));
        total += (n - 1.0) * s2.ln() + (s2 + n * t2).ln() + quad / s2;
    }
    Ok(-0.5 * total)
}

/// Per-site `W_k` and `Q_k` at the given variance components.
pub fn site_weights(set: &FederatedSummarySet, sigma2: f64, tau2: f64) -> Result<Vec<SiteWeights>> {
    check_variances(sigma2, tau2)?;
    let p = set.p();
    Ok(set
        .sites()
        .iter()
        .map(|site| {
            let c = shrink(sigma2, tau2, site.n());
            let m = (site.s() - site.t() * c) / sigma2;
            SiteWeights {
                w: m.view((1, 1), (p, p)).into_owned(),
                q: m.view((1, 0), (p, 1)).column(0).into_owned(),
            }
        })
        .collect())
}

/// Closed-form `β̂(σ², τ²)` with the summed information `Σ W_k` and score `Σ Q_k`.
#[derive(Debug, Clone)]
pub struct ProfileBeta {
    pub beta: DVector<f64>,
    pub w_sum: DMatrix<f64>,
    pub q_sum: DVector<f64>,
}

pub fn profile_beta(sigma2: f64, tau2: f64, set: &FederatedSummarySet) -> Result<ProfileBeta> {
    let weights = site_weights(set, sigma2, tau2)?;
    let p = set.p();
    let mut w_sum = DMatrix::zeros(p, p);
    let mut q_sum = DVector::zeros(p);
    for sw in &weights {
        w_sum += &sw.w;
        q_sum += &sw.q;
    }
    let beta = solve_symmetric(&w_sum, &q_sum)?;
    Ok(ProfileBeta { beta, w_sum, q_sum })
}

/// Sites grouped by `n_k`: the weight `c_k` depends on the site only through `n_k`,
/// so the combined matrix `Σ (S_k − c_k T_k)` needs one product per distinct size.
struct Profile {
    groups: Vec<SizeGroup>,
    n_total: usize,
    k: usize,
    p: usize,
}

struct SizeGroup {
    n: usize,
    count: usize,
    s: DMatrix<f64>,
    t: DMatrix<f64>,
}

struct ProfilePoint {
    value: f64,
    beta: DVector<f64>,
    /// Profiled residual quadratic form, which can only be non-positive for perturbed summaries.
    quad: f64,
}

impl Profile {
    fn new(set: &FederatedSummarySet) -> Self {
        let d = set.p() + 1;
        let mut by_size: BTreeMap<usize, SizeGroup> = BTreeMap::new();
        for site in set.sites() {
            let g = by_size.entry(site.n()).or_insert_with(|| SizeGroup {
                n: site.n(),
                count: 0,
                s: DMatrix::zeros(d, d),
                t: DMatrix::zeros(d, d),
            });
            g.count += 1;
            g.s += site.s();
            g.t += site.t();
        }
        Self {
            groups: by_size.into_values().collect(),
            n_total: set.total_n(),
            k: set.len(),
            p: set.p(),
        }
    }

    /// `Σ_k (S_k − c_k T_k)`.
    fn combined(&self, sigma2: f64, tau2: f64) -> DMatrix<f64> {
        let d = self.p + 1;
        let mut m = DMatrix::zeros(d, d);
        for g in &self.groups {
            m += &g.s;
            if tau2 > 0.0 {
                m -= &g.t * shrink(sigma2, tau2, g.n);
            }
        }
        m
    }

    /// `log |Σ| = Σ_k [(n_k−1) ln σ² + ln(σ² + n_k τ²)]`.
    fn logdet_sigma(&self, sigma2: f64, tau2: f64) -> f64 {
        let mut v = (self.n_total - self.k) as f64 * sigma2.ln();
        for g in &self.groups {
            v += g.count as f64 * (sigma2 + g.n as f64 * tau2).ln();
        }
        v
    }

    fn evaluate(&self, sigma2: f64, tau2: f64, method: Method) -> Result<ProfilePoint> {
        check_variances(sigma2, tau2)?;
        let p = self.p;
        let m = self.combined(sigma2, tau2);
        let w = m.view((1, 1), (p, p)) / sigma2;
        let q = m.view((1, 0), (p, 1)).column(0) / sigma2;
        let beta = solve_symmetric(&w, &q)?;
        let mut v = DVector::zeros(p + 1);
        v[0] = 1.0;
        v.rows_mut(1, p).copy_from(&(-&beta));
        let quad = v.dot(&(&m * &v)) / sigma2;
        let mut value = -0.5 * (self.logdet_sigma(sigma2, tau2) + quad);
        if method == Method::Reml {
            value -= 0.5 * logdet_spd(&w)?;
        }
        Ok(ProfilePoint { value, beta, quad })
    }

    /// Closed-form maximizer on the `τ² = 0` edge: `σ̂² = RSS/N` (ML) or `RSS/(N−p)` (REML).
    fn edge_sigma2(&self, method: Method) -> Result<f64> {
        let p = self.p;
        let m = self.combined(1.0, 0.0);
        let w = m.view((1, 1), (p, p)).into_owned();
        let q = m.view((1, 0), (p, 1)).column(0).into_owned();
        let beta = solve_symmetric(&w, &q)?;
        let rss = m[(0, 0)] - 2.0 * q.dot(&beta) + beta.dot(&(&w * &beta));
        let dof = match method {
            Method::Ml => self.n_total as f64,
            Method::Reml => self.n_total as f64 - p as f64,
        };
        Ok(rss / dof)
    }
}

/// The profile objective `g(σ², τ²) = l(β̂(σ², τ²), σ², τ²)` (ML) or its REML analogue.
pub fn profile_objective(
    sigma2: f64,
    tau2: f64,
    set: &FederatedSummarySet,
    method: Method,
) -> Result<f64> {
    Ok(Profile::new(set).evaluate(sigma2, tau2, method)?.value)
}

/// Restricted log-likelihood: the ML profile minus `½ log |Σ_k W_k|`.
pub fn reml_objective(sigma2: f64, tau2: f64, set: &FederatedSummarySet) -> Result<f64> {
    profile_objective(sigma2, tau2, set, Method::Reml)
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn softplus_inv(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Maximizes the ML profile likelihood over `σ² ∈ [σ²_min, σ²_max]`, `τ² ∈ [0, τ²_max]`.
pub fn fit_ml(set: &FederatedSummarySet, config: &OptimizerConfig) -> Result<FitResult> {
    fit(set, config, Method::Ml)
}

/// Maximizes the restricted likelihood. Refuses privatized summaries.
pub fn fit_reml(set: &FederatedSummarySet, config: &OptimizerConfig) -> Result<FitResult> {
    if set.any_privatized() {
        return Err(Error::RemlOnPrivatized);
    }
    fit(set, config, Method::Reml)
}

struct Candidate {
    sigma2: f64,
    tau2: f64,
    value: f64,
    converged: bool,
    boundary: bool,
}

fn fit(set: &FederatedSummarySet, config: &OptimizerConfig, method: Method) -> Result<FitResult> {
    if set.len() < 2 && config.fixed_tau2.is_none() {
        return Err(Error::Insufficient(
            "estimating tau2 needs at least two sites (or a fixed tau2)".into(),
        ));
    }
    let profile = Profile::new(set);
    if method == Method::Reml && profile.n_total <= profile.p {
        return Err(Error::Insufficient("REML needs N > p".into()));
    }

    let syy: f64 = set.sites().iter().map(|s| s.s()[(0, 0)]).sum();
    let mut scale = syy / profile.n_total as f64;
    if !(scale.is_finite() && scale > 0.0) {
        scale = 1.0;
    }
    let lo = config.sigma2_min * scale;
    let hi = config.variance_max * scale;
    let tau_hi = config.variance_max * scale;

    let objective = |s2: f64, t2: f64| -> f64 {
        if !(s2 >= lo && s2 <= hi && (0.0..=tau_hi).contains(&t2)) {
            return f64::NEG_INFINITY;
        }
        match profile.evaluate(s2, t2, method) {
            Ok(pt) if pt.value.is_finite() => pt.value,
            _ => f64::NEG_INFINITY,
        }
    };

    let opts = NelderMeadOptions {
        ftol_abs: config.ftol_abs,
        xtol_rel: config.xtol_rel,
        max_evals: config.max_evals,
        initial_step: 0.5,
    };
    let mut evals = 0usize;
    let mut interior: Option<Candidate> = None;
    let mut edge_fit: Option<Candidate> = None;

    let edge = profile.edge_sigma2(method).ok().filter(|v| v.is_finite());
    let v0 = edge.filter(|&v| v > lo).unwrap_or(scale);
    let tau_fixed_positive = config.fixed_tau2.filter(|&t| t > 0.0);
    if let Some(t2) = config.fixed_tau2 {
        check_variances(1.0, t2)?;
    }

    if config.fixed_tau2.is_none() || tau_fixed_positive.is_none() {
        if let Some(e) = edge {
            let s2 = e.clamp(lo, hi);
            evals += 1;
            let value = objective(s2, 0.0);
            edge_fit = Some(Candidate { sigma2: s2, tau2: 0.0, value, converged: true, boundary: true });
        }
    }

    if let Some(t2) = tau_fixed_positive {
        let m = nelder_mead(|u| -objective(u[0].exp(), t2), &[v0.ln()], &opts);
        evals += m.evals;
        interior = Some(Candidate {
            sigma2: m.x[0].exp(),
            tau2: t2,
            value: -m.fx,
            converged: m.converged,
            boundary: false,
        });
    } else if config.fixed_tau2.is_none() {
        let to_theta = |u: &[f64]| (u[0].exp(), scale * softplus(u[1]));
        let run = |start: [f64; 2], step: f64, evals: &mut usize| {
            let o = NelderMeadOptions { initial_step: step, ..opts };
            let m = nelder_mead(
                |u| {
                    let (s2, t2) = to_theta(u);
                    -objective(s2, t2)
                },
                &start,
                &o,
            );
            *evals += m.evals;
            m
        };
        let mut best: Option<crate::optim::Minimum> = None;
        for &(fs, ft) in &config.starts {
            let start = [(fs * v0).max(lo).ln(), softplus_inv((ft * v0 / scale).max(1e-12))];
            let m = run(start, 0.5, &mut evals);
            if best.as_ref().is_none_or(|b| m.fx < b.fx) {
                best = Some(m);
            }
        }
        if let Some(b) = best.filter(|b| b.fx.is_finite()) {
            // Restart from the incumbent with a fresh, smaller simplex.
            let polish = run([b.x[0], b.x[1]], 0.05, &mut evals);
            let m = if polish.fx <= b.fx { polish } else { b };
            let (s2, t2) = to_theta(&m.x);
            interior = Some(Candidate {
                sigma2: s2,
                tau2: t2,
                value: -m.fx,
                converged: m.converged,
                boundary: false,
            });
        }
    }

    let interior = interior.filter(|c| c.value.is_finite());
    let edge_fit = edge_fit.filter(|c| c.value.is_finite());
    // The edge wins ties: an interior run drifting towards τ² → 0 only approaches it.
    let chosen = match (interior, edge_fit) {
        (Some(i), Some(e)) => {
            if e.value + config.ftol_abs >= i.value {
                e
            } else {
                i
            }
        }
        (Some(c), None) | (None, Some(c)) => c,
        (None, None) => return Err(Error::Singular { condition: f64::INFINITY }),
    };

    let tau2 = if chosen.boundary { 0.0 } else { chosen.tau2 };
    let point = profile.evaluate(chosen.sigma2, tau2, method)?;
    // A non-positive residual quadratic means the likelihood is unbounded, so the
    // search stopped at the conditioning cutoff rather than at a maximum.
    let converged = chosen.converged && point.quad > 0.0;
    let per_site_weights = site_weights(set, chosen.sigma2, tau2)?;
    Ok(FitResult {
        theta_hat: Theta {
            beta: point.beta.iter().copied().collect(),
            sigma2: chosen.sigma2,
            tau2,
        },
        objective: point.value,
        method,
        converged,
        iterations: evals,
        boundary_tau: chosen.boundary,
        per_site_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::summary::{compute_summary, merge_summaries, SiteData};

    fn set_from(sites: &[(&[f64], &[&[f64]])]) -> FederatedSummarySet {
        let summaries = sites
            .iter()
            .enumerate()
            .map(|(k, (y, rows))| {
                let p = rows[0].len();
                let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
                let d = SiteData::new(
                    format!("s{k}"),
                    DVector::from_column_slice(y),
                    DMatrix::from_row_slice(y.len(), p, &flat),
                )
                .unwrap();
                compute_summary(&d)
            })
            .collect();
        merge_summaries(summaries).unwrap()
    }

    #[test]
    fn trivial_single_observation() {
        let set = set_from(&[(&[0.0], &[&[1.0]])]);
        let theta = Theta { beta: vec![0.0], sigma2: 1.0, tau2: 0.0 };
        assert_eq!(loglik_ml(&theta, &set).unwrap(), 0.0);
    }

    #[test]
    fn nonpositive_sigma2_is_a_domain_error() {
        let set = set_from(&[(&[0.0], &[&[1.0]])]);
        let theta = Theta { beta: vec![0.0], sigma2: 0.0, tau2: 0.0 };
        assert!(matches!(loglik_ml(&theta, &set), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_tau_gives_gaussian_ols_likelihood() {
        let set = set_from(&[
            (&[1.0, 2.0, 0.5], &[&[1.0, 0.2], &[1.0, 1.1], &[1.0, -0.3]]),
            (&[3.0, -1.0], &[&[1.0, 2.0], &[1.0, 0.7]]),
        ]);
        let ys = [1.0, 2.0, 0.5, 3.0, -1.0];
        let xs = [0.2, 1.1, -0.3, 2.0, 0.7];
        let (b0, b1, s2): (f64, f64, f64) = (0.3, 0.8, 1.7);
        let rss: f64 = ys.iter().zip(&xs).map(|(y, x)| (y - b0 - b1 * x).powi(2)).sum();
        let expected = -0.5 * (5.0 * s2.ln() + rss / s2);
        let theta = Theta { beta: vec![b0, b1], sigma2: s2, tau2: 0.0 };
        assert!((loglik_ml(&theta, &set).unwrap() - expected).abs() < 1e-12);

        let ols = profile_beta(2.0, 0.0, &set).unwrap().beta;
        let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        assert!((ols[1] - sxy / sxx).abs() < 1e-12);
        assert!((ols[0] - (my - sxy / sxx * mx)).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_columns_give_weighted_means() {
        // One site, two indicator columns: GLS reduces to per-group means.
        let set = set_from(&[(&[2.0, 4.0, 9.0], &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]])]);
        let pb = profile_beta(1.0, 0.0, &set).unwrap();
        assert!((pb.beta[0] - 3.0).abs() < 1e-12);
        assert!((pb.beta[1] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_profile_matches_site_by_site_likelihood() {
        let set = set_from(&[
            (&[1.0, 2.0], &[&[1.0, 0.2], &[1.0, 1.1]]),
            (&[0.0, 1.5], &[&[1.0, -0.4], &[1.0, 0.9]]),
            (&[3.0, -1.0, 0.2], &[&[1.0, 2.0], &[1.0, 0.7], &[1.0, 0.1]]),
        ]);
        for &(s2, t2) in &[(1.0, 0.0), (0.7, 0.4), (2.5, 3.0)] {
            let pb = profile_beta(s2, t2, &set).unwrap();
            let theta = Theta { beta: pb.beta.iter().copied().collect(), sigma2: s2, tau2: t2 };
            let direct = loglik_ml(&theta, &set).unwrap();
            let grouped = profile_objective(s2, t2, &set, Method::Ml).unwrap();
            assert!((direct - grouped).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn singular_design_is_reported() {
        let set = set_from(&[
            (&[1.0, 2.0], &[&[1.0, 1.0], &[1.0, 1.0]]),
            (&[0.0, 1.0], &[&[1.0, 1.0], &[1.0, 1.0]]),
        ]);
        assert!(matches!(profile_beta(1.0, 0.5, &set), Err(Error::Singular { .. })));
        assert!(fit_ml(&set, &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn single_site_needs_fixed_tau() {
        let set = set_from(&[(&[1.0, 2.0, 4.0], &[&[1.0], &[1.0], &[1.0]])]);
        assert!(matches!(fit_ml(&set, &OptimizerConfig::default()), Err(Error::Insufficient(_))));
        let cfg = OptimizerConfig { fixed_tau2: Some(0.0), ..Default::default() };
        let fit = fit_ml(&set, &cfg).unwrap();
        assert!((fit.theta_hat.beta[0] - 7.0 / 3.0).abs() < 1e-12);
        let rss = (1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2);
        assert!((fit.theta_hat.sigma2 - rss / 3.0).abs() < 1e-12);
        assert!(fit.boundary_tau);
    }

    #[test]
    fn fixed_positive_tau_optimizes_sigma_only() {
        let set = set_from(&[
            (&[1.0, 2.0, 4.0], &[&[1.0], &[1.0], &[1.0]]),
            (&[0.0, 3.0], &[&[1.0], &[1.0]]),
        ]);
        let cfg = OptimizerConfig { fixed_tau2: Some(0.5), ..Default::default() };
        let fit = fit_ml(&set, &cfg).unwrap();
        assert_eq!(fit.theta_hat.tau2, 0.5);
        assert!(fit.converged);
        let g = |s2: f64| profile_objective(s2, 0.5, &set, Method::Ml).unwrap();
        let s2 = fit.theta_hat.sigma2;
        assert!(g(s2) >= g(s2 * 1.001) && g(s2) >= g(s2 * 0.999));
    }
}
