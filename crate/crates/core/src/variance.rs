//! Cluster-robust sandwich variance for `β̂`, computed from the site summaries.
//!
//! ```text
//! V = (Σ W_k)⁻¹ (Σ P_k) (Σ W_k)⁻¹,   P_k = (Q_k − W_k β̂)(Q_k − W_k β̂)ᵀ
//! ```
//!
//! On exact summaries this equals the individual-level CR0 estimator; on privatized
//! summaries the same expression is the DP sandwich. Only scalar small-sample
//! corrections are available: leverage-based CR2/CR3 need individual residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::estimator::{FitResult, SiteWeights};
use crate::linalg::{inverse_symmetric, symmetrize};
use crate::summary::FederatedSummarySet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Correction {
    #[serde(rename = "CR0")]
    Cr0,
    /// `K / (K − 1)`
    #[serde(rename = "CR1")]
    Cr1,
    /// `K / (K − p)`
    #[serde(rename = "CR1p")]
    Cr1p,
    /// `K (N − 1) / ((K − 1)(N − p))`
    #[serde(rename = "CR1S")]
    Cr1s,
}

impl Correction {
    pub fn label(self) -> &'static str {
        match self {
            Correction::Cr0 => "CR0",
            Correction::Cr1 => "CR1",
            Correction::Cr1p => "CR1p",
            Correction::Cr1s => "CR1S",
        }
    }

    /// Multiplier applied to the CR0 matrix.
    pub fn factor(self, k: usize, n: usize, p: usize) -> Result<f64> {
        let (kf, nf, pf) = (k as f64, n as f64, p as f64);
        match self {
            Correction::Cr0 => Ok(1.0),
            Correction::Cr1 => {
                if k < 2 {
                    return Err(Error::Insufficient("CR1 needs K ≥ 2".into()));
                }
                Ok(kf / (kf - 1.0))
            }
            Correction::Cr1p => {
                if k <= p {
                    return Err(Error::Insufficient(format!("CR1p needs K > p (K = {k}, p = {p})")));
                }
                Ok(kf / (kf - pf))
            }
            Correction::Cr1s => {
                if k < 2 || n <= p {
                    return Err(Error::Insufficient(format!(
                        "CR1S needs K ≥ 2 and N > p (K = {k}, N = {n}, p = {p})"
                    )));
                }
                Ok(kf * (nf - 1.0) / ((kf - 1.0) * (nf - pf)))
            }
        }
    }
}

impl std::str::FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cr0" => Ok(Correction::Cr0),
            "cr1" => Ok(Correction::Cr1),
            "cr1p" => Ok(Correction::Cr1p),
            "cr1s" => Ok(Correction::Cr1s),
            other => Err(Error::invalid(format!("unknown correction `{other}`"))),
        }
    }
}

/// A `p × p` sandwich variance for `β̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustVariance {
    pub v: DMatrix<f64>,
    pub correction: Correction,
    /// Number of sites.
    pub k: usize,
    /// Pooled sample size.
    pub n: usize,
    pub se: Vec<f64>,
}

impl RobustVariance {
    fn new(v: DMatrix<f64>, correction: Correction, k: usize, n: usize) -> Self {
        let v = symmetrize(&v);
        let se = v.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect();
        Self { v, correction, k, n, se }
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }
}

/// Sandwich from per-site weights and a coefficient vector.
pub fn sandwich(
    weights: &[SiteWeights],
    beta: &DVector<f64>,
    k: usize,
    n: usize,
) -> Result<RobustVariance> {
    let p = beta.len();
    let mut bread = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for sw in weights {
        if sw.w.nrows() != p || sw.q.len() != p {
            return Err(Error::DimensionMismatch { expected: p, found: sw.q.len() });
        }
        bread += &sw.w;
        let score = &sw.q - &sw.w * beta;
        meat += &score * score.transpose();
    }
    let inv = inverse_symmetric(&bread)?;
    Ok(RobustVariance::new(&inv * meat * &inv, Correction::Cr0, k, n))
}

/// CR0 sandwich at a fitted model.
pub fn cr0(set: &FederatedSummarySet, fit: &FitResult) -> Result<RobustVariance> {
    if fit.per_site_weights.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            found: fit.per_site_weights.len(),
        });
    }
    let beta = DVector::from_column_slice(&fit.theta_hat.beta);
    sandwich(&fit.per_site_weights, &beta, set.len(), set.total_n())
}

/// Rescales `v` to the requested small-sample correction.
pub fn apply_correction(v: &RobustVariance, correction: Correction) -> Result<RobustVariance> {
    let p = v.p();
    let from = v.correction.factor(v.k, v.n, p)?;
    let to = correction.factor(v.k, v.n, p)?;
    Ok(RobustVariance::new(&v.v * (to / from), correction, v.k, v.n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldInterval {
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Quantile family for Wald intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quantile {
    #[default]
    Normal,
    /// Student t with `K − 1` degrees of freedom.
    StudentT,
}

/// `β̂_j ± z_{1−(1−level)/2} · se_j`.
pub fn wald_ci(
    beta: &[f64],
    v: &RobustVariance,
    level: f64,
    quantile: Quantile,
) -> Result<Vec<WaldInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    if beta.len() != v.se.len() {
        return Err(Error::DimensionMismatch { expected: v.se.len(), found: beta.len() });
    }
    let upper = 1.0 - (1.0 - level) / 2.0;
    let z = match quantile {
        Quantile::Normal => Normal::standard().inverse_cdf(upper),
        Quantile::StudentT => {
            if v.k < 2 {
                return Err(Error::Insufficient("t quantile needs K ≥ 2".into()));
            }
            StudentsT::new(0.0, 1.0, (v.k - 1) as f64)
                .map_err(|e| Error::invalid(e.to_string()))?
                .inverse_cdf(upper)
        }
    };
    Ok(beta
        .iter()
        .zip(&v.se)
        .map(|(&b, &se)| WaldInterval { estimate: b, se, lo: b - z * se, hi: b + z * se })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(k: usize, n: usize, p: usize) -> RobustVariance {
        RobustVariance::new(DMatrix::identity(p, p), Correction::Cr0, k, n)
    }

    #[test]
    fn correction_factors() {
        assert!((Correction::Cr1p.factor(20, 100, 7).unwrap() - 20.0 / 13.0).abs() < 1e-15);
        let cr1s = Correction::Cr1s.factor(20, 100, 7).unwrap();
        assert!((cr1s - (20.0 * 99.0) / (19.0 * 93.0)).abs() < 1e-15);
        assert!(Correction::Cr1.factor(10_000, 50_000, 7).unwrap() - 1.0 <= 1e-2);
        assert!(Correction::Cr1p.factor(10_000, 50_000, 7).unwrap() - 1.0 <= 1e-2);
        assert!(matches!(Correction::Cr1p.factor(7, 100, 7), Err(Error::Insufficient(_))));
    }

    #[test]
    fn corrections_compose_from_any_starting_label() {
        let base = rv(20, 100, 3);
        let p = apply_correction(&base, Correction::Cr1p).unwrap();
        let back = apply_correction(&p, Correction::Cr0).unwrap();
        assert!((back.v[(1, 1)] - 1.0).abs() < 1e-15);
        let one = apply_correction(&base, Correction::Cr1).unwrap();
        assert!(p.v[(0, 0)] >= one.v[(0, 0)] && one.v[(0, 0)] >= base.v[(0, 0)]);
    }

    #[test]
    fn wald_interval_reference_values() {
        let v = rv(50, 500, 1);
        let ci = wald_ci(&[0.0], &v, 0.95, Quantile::Normal).unwrap();
        assert!((ci[0].hi - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((ci[0].lo + 1.959_963_984_540_054).abs() < 1e-9);

        let zero = RobustVariance::new(DMatrix::zeros(1, 1), Correction::Cr0, 5, 20);
        let ci = wald_ci(&[2.5], &zero, 0.9, Quantile::Normal).unwrap();
        assert_eq!((ci[0].lo, ci[0].hi), (2.5, 2.5));

        let narrow = wald_ci(&[0.0], &v, 0.9, Quantile::Normal).unwrap();
        assert!(narrow[0].hi < 1.96);
        let t = wald_ci(&[0.0], &v, 0.95, Quantile::StudentT).unwrap();
        assert!(t[0].hi > 1.96);
        assert!(wald_ci(&[0.0], &v, 1.0, Quantile::Normal).is_err());
    }

    #[test]
    fn correction_parses_case_insensitively() {
        assert_eq!("CR1p".parse::<Correction>().unwrap(), Correction::Cr1p);
        assert_eq!("cr1s".parse::<Correction>().unwrap(), Correction::Cr1s);
        assert!("cr2".parse::<Correction>().is_err());
    }
}
