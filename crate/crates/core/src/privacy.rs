//! Gaussian-mechanism calibration and privatization of site summaries.
//!
//! The released query is the pair `(S_k, T_k)`. Noise is calibrated as
//!
//! ```text
//! σ_DP = Δ_F · √(2 ln(1.25/δ)) / ε
//! ```
//!
//! with `Δ_F` the Frobenius global sensitivity under replace-one-record adjacency.
//! Each noise matrix is symmetrized as `(U + Uᵀ)/2` after drawing, which is
//! post-processing and leaves `σ_DP` unchanged; off-diagonal noise then has
//! variance `σ²_DP / 2`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::summary::{ModelSpec, SiteSummary};

/// Relative tolerance when re-deriving `σ_DP` from a stored budget.
const SIGMA_CHECK_RTOL: f64 = 1e-12;

/// An `(ε, δ)` budget together with the sensitivity it was calibrated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
    delta_f: f64,
    sigma_dp: f64,
}

#[derive(Deserialize)]
struct RawBudget {
    epsilon: f64,
    delta: f64,
    delta_f: f64,
    sigma_dp: f64,
}

impl TryFrom<RawBudget> for PrivacyBudget {
    type Error = Error;

    fn try_from(raw: RawBudget) -> Result<Self> {
        let budget = PrivacyBudget::new(raw.epsilon, raw.delta, raw.delta_f)?;
        let rel = (budget.sigma_dp - raw.sigma_dp).abs() / budget.sigma_dp;
        if !(rel <= SIGMA_CHECK_RTOL) {
            return Err(Error::invalid(format!(
                "stored sigma_dp {} does not match the budget (expected {})",
                raw.sigma_dp, budget.sigma_dp
            )));
        }
        Ok(budget)
    }
}

/// `σ_DP = Δ_F √(2 ln(1.25/δ)) / ε`.
pub fn gaussian_sigma(epsilon: f64, delta: f64, delta_f: f64) -> f64 {
    delta_f * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64, delta_f: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
        }
        check_delta(delta)?;
        if !(delta_f > 0.0 && delta_f.is_finite()) {
            return Err(Error::Domain(format!("sensitivity must be positive, got {delta_f}")));
        }
        Ok(Self { epsilon, delta, delta_f, sigma_dp: gaussian_sigma(epsilon, delta, delta_f) })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn delta_f(&self) -> f64 {
        self.delta_f
    }

    pub fn sigma_dp(&self) -> f64 {
        self.sigma_dp
    }
}

/// How `ε` is chosen for a release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum CalibrationRule {
    /// A fixed `ε` against the supplied sensitivity.
    FixedEpsilon { epsilon: f64, delta_f: f64 },
    /// `ε(p) = 2p·ε₀` against the binary-design sensitivity `Δ_F = 2p`, so that
    /// `σ_DP = √(2 ln(1.25/δ)) / ε₀` does not depend on `p`.
    DimensionAdjusted { epsilon0: f64 },
}

/// Frobenius sensitivity of the Gram query `XᵀX` for binary covariates: `2p`.
///
/// Replacing a row `x` by `x'` changes the Gram matrix by `x xᵀ − x' x'ᵀ`, whose
/// norm is at most `‖x‖² + ‖x'‖² ≤ 2p`.
pub fn sensitivity_binary_gram(p: usize) -> f64 {
    2.0 * p as f64
}

/// Which part of the summary a bounded-record sensitivity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityQuery {
    /// `S_k` alone.
    SOnly,
    /// The pair `(S_k, T_k)` released as one query.
    Joint,
}

/// Conservative Frobenius sensitivity for records confined to the model's bounds.
///
/// Let `z = (y, x)` be a record, `r² = max ‖z‖²` over the bounding box and `D` the
/// box diameter. Replacing one record moves
///
/// * `S_k` by `z zᵀ − z' z'ᵀ`, bounded by `2r²`;
/// * `T_k = s sᵀ` by `a dᵀ + d aᵀ + z zᵀ − z' z'ᵀ` with `a` the sum of the other
///   `n_k − 1` records and `d = z − z'`, bounded by `2(n_k−1)·r·D + 2r² ≤ 2·n_k·r·max(r, D)`.
///
/// For boxes inside the nonnegative orthant `D ≤ r` and the `T` bound is `2·n_k·r²`.
/// The joint bound combines the two blocks in quadrature.
pub fn sensitivity_bounded(spec: &ModelSpec, n_k: usize, query: SensitivityQuery) -> Result<f64> {
    spec.validate()?;
    let cov = spec
        .covariate_bounds
        .as_ref()
        .ok_or_else(|| Error::invalid("covariate bounds are required for sensitivity"))?;
    let outcome = spec
        .outcome_bounds
        .ok_or_else(|| Error::invalid("outcome bounds are required for sensitivity"))?;
    if n_k == 0 {
        return Err(Error::invalid("n_k must be positive"));
    }
    let boxes = std::iter::once(outcome).chain(cov.iter().copied());
    let (mut r2, mut d2) = (0.0, 0.0);
    for (lo, hi) in boxes {
        r2 += f64::max(lo * lo, hi * hi);
        d2 += (hi - lo) * (hi - lo);
    }
    let r = r2.sqrt();
    let s_block = 2.0 * r2;
    match query {
        SensitivityQuery::SOnly => Ok(s_block),
        SensitivityQuery::Joint => {
            let t_block = 2.0 * n_k as f64 * r * r.max(d2.sqrt());
            Ok(s_block.hypot(t_block))
        }
    }
}

/// Turns a calibration rule into a budget for a `p`-column design.
pub fn calibrate(rule: CalibrationRule, delta: f64, p: usize) -> Result<PrivacyBudget> {
    check_delta(delta)?;
    match rule {
        CalibrationRule::FixedEpsilon { epsilon, delta_f } => {
            PrivacyBudget::new(epsilon, delta, delta_f)
        }
        CalibrationRule::DimensionAdjusted { epsilon0 } => {
            if p == 0 {
                return Err(Error::invalid("p must be at least 1"));
            }
            if !(epsilon0 > 0.0) {
                return Err(Error::Domain(format!("epsilon0 must be positive, got {epsilon0}")));
            }
            let two_p = 2.0 * p as f64;
            PrivacyBudget::new(two_p * epsilon0, delta, sensitivity_binary_gram(p))
        }
    }
}

/// Which summary entries receive noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NoiseScope {
    /// Every entry of `S_k` and `T_k`.
    Full,
    /// Only entries whose row or column is one of these summary coordinates (`1..=p`).
    Subset(Vec<usize>),
}

impl NoiseScope {
    fn mask(&self, dim: usize) -> Result<Vec<bool>> {
        match self {
            NoiseScope::Full => Ok(vec![true; dim]),
            NoiseScope::Subset(idx) => {
                let mut m = vec![false; dim];
                for &j in idx {
                    if j == 0 || j >= dim {
                        return Err(Error::invalid(format!(
                            "sensitive index {j} is outside 1..={}",
                            dim - 1
                        )));
                    }
                    m[j] = true;
                }
                Ok(m)
            }
        }
    }
}

/// Deterministic per-site generator derived from `(seed, site_id)`.
pub fn site_rng(seed: u64, site_id: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(site_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

/// Child seed for stream `parts` under `base`, e.g. a replicate index.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for part in parts {
        h.update(part.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// A `dim × dim` matrix of i.i.d. `N(0, σ²)` draws, symmetrized as `(U + Uᵀ)/2`.
pub fn symmetric_gaussian_noise<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            u[(i, j)] = sigma * z;
        }
    }
    crate::linalg::symmetrize(&u)
}

/// Releases a privatized copy of `summary`.
///
/// Noise for `S` and `T` is always drawn over the full matrix so that the draws do
/// not depend on the scope; the scope only decides which entries receive it.
pub fn privatize(
    summary: &SiteSummary,
    budget: &PrivacyBudget,
    scope: &NoiseScope,
    seed: u64,
) -> Result<SiteSummary> {
    if summary.privatized {
        return Err(Error::AlreadyPrivatized(summary.site_id.clone()));
    }
    let dim = summary.p() + 1;
    let mask = scope.mask(dim)?;
    let mut rng = site_rng(seed, &summary.site_id);
    let u1 = symmetric_gaussian_noise(dim, budget.sigma_dp, &mut rng);
    let u2 = symmetric_gaussian_noise(dim, budget.sigma_dp, &mut rng);

    let mut s = summary.s.clone();
    let mut t = summary.t.clone();
    for i in 0..dim {
        for j in 0..dim {
            if mask[i] || mask[j] {
                s[(i, j)] += u1[(i, j)];
                t[(i, j)] += u2[(i, j)];
            }
        }
    }
    Ok(SiteSummary {
        site_id: summary.site_id.clone(),
        n: summary.n,
        s,
        t,
        privatized: true,
        budget: Some(budget.clone()),
    })
}
