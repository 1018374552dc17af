//! Dense reference computations on raw `(y, X)` data.
//!
//! Everything here works on the full per-site covariance `Σ_k = σ²I + τ²11ᵀ` or on
//! brute-force enumeration, with no knowledge of the summary representation, so the
//! library's summary-based results can be checked against it.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

/// One site's raw data.
#[derive(Debug, Clone)]
pub struct Site {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

fn sigma(n: usize, sigma2: f64, tau2: f64) -> DMatrix<f64> {
    DMatrix::from_element(n, n, tau2) + DMatrix::identity(n, n) * sigma2
}

fn inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("matrix is invertible")
}

/// `−½ Σ_k [log|Σ_k| + r_kᵀ Σ_k⁻¹ r_k]` (no `2π` term).
pub fn loglik_ml(sites: &[Site], beta: &DVector<f64>, sigma2: f64, tau2: f64) -> f64 {
    sites
        .iter()
        .map(|s| {
            let cov = sigma(s.y.len(), sigma2, tau2);
            let r = &s.y - &s.x * beta;
            let quad = (r.transpose() * inverse(&cov) * &r)[(0, 0)];
            -0.5 * (cov.determinant().ln() + quad)
        })
        .sum()
}

/// GLS estimate and `Σ_k X_kᵀ Σ_k⁻¹ X_k`.
pub fn gls(sites: &[Site], sigma2: f64, tau2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let p = sites[0].x.ncols();
    let mut w = DMatrix::zeros(p, p);
    let mut q = DVector::zeros(p);
    for s in sites {
        let inv = inverse(&sigma(s.y.len(), sigma2, tau2));
        w += s.x.transpose() * &inv * &s.x;
        q += s.x.transpose() * &inv * &s.y;
    }
    (inverse(&w) * q, w)
}

/// Profiled ML log-likelihood at the GLS estimate.
pub fn profile_ml(sites: &[Site], sigma2: f64, tau2: f64) -> f64 {
    let (beta, _) = gls(sites, sigma2, tau2);
    loglik_ml(sites, &beta, sigma2, tau2)
}

/// Restricted log-likelihood: profile ML minus `½ log|Σ_k X_kᵀ Σ_k⁻¹ X_k|`.
pub fn reml(sites: &[Site], sigma2: f64, tau2: f64) -> f64 {
    let (beta, w) = gls(sites, sigma2, tau2);
    loglik_ml(sites, &beta, sigma2, tau2) - 0.5 * w.determinant().ln()
}

/// CR0 sandwich built from individual residuals.
pub fn sandwich_cr0(sites: &[Site], beta: &DVector<f64>, sigma2: f64, tau2: f64) -> DMatrix<f64> {
    let p = beta.len();
    let mut bread = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for s in sites {
        let inv = inverse(&sigma(s.y.len(), sigma2, tau2));
        bread += s.x.transpose() * &inv * &s.x;
        let u = s.x.transpose() * &inv * (&s.y - &s.x * beta);
        meat += &u * u.transpose();
    }
    let b = inverse(&bread);
    &b * meat * &b
}

/// Ordinary least squares on the stacked data.
pub fn ols(sites: &[Site]) -> DVector<f64> {
    let (beta, _) = gls(sites, 1.0, 0.0);
    beta
}

/// `(S, T)` by explicit row loops, `y` first.
pub fn summary(y: &DVector<f64>, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = x.ncols() + 1;
    let mut s = DMatrix::zeros(d, d);
    let mut total = vec![0.0; d];
    for i in 0..y.len() {
        let z: Vec<f64> = std::iter::once(y[i]).chain(x.row(i).iter().copied()).collect();
        for a in 0..d {
            total[a] += z[a];
            for b in 0..d {
                s[(a, b)] += z[a] * z[b];
            }
        }
    }
    let t = DMatrix::from_fn(d, d, |a, b| total[a] * total[b]);
    (s, t)
}

/// Balanced one-way ANOVA estimates `(σ², τ²)` from equal-size groups.
pub fn anova_balanced(groups: &[Vec<f64>]) -> (f64, f64) {
    let k = groups.len() as f64;
    let n = groups[0].len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / k;
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|m| n * (m - grand).powi(2)).sum();
    let msw = ssw / (k * (n - 1.0));
    let msb = ssb / (k - 1.0);
    (msw, (msb - msw) / n)
}

/// Every `n × p` binary matrix, rows given as bit patterns.
fn all_binary(n: usize, p: usize) -> impl Iterator<Item = Vec<Vec<u8>>> {
    let total = 1u64 << (n * p);
    (0..total).map(move |code| {
        (0..n)
            .map(|i| (0..p).map(|j| ((code >> (i * p + j)) & 1) as u8).collect())
            .collect()
    })
}

fn gram(rows: &[Vec<u8>], p: usize) -> Vec<i64> {
    let mut g = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for k in j..p {
            g.push(rows.iter().map(|r| i64::from(r[j] * r[k])).sum());
        }
    }
    g
}

/// Groups all `n × p` binary matrices (rows sorted) by the upper triangle of their
/// Gram matrix.
pub fn binary_gram_fibers(n: usize, p: usize) -> BTreeMap<Vec<i64>, BTreeSet<Vec<Vec<u8>>>> {
    let mut out: BTreeMap<Vec<i64>, BTreeSet<Vec<Vec<u8>>>> = BTreeMap::new();
    for mut rows in all_binary(n, p) {
        rows.sort();
        out.entry(gram(&rows, p)).or_default().insert(rows);
    }
    out
}

/// Largest Frobenius change of `XᵀX` when one row of an `n × p` binary matrix is
/// replaced.
pub fn max_adjacent_gram_change(n: usize, p: usize) -> f64 {
    let rows: Vec<Vec<u8>> = (0..1u32 << p)
        .map(|u| (0..p).map(|j| ((u >> j) & 1) as u8).collect())
        .collect();
    // The change only involves the replaced row, so n does not matter beyond n ≥ 1.
    assert!(n >= 1);
    let mut best = 0.0f64;
    for a in &rows {
        for b in &rows {
            let mut ss = 0.0;
            for j in 0..p {
                for k in 0..p {
                    let d = f64::from(a[j] * a[k]) - f64::from(b[j] * b[k]);
                    ss += d * d;
                }
            }
            best = best.max(ss.sqrt());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_site_without_random_effect_is_gaussian() {
        let site = Site {
            y: DVector::from_vec(vec![1.0, 2.0]),
            x: DMatrix::from_element(2, 1, 1.0),
        };
        let l = loglik_ml(&[site], &DVector::from_vec(vec![1.5]), 2.0, 0.0);
        let expected = -0.5 * (2.0 * 2.0f64.ln() + 0.5 / 2.0);
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn fibers_cover_every_matrix() {
        let fibers = binary_gram_fibers(3, 2);
        let count: usize = fibers.values().map(BTreeSet::len).sum();
        // Multisets of 3 rows from 4 patterns.
        assert_eq!(count, 20);
    }

    #[test]
    fn adjacent_change_is_p() {
        for p in 1..5 {
            assert!((max_adjacent_gram_change(2, p) - p as f64).abs() < 1e-12);
        }
    }
}
