#![allow(dead_code)]

use fedlmm::summary::{compute_summary, merge_summaries, FederatedSummarySet, SiteData};
use fedlmm_oracle::Site;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// A random multi-site instance with an intercept column and `N > p`.
pub struct Instance {
    pub sites: Vec<SiteData>,
    pub raw: Vec<Site>,
    pub p: usize,
}

impl Instance {
    pub fn set(&self) -> FederatedSummarySet {
        merge_summaries(self.sites.iter().map(compute_summary).collect()).unwrap()
    }
}

pub fn random_instance(rng: &mut ChaCha20Rng, k_range: (usize, usize), n_max: usize, p_max: usize) -> Instance {
    loop {
        let k = rng.random_range(k_range.0..=k_range.1);
        let p = rng.random_range(1..=p_max);
        let ns: Vec<usize> = (0..k).map(|_| rng.random_range(1..=n_max)).collect();
        if ns.iter().sum::<usize>() <= p + 1 {
            continue;
        }
        let beta: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let mut sites = Vec::new();
        let mut raw = Vec::new();
        for (i, &n) in ns.iter().enumerate() {
            let b: f64 = rng.sample(StandardNormal);
            let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            // Heteroskedastic noise so the sandwich differs from the model-based variance.
            let y = DVector::from_fn(n, |r, _| {
                let e: f64 = rng.sample(StandardNormal);
                (0..p).map(|j| x[(r, j)] * beta[j]).sum::<f64>() + b + e * (1.0 + x[(r, p - 1)].abs())
            });
            raw.push(Site { y: y.clone(), x: x.clone() });
            sites.push(SiteData::new(format!("s{i}"), y, x).unwrap());
        }
        return Instance { sites, raw, p };
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}
