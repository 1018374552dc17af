//! Reconstruction of binary covariate matrices from (rounded, possibly noisy) Gram
//! matrices, used to audit how much a released `XᵀX` block discloses.
//!
//! A Gram matrix does not see row order, so the search runs over *pattern counts*:
//! how many rows equal each pattern `u ∈ {0,1}^p`. A count vector `c` is feasible
//! when `Σ_u c_u = n` and `Σ_u c_u u_j u_k = G_jk` for all `j ≤ k`. The all-zero
//! pattern never touches a constraint and simply absorbs the rows left over.
//!
//! The search adds one row at a time with non-decreasing pattern index (so each
//! multiset is visited once), patterns ordered by descending popcount. It prunes on
//! the residual Gram: entries can only decrease, a residual entry can drop by at most
//! one per remaining row, and a positive residual pair must still be covered by a
//! later pattern.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::privacy::{symmetric_gaussian_noise, PrivacyBudget};

/// Row-major binary matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryMatrix {
    n: usize,
    p: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if n == 0 || p == 0 {
            return Err(Error::invalid("binary matrix must be non-empty"));
        }
        let mut data = Vec::with_capacity(n * p);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(Error::invalid(format!("row {i} has {} entries, expected {p}", r.len())));
            }
            if r.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("row {i} is not binary")));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n, p, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Copy with rows in lexicographic order.
    pub fn sorted_rows(&self) -> BinaryMatrix {
        let mut rows = self.rows();
        rows.sort();
        BinaryMatrix { n: self.n, p: self.p, data: rows.concat() }
    }

    pub fn gram(&self) -> DMatrix<i64> {
        let mut g = DMatrix::zeros(self.p, self.p);
        for i in 0..self.n {
            let r = self.row(i);
            for j in 0..self.p {
                if r[j] == 1 {
                    for k in 0..self.p {
                        g[(j, k)] += i64::from(r[k]);
                    }
                }
            }
        }
        g
    }
}

/// Lexicographically sorts the rows of both matrices and counts disagreeing entries.
pub fn hamming_sorted(a: &BinaryMatrix, b: &BinaryMatrix) -> Result<usize> {
    if a.n != b.n || a.p != b.p {
        return Err(Error::invalid(format!(
            "shape mismatch: {}×{} vs {}×{}",
            a.n, a.p, b.n, b.p
        )));
    }
    let (a, b) = (a.sorted_rows(), b.sorted_rows());
    Ok(a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count())
}

/// A rounded Gram matrix and the number of rows it summarizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibilityInstance {
    gram: DMatrix<i64>,
    n: usize,
}

impl FeasibilityInstance {
    pub fn new(gram: DMatrix<i64>, n: usize) -> Result<Self> {
        if !gram.is_square() || gram.nrows() == 0 {
            return Err(Error::invalid("Gram matrix must be square and non-empty"));
        }
        if gram != gram.transpose() {
            return Err(Error::invalid("Gram matrix must be symmetric"));
        }
        if n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        Ok(Self { gram, n })
    }

    pub fn p(&self) -> usize {
        self.gram.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gram(&self) -> &DMatrix<i64> {
        &self.gram
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Largest `p` accepted (the search enumerates `2^p` patterns).
    pub p_max: usize,
    pub timeout: Duration,
    /// Optional deterministic cap on search nodes.
    pub max_nodes: Option<u64>,
    /// Clamp rounded entries into `[0, n]` (diagonal) and `[0, min(G_jj, G_kk)]`
    /// (off-diagonal) before solving.
    pub clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { p_max: 12, timeout: Duration::from_secs(10), max_nodes: None, clamp: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStatus {
    /// Exactly one feasible multiset of rows.
    Unique,
    /// Several feasible multisets; the first one found is returned.
    FeasibleMultiple,
    /// No feasible solution; the returned matrix minimizes the L1 constraint violation.
    InfeasibleRepaired,
    /// The search hit its time or node limit; the best incumbent is returned.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub status: AttackStatus,
    /// Rows in lexicographic order.
    pub x_hat: Option<BinaryMatrix>,
    /// `Σ_{j≤k} |G_jk − (X̂ᵀX̂)_jk|`.
    pub violation: u64,
    pub nodes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub reconstruction: Reconstruction,
    pub hamming: Option<usize>,
    /// 1 when a constraint-satisfying reconstruction equals the truth up to row order.
    pub matrix_rate: f64,
    /// `1 − hamming / (n p)`.
    pub element_rate: f64,
}

struct Patterns {
    p: usize,
    /// Nonzero patterns, descending popcount.
    bits: Vec<u32>,
    /// Upper-triangle pairs each pattern covers, as a bitmask over pair indices.
    covers: Vec<u128>,
    /// Pair indices covered by each pattern.
    pair_lists: Vec<Vec<usize>>,
    /// OR of `covers[r..]`.
    coverable_from: Vec<u128>,
    popcount: Vec<u32>,
}

fn pair_index(p: usize, j: usize, k: usize) -> usize {
    // Row-major upper triangle including the diagonal.
    j * p - j * (j + 1) / 2 + k
}

impl Patterns {
    fn new(p: usize) -> Self {
        let mut bits: Vec<u32> = (1..(1u32 << p)).collect();
        bits.sort_by(|a, b| b.count_ones().cmp(&a.count_ones()).then(b.cmp(a)));
        let mut covers = Vec::with_capacity(bits.len());
        let mut pair_lists = Vec::with_capacity(bits.len());
        for &u in &bits {
            let mut mask = 0u128;
            let mut list = Vec::new();
            for j in 0..p {
                if u >> j & 1 == 1 {
                    for k in j..p {
                        if u >> k & 1 == 1 {
                            let idx = pair_index(p, j, k);
                            mask |= 1u128 << idx;
                            list.push(idx);
                        }
                    }
                }
            }
            covers.push(mask);
            pair_lists.push(list);
        }
        let mut coverable_from = vec![0u128; bits.len() + 1];
        for r in (0..bits.len()).rev() {
            coverable_from[r] = coverable_from[r + 1] | covers[r];
        }
        let popcount = bits.iter().map(|b| b.count_ones()).collect();
        Self { p, bits, covers, pair_lists, coverable_from, popcount }
    }

    fn len(&self) -> usize {
        self.bits.len()
    }

    fn matrix(&self, counts: &[u32], n: usize) -> BinaryMatrix {
        let mut rows = Vec::with_capacity(n);
        for (r, &c) in counts.iter().enumerate() {
            let row: Vec<u8> = (0..self.p).map(|j| (self.bits[r] >> j & 1) as u8).collect();
            for _ in 0..c {
                rows.push(row.clone());
            }
        }
        rows.resize(n, vec![0; self.p]);
        rows.sort();
        BinaryMatrix { n, p: self.p, data: rows.concat() }
    }
}

struct Limits {
    start: Instant,
    timeout: Duration,
    max_nodes: Option<u64>,
    nodes: u64,
    aborted: bool,
}

impl Limits {
    fn tick(&mut self) -> bool {
        self.nodes += 1;
        if self.max_nodes.is_some_and(|m| self.nodes > m) {
            self.aborted = true;
        } else if self.nodes % 4096 == 0 && self.start.elapsed() > self.timeout {
            self.aborted = true;
        }
        self.aborted
    }
}

struct Search<'a> {
    pats: &'a Patterns,
    residual: Vec<i64>,
    counts: Vec<u32>,
    limits: Limits,
}

impl Search<'_> {
    fn positive_mask(&self) -> u128 {
        self.residual
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0)
            .fold(0u128, |m, (i, _)| m | 1u128 << i)
    }

    /// Exact feasibility: collects up to `limit` solutions.
    fn exact(&mut self, from: usize, remaining: usize, limit: usize, found: &mut Vec<Vec<u32>>) {
        if self.limits.tick() {
            return;
        }
        let positive = self.positive_mask();
        if positive == 0 {
            found.push(self.counts.clone());
            return;
        }
        if remaining == 0 || from >= self.pats.len() {
            return;
        }
        if positive & !self.pats.coverable_from[from] != 0 {
            return;
        }
        let m = remaining as i64;
        if self.residual.iter().any(|&r| r > m) {
            return;
        }
        let p = self.pats.p;
        let diag_sum: i64 = (0..p).map(|j| self.residual[pair_index(p, j, j)]).sum();
        if diag_sum > m * i64::from(self.pats.popcount[from]) {
            return;
        }
        for r in from..self.pats.len() {
            if self.pats.covers[r] & !positive != 0 {
                continue;
            }
            for &i in &self.pats.pair_lists[r] {
                self.residual[i] -= 1;
            }
            self.counts[r] += 1;
            self.exact(r, remaining - 1, limit, found);
            self.counts[r] -= 1;
            for &i in &self.pats.pair_lists[r] {
                self.residual[i] += 1;
            }
            if found.len() >= limit || self.limits.aborted {
                return;
            }
        }
    }

    fn lower_bound(&self, from: usize, remaining: usize) -> u64 {
        let coverable = self.pats.coverable_from[from.min(self.pats.len())];
        let m = remaining as i64;
        self.residual
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                if r < 0 {
                    (-r) as u64
                } else if r > 0 && coverable >> i & 1 == 0 {
                    r as u64
                } else {
                    (r - m).max(0) as u64
                }
            })
            .sum()
    }

    fn violation(&self) -> u64 {
        self.residual.iter().map(|r| r.unsigned_abs()).sum()
    }

    /// Branch and bound on the L1 violation.
    fn repair(&mut self, from: usize, remaining: usize, best: &mut (u64, Vec<u32>)) {
        if self.limits.tick() {
            return;
        }
        let here = self.violation();
        if here < best.0 {
            *best = (here, self.counts.clone());
        }
        if remaining == 0 || best.0 == 0 {
            return;
        }
        for r in from..self.pats.len() {
            for &i in &self.pats.pair_lists[r] {
                self.residual[i] -= 1;
            }
            if self.lower_bound(r, remaining - 1) < best.0 {
                self.counts[r] += 1;
                self.repair(r, remaining - 1, best);
                self.counts[r] -= 1;
            }
            for &i in &self.pats.pair_lists[r] {
                self.residual[i] += 1;
            }
            if self.limits.aborted || best.0 == 0 {
                return;
            }
        }
    }
}

fn new_search<'a>(pats: &'a Patterns, instance: &FeasibilityInstance, config: &AttackConfig) -> Search<'a> {
    let p = instance.p();
    let mut residual = vec![0i64; p * (p + 1) / 2];
    for j in 0..p {
        for k in j..p {
            residual[pair_index(p, j, k)] = instance.gram[(j, k)];
        }
    }
    Search {
        pats,
        residual,
        counts: vec![0; pats.len()],
        limits: Limits {
            start: Instant::now(),
            timeout: config.timeout,
            max_nodes: config.max_nodes,
            nodes: 0,
            aborted: false,
        },
    }
}

fn check_capacity(instance: &FeasibilityInstance, config: &AttackConfig) -> Result<()> {
    let p = instance.p();
    // Pair masks are u128 and patterns u32.
    let hard_cap = 15;
    if p > config.p_max || p > hard_cap {
        return Err(Error::Capacity { p, p_max: config.p_max.min(hard_cap) });
    }
    Ok(())
}

/// All feasible reconstructions (rows sorted), up to `limit`.
///
/// The flag reports whether the enumeration ran to completion.
pub fn enumerate_solutions(
    instance: &FeasibilityInstance,
    config: &AttackConfig,
    limit: usize,
) -> Result<(Vec<BinaryMatrix>, bool)> {
    check_capacity(instance, config)?;
    let pats = Patterns::new(instance.p());
    let mut search = new_search(&pats, instance, config);
    let mut found = Vec::new();
    if search.residual.iter().all(|&r| r >= 0) {
        search.exact(0, instance.n, limit, &mut found);
    }
    let complete = !search.limits.aborted && found.len() < limit;
    let mats = found.iter().map(|c| pats.matrix(c, instance.n)).collect();
    Ok((mats, complete))
}

/// Solves the 0–1 feasibility problem for `instance`.
pub fn reconstruct(instance: &FeasibilityInstance, config: &AttackConfig) -> Result<Reconstruction> {
    check_capacity(instance, config)?;
    let pats = Patterns::new(instance.p());
    let n = instance.n;
    let mut search = new_search(&pats, instance, config);

    let mut found = Vec::new();
    if search.residual.iter().all(|&r| r >= 0) {
        search.exact(0, n, 2, &mut found);
    }
    if let Some(first) = found.first() {
        let status = if search.limits.aborted {
            AttackStatus::Failed
        } else if found.len() == 1 {
            AttackStatus::Unique
        } else {
            AttackStatus::FeasibleMultiple
        };
        return Ok(Reconstruction {
            status,
            x_hat: Some(pats.matrix(first, n)),
            violation: 0,
            nodes: search.limits.nodes,
        });
    }
    if search.limits.aborted {
        // The all-zero matrix is the trivial incumbent.
        let zero = vec![0; pats.len()];
        let violation = search.violation();
        return Ok(Reconstruction {
            status: AttackStatus::Failed,
            x_hat: Some(pats.matrix(&zero, n)),
            violation,
            nodes: search.limits.nodes,
        });
    }

    let mut best = (search.violation(), vec![0; pats.len()]);
    search.repair(0, n, &mut best);
    let status = if search.limits.aborted {
        AttackStatus::Failed
    } else {
        AttackStatus::InfeasibleRepaired
    };
    Ok(Reconstruction {
        status,
        x_hat: Some(pats.matrix(&best.1, n)),
        violation: best.0,
        nodes: search.limits.nodes,
    })
}

/// Rounds a real Gram matrix: the upper triangle is rounded and mirrored.
pub fn round_gram(g: &DMatrix<f64>, n: usize, clamp: bool) -> DMatrix<i64> {
    let p = g.nrows();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            out[(j, k)] = g[(j, k)].round() as i64;
            out[(k, j)] = out[(j, k)];
        }
    }
    if clamp {
        for j in 0..p {
            out[(j, j)] = out[(j, j)].clamp(0, n as i64);
        }
        for j in 0..p {
            for k in (j + 1)..p {
                let cap = out[(j, j)].min(out[(k, k)]);
                out[(j, k)] = out[(j, k)].clamp(0, cap);
                out[(k, j)] = out[(j, k)];
            }
        }
    }
    out
}

/// Releases `true_x`'s Gram matrix (optionally through the Gaussian mechanism),
/// rounds it, reconstructs, and scores the reconstruction against the truth.
pub fn attack_pipeline(
    true_x: &BinaryMatrix,
    budget: Option<&PrivacyBudget>,
    seed: u64,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let (n, p) = (true_x.n(), true_x.p());
    if p > config.p_max {
        return Err(Error::Capacity { p, p_max: config.p_max });
    }
    let mut released = true_x.gram().map(|v| v as f64);
    if let Some(b) = budget {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        released += symmetric_gaussian_noise(p, b.sigma_dp(), &mut rng);
    }
    let instance = FeasibilityInstance::new(round_gram(&released, n, config.clamp), n)?;
    let reconstruction = reconstruct(&instance, config)?;
    let hamming = match &reconstruction.x_hat {
        Some(x) => Some(hamming_sorted(x, true_x)?),
        None => None,
    };
    let (matrix_rate, element_rate) = match hamming {
        Some(h) => {
            let hit = reconstruction.violation == 0 && h == 0;
            (f64::from(u8::from(hit)), 1.0 - h as f64 / (n * p) as f64)
        }
        None => (0.0, 0.0),
    };
    Ok(AttackResult { reconstruction, hamming, matrix_rate, element_rate })
}
