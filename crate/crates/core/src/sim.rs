//! Seeded multi-site simulation: data generation, replicated IPD/DP/DP2 fits and the
//! reconstruction study, plus the aggregations used to read them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::attack::{attack_pipeline, AttackConfig, AttackStatus, BinaryMatrix};
use crate::error::{Error, Result};
use crate::estimator::{fit_ml, OptimizerConfig};
use crate::privacy::{calibrate, derive_seed, privatize, CalibrationRule, NoiseScope};
use crate::summary::{
    compute_summary, merge_summaries, standardize, FederatedSummarySet, SiteData,
    StandardizationRecord,
};
use crate::variance::{apply_correction, cr0, Correction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "ri-correct")]
    RiCorrect,
    #[serde(rename = "ri-mis")]
    RiMis,
    #[serde(rename = "ris-correct")]
    RisCorrect,
    #[serde(rename = "ris-mis")]
    RisMis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    RandomIntercept,
    /// Adds an independent site-level slope on `x1` with variance `τ²`.
    RandomInterceptSlope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    /// Intercept and all six covariates.
    Full,
    /// Intercept, `x1` and `x2` only.
    Underfit,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] =
        [ScenarioId::RiCorrect, ScenarioId::RiMis, ScenarioId::RisCorrect, ScenarioId::RisMis];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioId::RiCorrect => "ri-correct",
            ScenarioId::RiMis => "ri-mis",
            ScenarioId::RisCorrect => "ris-correct",
            ScenarioId::RisMis => "ris-mis",
        }
    }

    pub fn generator(self) -> Generator {
        match self {
            ScenarioId::RiCorrect | ScenarioId::RiMis => Generator::RandomIntercept,
            _ => Generator::RandomInterceptSlope,
        }
    }

    pub fn analysis(self) -> Analysis {
        match self {
            ScenarioId::RiCorrect | ScenarioId::RisCorrect => Analysis::Full,
            _ => Analysis::Underfit,
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario `{s}`")))
    }
}

/// Site sizes: with probability `small_prob` uniform on `small`, otherwise on `large`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeLaw {
    pub small_prob: f64,
    pub small: (usize, usize),
    pub large: (usize, usize),
}

impl Default for SizeLaw {
    fn default() -> Self {
        Self { small_prob: 0.8, small: (2, 10), large: (50, 100) }
    }
}

impl SizeLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = if rng.random::<f64>() < self.small_prob { self.small } else { self.large };
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateLaw {
    Bernoulli(f64),
    /// Mean zero, given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub k: usize,
    pub size_law: SizeLaw,
    /// Intercept first.
    pub beta0: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub covariates: Vec<CovariateLaw>,
}

impl Scenario {
    pub fn new(id: ScenarioId, k: usize) -> Self {
        use CovariateLaw::{Bernoulli, Normal};
        Self {
            id,
            k,
            size_law: SizeLaw::default(),
            beta0: vec![1.0, 0.5, 0.5, -1.0, -0.5, 1.0, -1.0],
            sigma2: 1.0,
            tau2: 1.0,
            covariates: vec![
                Bernoulli(0.5),
                Normal(1.0),
                Bernoulli(0.3),
                Bernoulli(0.7),
                Bernoulli(0.5),
                Normal(0.5),
            ],
        }
    }

    /// Design columns of the analysis model (0 is the intercept).
    pub fn analysis_columns(&self) -> Vec<usize> {
        match self.id.analysis() {
            Analysis::Full => (0..=self.covariates.len()).collect(),
            Analysis::Underfit => vec![0, 1, 2],
        }
    }

    /// True coefficients of the columns the analysis model keeps.
    pub fn analysis_beta0(&self) -> Vec<f64> {
        self.analysis_columns().iter().map(|&j| self.beta0[j]).collect()
    }

    /// Summary coordinates of `x4, x5, x6` present in the analysis model.
    pub fn sensitive_coordinates(&self) -> Vec<usize> {
        self.analysis_columns()
            .iter()
            .enumerate()
            .filter(|(_, &col)| (4..=6).contains(&col))
            .map(|(j, _)| j + 1)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        if self.beta0.len() != self.covariates.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.covariates.len() + 1,
                found: self.beta0.len(),
            });
        }
        if !(self.sigma2 > 0.0) || !(self.tau2 >= 0.0) {
            return Err(Error::Domain("variances must be positive".into()));
        }
        let law = &self.size_law;
        if !(0.0..=1.0).contains(&law.small_prob)
            || law.small.0 == 0
            || law.small.0 > law.small.1
            || law.large.0 > law.large.1
        {
            return Err(Error::invalid("invalid size law"));
        }
        Ok(())
    }
}

/// Draws one data set; each site's design holds the analysis columns.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<Vec<SiteData>> {
    scenario.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, scenario.sigma2.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let effect = Normal::new(0.0, scenario.tau2.sqrt()).map_err(|e| Error::Domain(e.to_string()))?;
    let laws: Vec<Box<dyn Fn(&mut ChaCha20Rng) -> f64>> = scenario
        .covariates
        .iter()
        .map(|law| -> Result<Box<dyn Fn(&mut ChaCha20Rng) -> f64>> {
            Ok(match *law {
                CovariateLaw::Bernoulli(p) => {
                    let d = Bernoulli::new(p).map_err(|e| Error::Domain(e.to_string()))?;
                    Box::new(move |r| f64::from(u8::from(d.sample(r))))
                }
                CovariateLaw::Normal(sd) => {
                    let d = Normal::new(0.0, sd).map_err(|e| Error::Domain(e.to_string()))?;
                    Box::new(move |r| d.sample(r))
                }
            })
        })
        .collect::<Result<_>>()?;
    let cols = scenario.analysis_columns();
    let slope = scenario.id.generator() == Generator::RandomInterceptSlope;
    let q = scenario.covariates.len();

    let mut sites = Vec::with_capacity(scenario.k);
    for k in 0..scenario.k {
        let n = scenario.size_law.sample(&mut rng);
        let b0 = effect.sample(&mut rng);
        let b1 = if slope { effect.sample(&mut rng) } else { 0.0 };
        let mut x = DMatrix::zeros(n, cols.len());
        let mut y = DVector::zeros(n);
        let mut full = vec![0.0; q + 1];
        full[0] = 1.0;
        for i in 0..n {
            for (m, law) in laws.iter().enumerate() {
                full[m + 1] = law(&mut rng);
            }
            let mean: f64 = full.iter().zip(&scenario.beta0).map(|(a, b)| a * b).sum();
            y[i] = mean + b0 + b1 * full[1] + eps.sample(&mut rng);
            for (j, &c) in cols.iter().enumerate() {
                x[(i, j)] = full[c];
            }
        }
        sites.push(SiteData::new(format!("site-{k:04}"), y, x)?);
    }
    Ok(sites)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "IPD")]
    Ipd,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "DP2")]
    Dp2,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Ipd => "IPD",
            Arm::Dp => "DP",
            Arm::Dp2 => "DP2",
        }
    }
}

/// One fitted arm of one replicate under one variance correction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario: ScenarioId,
    pub arm: Arm,
    /// `None` for the IPD arm.
    pub epsilon0: Option<f64>,
    pub k: usize,
    pub n_total: usize,
    pub replicate: usize,
    pub correction: Correction,
    /// Fit error or non-convergence; such rows are excluded from aggregates.
    pub failed: bool,
    pub l2_error: f64,
    pub l2_privacy_cost: f64,
    pub se_inflation: f64,
    /// Original-scale estimates.
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
}

impl MetricRow {
    /// Flat CSV header for `p` coefficients.
    pub fn csv_header(p: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "scenario", "arm", "epsilon0", "K", "N", "replicate", "correction", "failed",
            "l2_error", "l2_privacy_cost", "se_inflation",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..p).map(|j| format!("beta_{j}")));
        h.extend((0..p).map(|j| format!("se_{j}")));
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![
            self.scenario.label().to_string(),
            self.arm.label().to_string(),
            self.epsilon0.map_or_else(String::new, |e| e.to_string()),
            self.k.to_string(),
            self.n_total.to_string(),
            self.replicate.to_string(),
            self.correction.label().to_string(),
            self.failed.to_string(),
            self.l2_error.to_string(),
            self.l2_privacy_cost.to_string(),
            self.se_inflation.to_string(),
        ];
        r.extend(self.beta_hat.iter().map(f64::to_string));
        r.extend(self.se.iter().map(f64::to_string));
        r
    }
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub corrections: Vec<Correction>,
    pub optimizer: OptimizerConfig,
    /// Include the DP2 arm when the analysis model has sensitive covariates.
    pub dp2: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            corrections: vec![Correction::Cr0, Correction::Cr1p],
            optimizer: OptimizerConfig::default(),
            dp2: true,
        }
    }
}

struct ArmFit {
    beta: Vec<f64>,
    /// Original-scale standard errors, one vector per requested correction.
    se: Vec<Vec<f64>>,
    converged: bool,
}

fn fit_arm(
    set: &FederatedSummarySet,
    record: &StandardizationRecord,
    opts: &StudyOptions,
) -> Result<ArmFit> {
    let fit = fit_ml(set, &opts.optimizer)?;
    let base = cr0(set, &fit)?;
    let se = opts
        .corrections
        .iter()
        .map(|&c| {
            let v = apply_correction(&base, c)?;
            let v = record.back_transform_covariance(&v.v);
            Ok(v.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(ArmFit {
        beta: record.back_transform_beta(&fit.theta_hat.beta),
        se,
        converged: fit.converged,
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_replicate(
    scenario: &Scenario,
    epsilon0_grid: &[f64],
    replicate: usize,
    seed: u64,
    opts: &StudyOptions,
) -> Vec<MetricRow> {
    let rep_seed = derive_seed(seed, &[replicate as u64]);
    let p = scenario.analysis_columns().len();
    let truth = scenario.analysis_beta0();
    let sensitive = scenario.sensitive_coordinates();
    let mut arms = vec![(Arm::Dp, NoiseScope::Full)];
    if opts.dp2 && !sensitive.is_empty() {
        arms.push((Arm::Dp2, NoiseScope::Subset(sensitive)));
    }

    let mut rows = Vec::new();
    let template = MetricRow {
        scenario: scenario.id,
        arm: Arm::Ipd,
        epsilon0: None,
        k: scenario.k,
        n_total: 0,
        replicate,
        correction: Correction::Cr0,
        failed: true,
        l2_error: f64::NAN,
        l2_privacy_cost: f64::NAN,
        se_inflation: f64::NAN,
        beta_hat: vec![f64::NAN; p],
        se: vec![f64::NAN; p],
    };
    let mut emit = |arm: Arm, eps: Option<f64>, n_total: usize, fit: Option<&ArmFit>, ipd: Option<&ArmFit>| {
        for (c_idx, &correction) in opts.corrections.iter().enumerate() {
            let mut row = MetricRow { arm, epsilon0: eps, n_total, correction, ..template.clone() };
            if let Some(f) = fit {
                row.failed = !f.converged;
                row.l2_error = l2(&f.beta, &truth);
                row.beta_hat = f.beta.clone();
                row.se = f.se[c_idx].clone();
                match (arm, ipd) {
                    (Arm::Ipd, _) => {
                        row.l2_privacy_cost = 0.0;
                        row.se_inflation = 1.0;
                    }
                    (_, Some(base)) => {
                        row.l2_privacy_cost = l2(&f.beta, &base.beta);
                        row.se_inflation = norm(&f.se[c_idx]) / norm(&base.se[c_idx]);
                    }
                    (_, None) => {}
                }
            }
            rows.push(row);
        }
    };

    let prepared = generate(scenario, rep_seed).and_then(|data| {
        let n_total: usize = data.iter().map(SiteData::n).sum();
        let (std, record) = standardize(&data, true)?;
        let set = merge_summaries(std.iter().map(compute_summary).collect())?;
        Ok((n_total, record, set))
    });
    let (n_total, record, set) = match prepared {
        Ok(v) => v,
        Err(_) => {
            emit(Arm::Ipd, None, 0, None, None);
            for &eps in epsilon0_grid {
                for (arm, _) in &arms {
                    emit(*arm, Some(eps), 0, None, None);
                }
            }
            return rows;
        }
    };

    let ipd = fit_arm(&set, &record, opts).ok();
    emit(Arm::Ipd, None, n_total, ipd.as_ref(), None);
    let noise_seed = derive_seed(rep_seed, &[1]);
    for &eps in epsilon0_grid {
        let budget = calibrate(CalibrationRule::DimensionAdjusted { epsilon0: eps }, 1.0 / n_total as f64, p);
        for (arm, scope) in &arms {
            let fit = budget.as_ref().ok().and_then(|b| {
                let noisy = set
                    .sites()
                    .iter()
                    .map(|s| privatize(s, b, scope, noise_seed))
                    .collect::<Result<Vec<_>>>()
                    .and_then(merge_summaries)
                    .ok()?;
                fit_arm(&noisy, &record, opts).ok()
            });
            emit(*arm, Some(eps), n_total, fit.as_ref(), ipd.as_ref());
        }
    }
    rows
}

/// Replicated IPD/DP/DP2 fits of `scenario`.
///
/// Within a replicate all arms share one data set and one noise stream, so DP
/// estimates at different `ε₀` differ only by the noise scale. Rows come out ordered
/// by replicate, then IPD before DP arms, regardless of thread scheduling.
pub fn run_estimation_study(
    scenario: &Scenario,
    epsilon0_grid: &[f64],
    reps: usize,
    seed: u64,
    opts: &StudyOptions,
) -> Result<Vec<MetricRow>> {
    scenario.validate()?;
    if reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    if opts.corrections.is_empty() {
        return Err(Error::invalid("at least one correction is required"));
    }
    if let Some(e) = epsilon0_grid.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Domain(format!("epsilon0 must be positive and finite, got {e}")));
    }
    let rows: Vec<Vec<MetricRow>> = (0..reps)
        .into_par_iter()
        .map(|r| run_replicate(scenario, epsilon0_grid, r, seed, opts))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    scenario: ScenarioId,
    arm: Arm,
    k: usize,
    eps_bits: Option<u64>,
    correction: u8,
}

fn correction_rank(c: Correction) -> u8 {
    match c {
        Correction::Cr0 => 0,
        Correction::Cr1 => 1,
        Correction::Cr1p => 2,
        Correction::Cr1s => 3,
    }
}

fn group_key(r: &MetricRow) -> GroupKey {
    GroupKey {
        scenario: r.scenario,
        arm: r.arm,
        k: r.k,
        eps_bits: r.epsilon0.map(f64::to_bits),
        correction: correction_rank(r.correction),
    }
}

fn group<'a>(rows: &'a [MetricRow]) -> BTreeMap<GroupKey, Vec<&'a MetricRow>> {
    let mut g: BTreeMap<GroupKey, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        g.entry(group_key(r)).or_default().push(r);
    }
    g
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub scenario: ScenarioId,
    pub arm: Arm,
    pub k: usize,
    pub epsilon0: Option<f64>,
    pub correction: Correction,
    pub reps_ok: usize,
    pub reps_failed: usize,
    /// Mean estimated SE over the empirical SD of `β̂`, per coefficient, over every
    /// replicate with finite estimates, failed fits included.
    pub ratio: Vec<f64>,
    /// The same ratio over converged fits only.
    pub ratio_converged: Vec<f64>,
    /// Fewer than two usable replicates or a zero SD.
    pub degenerate: bool,
}

/// SE calibration ratio per (scenario, arm, K, ε₀, correction) group.
pub fn se_calibration(rows: &[MetricRow]) -> Vec<CalibrationRow> {
    // `None` when the group has fewer than two replicates or no spread.
    let ratios = |used: &[&MetricRow], p: usize| -> Vec<Option<f64>> {
        (0..p)
            .map(|j| {
                if used.len() < 2 {
                    return None;
                }
                let betas: Vec<f64> = used.iter().map(|r| r.beta_hat[j]).collect();
                let ses: Vec<f64> = used.iter().map(|r| r.se[j]).collect();
                let (_, sd) = mean_sd(&betas);
                let (mean_se, _) = mean_sd(&ses);
                (sd > 0.0).then(|| mean_se / sd)
            })
            .collect()
    };
    group(rows)
        .into_values()
        .map(|g| {
            let first = g[0];
            let p = first.beta_hat.len();
            let finite: Vec<&MetricRow> = g
                .iter()
                .copied()
                .filter(|r| r.beta_hat.iter().chain(&r.se).all(|v| v.is_finite()))
                .collect();
            let ok: Vec<&MetricRow> = finite.iter().copied().filter(|r| !r.failed).collect();
            let raw = ratios(&finite, p);
            let converged = ratios(&ok, p);
            let degenerate = raw.iter().chain(&converged).any(Option::is_none);
            let unwrap = |v: Vec<Option<f64>>| v.into_iter().map(|r| r.unwrap_or(f64::NAN)).collect();
            CalibrationRow {
                scenario: first.scenario,
                arm: first.arm,
                k: first.k,
                epsilon0: first.epsilon0,
                correction: first.correction,
                reps_ok: g.iter().filter(|r| !r.failed).count(),
                reps_failed: g.iter().filter(|r| r.failed).count(),
                ratio: unwrap(raw),
                ratio_converged: unwrap(converged),
                degenerate,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub scenario: ScenarioId,
    pub arm: Arm,
    pub k: usize,
    pub epsilon0: Option<f64>,
    pub correction: Correction,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub median_l2_error: f64,
    pub median_l2_privacy_cost: f64,
    pub median_se_inflation: f64,
    /// Share of replicates whose Wald interval covers the truth, per coefficient.
    pub coverage: Vec<f64>,
}

/// Medians of the per-replicate metrics and Wald coverage of `truth` at `level`.
pub fn summarize_metrics(rows: &[MetricRow], truth: &[f64], level: f64) -> Result<Vec<MetricSummary>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    let z = StdNormal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    group(rows)
        .into_values()
        .map(|g| {
            let first = g[0];
            if first.beta_hat.len() != truth.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.beta_hat.len(),
                    found: truth.len(),
                });
            }
            let ok: Vec<&MetricRow> = g.iter().copied().filter(|r| !r.failed).collect();
            let pick = |f: fn(&MetricRow) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let coverage = truth
                .iter()
                .enumerate()
                .map(|(j, &b)| {
                    let hits = ok
                        .iter()
                        .filter(|r| (r.beta_hat[j] - b).abs() <= z * r.se[j])
                        .count();
                    hits as f64 / ok.len() as f64
                })
                .collect();
            Ok(MetricSummary {
                scenario: first.scenario,
                arm: first.arm,
                k: first.k,
                epsilon0: first.epsilon0,
                correction: first.correction,
                reps_ok: ok.len(),
                reps_failed: g.len() - ok.len(),
                median_l2_error: pick(|r| r.l2_error),
                median_l2_privacy_cost: pick(|r| r.l2_privacy_cost),
                median_se_inflation: pick(|r| r.se_inflation),
                coverage,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeAxis {
    /// Regress on `log(1/K)` at fixed `ε₀`.
    Sites,
    /// Regress on `log ε₀` at fixed `K`.
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEstimate {
    pub slope: f64,
    pub se: f64,
    /// `(x, log mean cost²)` per level.
    pub points: Vec<(f64, f64)>,
}

/// Log–log slope of the mean squared privacy cost against `1/K` or `ε₀`.
///
/// Rows must come from one noisy arm; duplicates across corrections are collapsed.
pub fn privacy_cost_slope(rows: &[MetricRow], axis: SlopeAxis) -> Result<SlopeEstimate> {
    let noisy: Vec<&MetricRow> = rows.iter().filter(|r| r.arm != Arm::Ipd).collect();
    if noisy.is_empty() {
        return Err(Error::Insufficient("no privatized rows".into()));
    }
    if noisy.iter().any(|r| r.arm != noisy[0].arm || r.scenario != noisy[0].scenario) {
        return Err(Error::invalid("rows must come from a single arm and scenario"));
    }
    let fixed = |r: &MetricRow| match axis {
        SlopeAxis::Sites => r.epsilon0.map(f64::to_bits).map(|b| b as u128),
        SlopeAxis::Epsilon => Some(r.k as u128),
    };
    if noisy.iter().any(|r| fixed(r) != fixed(noisy[0])) {
        return Err(Error::invalid(match axis {
            SlopeAxis::Sites => "rows must share one epsilon0",
            SlopeAxis::Epsilon => "rows must share one K",
        }));
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut levels: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in noisy {
        if r.failed || !r.l2_privacy_cost.is_finite() {
            continue;
        }
        let eps = r.epsilon0.unwrap_or(f64::NAN);
        if !seen.insert((r.k, eps.to_bits(), r.replicate)) {
            continue;
        }
        let x = match axis {
            SlopeAxis::Sites => (1.0 / r.k as f64).ln(),
            SlopeAxis::Epsilon => eps.ln(),
        };
        levels.entry(x.to_bits()).or_insert((x, Vec::new())).1.push(r.l2_privacy_cost.powi(2));
    }
    if levels.len() < 3 {
        return Err(Error::Insufficient(format!("need at least 3 levels, got {}", levels.len())));
    }
    let mut points = Vec::with_capacity(levels.len());
    for (x, costs) in levels.into_values() {
        let m = costs.iter().sum::<f64>() / costs.len() as f64;
        if !(m > 0.0) {
            return Err(Error::Insufficient("privacy cost is identically zero".into()));
        }
        points.push((x, m.ln()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = points.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    Ok(SlopeEstimate { slope, se, points })
}

#[derive(Debug, Clone)]
pub struct ReconstructionStudy {
    pub ns: Vec<usize>,
    pub ps: Vec<usize>,
    /// `None` releases the exact Gram matrix.
    pub epsilon0: Vec<Option<f64>>,
    pub reps: usize,
    pub seed: u64,
    pub delta: f64,
    /// Bernoulli probability of each design entry.
    pub prob: f64,
    pub attack: AttackConfig,
}

impl Default for ReconstructionStudy {
    fn default() -> Self {
        Self {
            ns: (2..=20).collect(),
            ps: vec![3, 5, 10],
            epsilon0: std::iter::once(None)
                .chain([1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0].map(Some))
                .collect(),
            reps: 1000,
            seed: 0,
            delta: 0.01,
            prob: 0.5,
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionRow {
    pub n: usize,
    pub p: usize,
    pub epsilon0: Option<f64>,
    pub matrix_rate: f64,
    pub element_rate: f64,
    pub reps: usize,
    /// Attacks that hit the time or node limit.
    pub failures: usize,
}

/// Attack rates per `(n, p, ε₀)` cell.
///
/// A replicate uses the same design and the same standard-normal draws at every
/// noise level.
pub fn run_reconstruction_study(study: &ReconstructionStudy) -> Result<Vec<ReconstructionRow>> {
    if study.reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let coin = Bernoulli::new(study.prob).map_err(|e| Error::Domain(e.to_string()))?;
    let mut out = Vec::new();
    for &p in &study.ps {
        if p == 0 || p > study.attack.p_max {
            return Err(Error::Capacity { p, p_max: study.attack.p_max });
        }
        for &n in &study.ns {
            if n == 0 {
                return Err(Error::invalid("n must be positive"));
            }
            for &eps in &study.epsilon0 {
                let budget = eps
                    .map(|e| calibrate(CalibrationRule::DimensionAdjusted { epsilon0: e }, study.delta, p))
                    .transpose()?;
                let results = (0..study.reps)
                    .into_par_iter()
                    .map(|rep| {
                        let cell = derive_seed(study.seed, &[n as u64, p as u64, rep as u64]);
                        let mut rng = ChaCha20Rng::seed_from_u64(cell);
                        let rows: Vec<Vec<u8>> = (0..n)
                            .map(|_| (0..p).map(|_| u8::from(coin.sample(&mut rng))).collect())
                            .collect();
                        let x = BinaryMatrix::from_rows(&rows)?;
                        attack_pipeline(&x, budget.as_ref(), derive_seed(cell, &[1]), &study.attack)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let reps = results.len() as f64;
                out.push(ReconstructionRow {
                    n,
                    p,
                    epsilon0: eps,
                    matrix_rate: results.iter().map(|r| r.matrix_rate).sum::<f64>() / reps,
                    element_rate: results.iter().map(|r| r.element_rate).sum::<f64>() / reps,
                    reps: results.len(),
                    failures: results
                        .iter()
                        .filter(|r| r.reconstruction.status == AttackStatus::Failed)
                        .count(),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ids_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(id.label().parse::<ScenarioId>().unwrap(), id);
        }
        assert!("ri".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn analysis_columns_and_sensitive_coordinates() {
        let full = Scenario::new(ScenarioId::RiCorrect, 20);
        assert_eq!(full.analysis_columns(), (0..7).collect::<Vec<_>>());
        assert_eq!(full.sensitive_coordinates(), vec![5, 6, 7]);
        let under = Scenario::new(ScenarioId::RisMis, 20);
        assert_eq!(under.analysis_beta0(), vec![1.0, 0.5, 0.5]);
        assert!(under.sensitive_coordinates().is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = Scenario::new(ScenarioId::RisCorrect, 15);
        let a = generate(&s, 9).unwrap();
        let b = generate(&s, 9).unwrap();
        assert_eq!(a.len(), 15);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.y().as_slice(), y.y().as_slice());
            assert_eq!(x.x().as_slice(), y.x().as_slice());
        }
        let c = generate(&s, 10).unwrap();
        assert_ne!(a[0].y().as_slice(), c[0].y().as_slice());
    }

    #[test]
    fn size_law_stays_in_range() {
        let law = SizeLaw::default();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = law.sample(&mut rng);
            assert!((2..=10).contains(&n) || (50..=100).contains(&n));
        }
    }

    #[test]
    fn median_handles_even_and_nan() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }

    fn row(k: usize, eps: f64, rep: usize, cost: f64) -> MetricRow {
        MetricRow {
            scenario: ScenarioId::RiCorrect,
            arm: Arm::Dp,
            epsilon0: Some(eps),
            k,
            n_total: 10 * k,
            replicate: rep,
            correction: Correction::Cr0,
            failed: false,
            l2_error: 0.0,
            l2_privacy_cost: cost,
            se_inflation: 1.0,
            beta_hat: vec![rep as f64],
            se: vec![0.0],
        }
    }

    #[test]
    fn slope_recovers_exact_power_law() {
        let rows: Vec<MetricRow> = [20, 50, 100, 200]
            .iter()
            .flat_map(|&k| (0..3).map(move |r| row(k, 16.0, r, (3.0 / k as f64).sqrt())))
            .collect();
        let s = privacy_cost_slope(&rows, SlopeAxis::Sites).unwrap();
        assert!((s.slope - 1.0).abs() < 1e-12);
        assert!(s.se < 1e-6);

        let zero: Vec<MetricRow> = [20, 50, 100].iter().map(|&k| row(k, 16.0, 0, 0.0)).collect();
        assert!(matches!(privacy_cost_slope(&zero, SlopeAxis::Sites), Err(Error::Insufficient(_))));
        let mixed = vec![row(20, 16.0, 0, 1.0), row(20, 8.0, 0, 1.0), row(50, 16.0, 0, 1.0)];
        assert!(privacy_cost_slope(&mixed, SlopeAxis::Sites).is_err());
    }

    #[test]
    fn calibration_ratio_is_one_when_se_matches_sd() {
        let betas = [1.0, 2.0, 3.0, 4.0];
        let (_, sd) = mean_sd(&betas);
        let rows: Vec<MetricRow> = betas
            .iter()
            .enumerate()
            .map(|(i, &b)| MetricRow { beta_hat: vec![b], se: vec![sd], ..row(20, 4.0, i, 0.1) })
            .collect();
        let cal = se_calibration(&rows);
        assert_eq!(cal.len(), 1);
        assert!((cal[0].ratio[0] - 1.0).abs() < 1e-12);
        assert!(!cal[0].degenerate);

        let flat: Vec<MetricRow> = (0..3).map(|i| MetricRow { beta_hat: vec![1.0], ..row(20, 4.0, i, 0.1) }).collect();
        assert!(se_calibration(&flat)[0].degenerate);
    }

    #[test]
    fn failed_fits_count_in_the_raw_ratio_only() {
        let mut rows: Vec<MetricRow> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &b)| MetricRow { beta_hat: vec![b], se: vec![1.0], ..row(20, 4.0, i, 0.1) })
            .collect();
        rows.push(MetricRow { beta_hat: vec![1e6], se: vec![1e9], failed: true, ..row(20, 4.0, 3, 0.1) });
        rows.push(MetricRow { beta_hat: vec![f64::NAN], se: vec![f64::NAN], failed: true, ..row(20, 4.0, 4, 0.1) });
        let cal = &se_calibration(&rows)[0];
        assert_eq!((cal.reps_ok, cal.reps_failed), (3, 2));
        assert!((cal.ratio_converged[0] - 1.0).abs() < 1e-12);
        assert!(cal.ratio[0] > 100.0);
    }
}
