use std::path::{Path, PathBuf};
use std::time::Duration;

use fedlmm::attack::{hamming_sorted, reconstruct, round_gram, AttackConfig, AttackStatus, BinaryMatrix, FeasibilityInstance};
use fedlmm::estimator::{fit_ml, fit_reml, OptimizerConfig};
use fedlmm::privacy::{calibrate, privatize, CalibrationRule, NoiseScope, PrivacyBudget};
use fedlmm::sim::{
    run_estimation_study, run_reconstruction_study, se_calibration, summarize_metrics, MetricRow,
    ReconstructionStudy, Scenario, ScenarioId, StudyOptions,
};
use fedlmm::summary::{compute_summary, merge_summaries, SiteData, SiteSummary};
use fedlmm::variance::{apply_correction, cr0, wald_ci, Correction, Quantile};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, CliResult};
use crate::io::{file_stem, read_sites, read_summary, read_text, summary_json, to_json, Layout, Outputs};
use crate::{
    AttackArgs, Cli, Command, FitArgs, MethodArg, PipelineArgs, PrivatizeArgs, ScopeArg,
    SimulateEstimationArgs, SimulateReconstructionArgs, SummarizeArgs,
};

const BUNDLE: &str = include_str!("../data/bundle.csv");
const INTERCEPT: &str = "(Intercept)";

pub fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out_dir;
    let outputs = match cli.command {
        Command::Summarize(a) => summarize_cmd(&out, a)?,
        Command::Privatize(a) => privatize_cmd(&out, a)?,
        Command::Fit(a) => fit_cmd(&out, a)?,
        Command::Attack(a) => attack_cmd(&out, a)?,
        Command::SimulateEstimation(a) => simulate_estimation_cmd(&out, a)?,
        Command::SimulateReconstruction(a) => simulate_reconstruction_cmd(&out, a)?,
        Command::Pipeline(a) => pipeline_cmd(&out, a)?,
    };
    let written: Vec<String> = outputs.paths().map(|p| p.display().to_string()).collect();
    outputs.write()?;
    for p in written {
        println!("{p}");
    }
    Ok(())
}

fn summarize_cmd(out: &Path, a: SummarizeArgs) -> CliResult<Outputs> {
    let _ = a.seed;
    let text = read_text(&a.input)?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "site".into());
    let layout = Layout {
        outcome: &a.outcome,
        covariates: &a.covariates,
        intercept: !a.no_intercept,
        site_column: a.site_column.as_deref(),
        default_site: a.site_id.as_deref().unwrap_or(&stem),
    };
    let sites = read_sites(&text, &a.input, &layout)?;
    let mut outputs = Outputs::default();
    write_summaries(&mut outputs, out, &sites, &layout.design_names(), |s| Ok(compute_summary(s)))?;
    Ok(outputs)
}

fn write_summaries(
    outputs: &mut Outputs,
    dir: &Path,
    sites: &[SiteData],
    names: &[String],
    make: impl Fn(&SiteData) -> CliResult<SiteSummary>,
) -> CliResult<Vec<SiteSummary>> {
    let mut stems = std::collections::BTreeSet::new();
    let mut made = Vec::with_capacity(sites.len());
    for site in sites {
        let stem = file_stem(site.site_id());
        if !stems.insert(stem.clone()) {
            return Err(invalid(format!("site ids collide on file name `{stem}.json`")));
        }
        let summary = make(site)?;
        outputs.add(dir.join(format!("{stem}.json")), summary_json(&summary, Some(names.to_vec()))?);
        made.push(summary);
    }
    Ok(made)
}

fn resolve_sensitive(items: &[String], columns: Option<&[String]>, p: usize) -> CliResult<Vec<usize>> {
    items
        .iter()
        .map(|item| {
            if let Ok(j) = item.parse::<usize>() {
                if (1..=p).contains(&j) {
                    return Ok(j);
                }
                return Err(invalid(format!("sensitive coordinate {j} is outside 1..={p}")));
            }
            columns
                .and_then(|cols| cols.iter().position(|c| c == item))
                .map(|j| j + 1)
                .ok_or_else(|| invalid(format!("unknown sensitive column `{item}`")))
        })
        .collect()
}

fn privatize_cmd(out: &Path, a: PrivatizeArgs) -> CliResult<Outputs> {
    let loaded = read_summary(&a.input)?;
    let p = loaded.summary.p();
    let budget = match (a.epsilon0, a.epsilon, a.delta_f) {
        (Some(e0), None, None) => calibrate(CalibrationRule::DimensionAdjusted { epsilon0: e0 }, a.delta, p)?,
        (None, Some(eps), Some(df)) => calibrate(CalibrationRule::FixedEpsilon { epsilon: eps, delta_f: df }, a.delta, p)?,
        _ => return Err(invalid("give either --epsilon0 or both --epsilon and --delta-f")),
    };
    let scope = match a.scope {
        ScopeArg::Full => {
            if !a.sensitive.is_empty() {
                return Err(invalid("--sensitive only applies to --scope subset"));
            }
            NoiseScope::Full
        }
        ScopeArg::Subset => {
            if a.sensitive.is_empty() {
                return Err(invalid("--scope subset needs --sensitive"));
            }
            NoiseScope::Subset(resolve_sensitive(&a.sensitive, loaded.columns.as_deref(), p)?)
        }
    };
    let released = privatize(&loaded.summary, &budget, &scope, a.seed)?;
    let path = a
        .out
        .unwrap_or_else(|| out.join(format!("{}_dp.json", file_stem(released.site_id()))));
    let mut outputs = Outputs::default();
    outputs.add(path, summary_json(&released, loaded.columns)?);
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct Coefficient {
    name: String,
    estimate: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
}

#[derive(Debug, Serialize)]
struct FitReport {
    method: fedlmm::Method,
    converged: bool,
    iterations: usize,
    boundary_tau: bool,
    objective: f64,
    sigma2: f64,
    tau2: f64,
    sites: usize,
    n: usize,
    privatized: bool,
    correction: Correction,
    level: f64,
    quantile: &'static str,
    coefficients: Vec<Coefficient>,
    /// Row-major covariance of the coefficients.
    vcov: Vec<f64>,
}

struct FitOptions {
    method: MethodArg,
    correction: Correction,
    level: f64,
    quantile: Quantile,
    fixed_tau2: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: MethodArg::Ml,
            correction: Correction::Cr0,
            level: 0.95,
            quantile: Quantile::Normal,
            fixed_tau2: None,
        }
    }
}

fn fit_summaries(sums: Vec<SiteSummary>, names: &[String], opts: &FitOptions) -> CliResult<FitReport> {
    let set = merge_summaries(sums)?;
    if names.len() != set.p() {
        return Err(invalid(format!("{} column names for {} design columns", names.len(), set.p())));
    }
    let config = OptimizerConfig { fixed_tau2: opts.fixed_tau2, ..Default::default() };
    let fit = match opts.method {
        MethodArg::Ml => fit_ml(&set, &config)?,
        MethodArg::Reml => fit_reml(&set, &config)?,
    };
    let v = apply_correction(&cr0(&set, &fit)?, opts.correction)?;
    let ci = wald_ci(&fit.theta_hat.beta, &v, opts.level, opts.quantile)?;
    let coefficients = names
        .iter()
        .zip(&ci)
        .map(|(name, c)| Coefficient { name: name.clone(), estimate: c.estimate, se: c.se, ci_lo: c.lo, ci_hi: c.hi })
        .collect();
    Ok(FitReport {
        method: fit.method,
        converged: fit.converged,
        iterations: fit.iterations,
        boundary_tau: fit.boundary_tau,
        objective: fit.objective,
        sigma2: fit.theta_hat.sigma2,
        tau2: fit.theta_hat.tau2,
        sites: set.len(),
        n: set.total_n(),
        privatized: set.any_privatized(),
        correction: opts.correction,
        level: opts.level,
        quantile: match opts.quantile {
            Quantile::Normal => "normal",
            Quantile::StudentT => "t",
        },
        coefficients,
        vcov: v.v.transpose().as_slice().to_vec(),
    })
}

fn add_fit(outputs: &mut Outputs, report: &FitReport, json: PathBuf, table: PathBuf) -> CliResult<()> {
    outputs.add(json, to_json(report)?);
    let header: Vec<String> = ["coefficient", "estimate", "se", "ci_lo", "ci_hi", "correction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = report
        .coefficients
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.estimate.to_string(),
                c.se.to_string(),
                c.ci_lo.to_string(),
                c.ci_hi.to_string(),
                report.correction.label().to_string(),
            ]
        })
        .collect();
    outputs.add_csv(table, &header, &rows)
}

fn fit_cmd(out: &Path, a: FitArgs) -> CliResult<Outputs> {
    let _ = a.seed;
    let loaded = a.summaries.iter().map(|p| read_summary(p)).collect::<CliResult<Vec<_>>>()?;
    let p = loaded[0].summary.p();
    let first = loaded[0].columns.clone();
    let names = match first {
        Some(cols) if loaded.iter().all(|l| l.columns.as_ref() == Some(&cols)) => cols,
        _ => (0..p).map(|j| format!("beta_{j}")).collect(),
    };
    let opts = FitOptions {
        method: a.method,
        correction: a.correction.parse()?,
        level: a.level,
        quantile: if a.t_quantile { Quantile::StudentT } else { Quantile::Normal },
        fixed_tau2: a.fixed_tau2,
    };
    let report = fit_summaries(loaded.into_iter().map(|l| l.summary).collect(), &names, &opts)?;
    let mut outputs = Outputs::default();
    add_fit(
        &mut outputs,
        &report,
        a.report.unwrap_or_else(|| out.join("fit.json")),
        a.table.unwrap_or_else(|| out.join("fit.csv")),
    )?;
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct AttackReport {
    site_id: String,
    n: usize,
    privatized: bool,
    columns: Vec<String>,
    coordinates: Vec<usize>,
    status: AttackStatus,
    violation: u64,
    nodes: u64,
    x_hat: Option<Vec<Vec<u8>>>,
    /// Present when the true rows are known.
    #[serde(skip_serializing_if = "Option::is_none")]
    hamming: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix_hit: Option<bool>,
}

fn attack_summary(
    summary: &SiteSummary,
    names: &[String],
    coords: &[usize],
    config: &AttackConfig,
) -> CliResult<AttackReport> {
    let p = summary.p();
    let mut seen = std::collections::BTreeSet::new();
    for &c in coords {
        if !(1..=p).contains(&c) || !seen.insert(c) {
            return Err(invalid(format!("attack coordinates must be distinct values in 1..={p}")));
        }
    }
    if coords.is_empty() {
        return Err(invalid("no columns to attack"));
    }
    let g = DMatrix::from_fn(coords.len(), coords.len(), |a, b| summary.s()[(coords[a], coords[b])]);
    let instance = FeasibilityInstance::new(round_gram(&g, summary.n(), config.clamp), summary.n())?;
    let rec = reconstruct(&instance, config)?;
    Ok(AttackReport {
        site_id: summary.site_id().to_string(),
        n: summary.n(),
        privatized: summary.privatized(),
        columns: coords.iter().map(|&c| names[c - 1].clone()).collect(),
        coordinates: coords.to_vec(),
        status: rec.status,
        violation: rec.violation,
        nodes: rec.nodes,
        x_hat: rec.x_hat.map(|x| x.rows()),
        hamming: None,
        matrix_hit: None,
    })
}

fn attack_cmd(out: &Path, a: AttackArgs) -> CliResult<Outputs> {
    let _ = a.seed;
    let loaded = read_summary(&a.input)?;
    let p = loaded.summary.p();
    let names = loaded
        .columns
        .clone()
        .unwrap_or_else(|| (0..p).map(|j| format!("beta_{j}")).collect());
    let coords = if a.columns.is_empty() {
        (1..=p).filter(|&c| names[c - 1] != INTERCEPT).collect()
    } else {
        a.columns.clone()
    };
    if !(a.timeout_secs > 0.0 && a.timeout_secs.is_finite()) {
        return Err(invalid("--timeout-secs must be positive"));
    }
    let config = AttackConfig {
        timeout: Duration::from_secs_f64(a.timeout_secs),
        max_nodes: Some(a.max_nodes),
        clamp: a.clamp,
        ..Default::default()
    };
    let report = attack_summary(&loaded.summary, &names, &coords, &config)?;
    let mut outputs = Outputs::default();
    outputs.add(a.out.unwrap_or_else(|| out.join("attack.json")), to_json(&report)?);
    Ok(outputs)
}

fn simulate_estimation_cmd(out: &Path, a: SimulateEstimationArgs) -> CliResult<Outputs> {
    let id: ScenarioId = a.scenario.parse()?;
    let corrections = a.corrections.iter().map(|c| c.parse()).collect::<Result<Vec<Correction>, _>>()?;
    if a.k.is_empty() {
        return Err(invalid("--K needs at least one value"));
    }
    let opts = StudyOptions { corrections, dp2: !a.no_dp2, ..Default::default() };
    let mut rows: Vec<MetricRow> = Vec::new();
    for &k in &a.k {
        rows.extend(run_estimation_study(&Scenario::new(id, k), &a.epsilon0, a.reps, a.seed, &opts)?);
    }
    let truth = Scenario::new(id, a.k[0]).analysis_beta0();
    let p = truth.len();

    let mut outputs = Outputs::default();
    let records: Vec<Vec<String>> = rows.iter().map(MetricRow::csv_record).collect();
    outputs.add_csv(a.out.unwrap_or_else(|| out.join("metrics.csv")), &MetricRow::csv_header(p), &records)?;

    let eps = |e: Option<f64>| e.map_or_else(String::new, |v| v.to_string());
    let mut header: Vec<String> = ["scenario", "arm", "K", "epsilon0", "correction", "reps_ok", "reps_failed", "degenerate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..p).map(|j| format!("ratio_{j}")));
    header.extend((0..p).map(|j| format!("ratio_converged_{j}")));
    let cal: Vec<Vec<String>> = se_calibration(&rows)
        .into_iter()
        .map(|c| {
            let mut r = vec![
                c.scenario.label().to_string(),
                c.arm.label().to_string(),
                c.k.to_string(),
                eps(c.epsilon0),
                c.correction.label().to_string(),
                c.reps_ok.to_string(),
                c.reps_failed.to_string(),
                c.degenerate.to_string(),
            ];
            r.extend(c.ratio.iter().chain(&c.ratio_converged).map(f64::to_string));
            r
        })
        .collect();
    outputs.add_csv(a.calibration.unwrap_or_else(|| out.join("calibration.csv")), &header, &cal)?;

    let mut header: Vec<String> = [
        "scenario", "arm", "K", "epsilon0", "correction", "reps_ok", "reps_failed", "median_l2_error",
        "median_l2_privacy_cost", "median_se_inflation",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..p).map(|j| format!("coverage_{j}")));
    let summary: Vec<Vec<String>> = summarize_metrics(&rows, &truth, a.level)?
        .into_iter()
        .map(|m| {
            let mut r = vec![
                m.scenario.label().to_string(),
                m.arm.label().to_string(),
                m.k.to_string(),
                eps(m.epsilon0),
                m.correction.label().to_string(),
                m.reps_ok.to_string(),
                m.reps_failed.to_string(),
                m.median_l2_error.to_string(),
                m.median_l2_privacy_cost.to_string(),
                m.median_se_inflation.to_string(),
            ];
            r.extend(m.coverage.iter().map(f64::to_string));
            r
        })
        .collect();
    outputs.add_csv(a.summary.unwrap_or_else(|| out.join("summary.csv")), &header, &summary)?;
    Ok(outputs)
}

fn parse_sizes(items: &[String]) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for item in items {
        let bad = || invalid(format!("`{item}` is not a size or a range like 2-20"));
        match item.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(item.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn parse_noise_levels(items: &[String]) -> CliResult<Vec<Option<f64>>> {
    items
        .iter()
        .map(|item| match item.trim() {
            "inf" | "ref" | "none" => Ok(None),
            v => v
                .parse::<f64>()
                .ok()
                .filter(|e| *e > 0.0 && e.is_finite())
                .map(Some)
                .ok_or_else(|| invalid(format!("`{item}` is not a positive epsilon0 or `inf`"))),
        })
        .collect()
}

fn simulate_reconstruction_cmd(out: &Path, a: SimulateReconstructionArgs) -> CliResult<Outputs> {
    if !(a.timeout_secs > 0.0 && a.timeout_secs.is_finite()) {
        return Err(invalid("--timeout-secs must be positive"));
    }
    let study = ReconstructionStudy {
        ns: parse_sizes(&a.n)?,
        ps: a.p.clone(),
        epsilon0: parse_noise_levels(&a.epsilon0)?,
        reps: a.reps,
        seed: a.seed,
        delta: a.delta,
        prob: a.prob,
        attack: AttackConfig {
            timeout: Duration::from_secs_f64(a.timeout_secs),
            max_nodes: a.max_nodes,
            clamp: a.clamp,
            ..Default::default()
        },
    };
    let rows = run_reconstruction_study(&study)?;
    let header: Vec<String> = ["n", "p", "epsilon0", "matrix_rate", "element_rate", "reps", "failures"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.p.to_string(),
                r.epsilon0.map_or_else(|| "inf".to_string(), |e| e.to_string()),
                r.matrix_rate.to_string(),
                r.element_rate.to_string(),
                r.reps.to_string(),
                r.failures.to_string(),
            ]
        })
        .collect();
    let mut outputs = Outputs::default();
    outputs.add_csv(a.out.unwrap_or_else(|| out.join("reconstruction.csv")), &header, &records)?;
    Ok(outputs)
}

#[derive(Debug, Serialize)]
struct PipelineManifest {
    seed: u64,
    sites: usize,
    n: usize,
    epsilon0: f64,
    budget: PrivacyBudget,
    /// `‖β̂_private − β̂_exact‖`.
    l2_privacy_cost: f64,
    attacked_site: String,
}

fn pipeline_cmd(out: &Path, a: PipelineArgs) -> CliResult<Outputs> {
    let (text, source) = match &a.input {
        Some(p) => (read_text(p)?, p.clone()),
        None => (BUNDLE.to_string(), PathBuf::from("bundle.csv")),
    };
    let covariates: Vec<String> = (1..=6).map(|j| format!("x{j}")).collect();
    let layout = Layout {
        outcome: "y",
        covariates: &covariates,
        intercept: true,
        site_column: Some("site"),
        default_site: "site",
    };
    let names = layout.design_names();
    let sites = read_sites(&text, &source, &layout)?;
    let n_total: usize = sites.iter().map(SiteData::n).sum();
    let p = names.len();

    let mut outputs = Outputs::default();
    let exact = write_summaries(&mut outputs, &out.join("summaries"), &sites, &names, |s| Ok(compute_summary(s)))?;

    let delta = a.delta.unwrap_or(1.0 / n_total as f64);
    let budget = calibrate(CalibrationRule::DimensionAdjusted { epsilon0: a.epsilon0 }, delta, p)?;
    let private = write_summaries(&mut outputs, &out.join("private"), &sites, &names, |s| {
        Ok(privatize(&compute_summary(s), &budget, &NoiseScope::Full, a.seed)?)
    })?;

    let opts = FitOptions::default();
    let fit_exact = fit_summaries(exact, &names, &opts)?;
    add_fit(&mut outputs, &fit_exact, out.join("fit_exact.json"), out.join("fit_exact.csv"))?;
    let fit_private = fit_summaries(private.clone(), &names, &opts)?;
    add_fit(&mut outputs, &fit_private, out.join("fit_private.json"), out.join("fit_private.csv"))?;
    let cost = fit_exact
        .coefficients
        .iter()
        .zip(&fit_private.coefficients)
        .map(|(x, y)| (x.estimate - y.estimate).powi(2))
        .sum::<f64>()
        .sqrt();

    // Attack the binary covariates of the smallest site, with and without noise.
    let binary: Vec<usize> = (1..p)
        .filter(|&j| sites.iter().all(|s| s.x().column(j).iter().all(|&v| v == 0.0 || v == 1.0)))
        .collect();
    if binary.is_empty() {
        return Err(invalid("the pipeline dataset has no binary covariates to attack"));
    }
    let target = (0..sites.len()).min_by_key(|&i| sites[i].n()).expect("at least one site");
    let truth_rows: Vec<Vec<u8>> = (0..sites[target].n())
        .map(|i| binary.iter().map(|&j| sites[target].x()[(i, j)] as u8).collect())
        .collect();
    let truth = BinaryMatrix::from_rows(&truth_rows)?;
    let coords: Vec<usize> = binary.iter().map(|j| j + 1).collect();
    let config = AttackConfig { max_nodes: Some(10_000_000), timeout: Duration::from_secs(600), ..Default::default() };
    let exact_summary = compute_summary(&sites[target]);
    let mut reports = Vec::new();
    for summary in [&exact_summary, &private[target]] {
        let mut r = attack_summary(summary, &names, &coords, &config)?;
        if let Some(rows) = &r.x_hat {
            let h = hamming_sorted(&BinaryMatrix::from_rows(rows)?, &truth)?;
            r.hamming = Some(h);
            r.matrix_hit = Some(h == 0 && r.violation == 0);
        }
        reports.push(r);
    }
    outputs.add(out.join("attack.json"), to_json(&reports)?);

    let manifest = PipelineManifest {
        seed: a.seed,
        sites: sites.len(),
        n: n_total,
        epsilon0: a.epsilon0,
        budget,
        l2_privacy_cost: cost,
        attacked_site: sites[target].site_id().to_string(),
    };
    outputs.add(out.join("pipeline.json"), to_json(&manifest)?);
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_lists_expand_ranges() {
        let items: Vec<String> = ["2-4", "7"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_sizes(&items).unwrap(), vec![2, 3, 4, 7]);
        assert!(parse_sizes(&["5-2".to_string()]).is_err());
    }

    #[test]
    fn noise_levels_accept_inf() {
        let items: Vec<String> = ["inf", "4"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_noise_levels(&items).unwrap(), vec![None, Some(4.0)]);
        assert!(parse_noise_levels(&["-1".to_string()]).is_err());
    }

    #[test]
    fn sensitive_columns_resolve_by_name_or_coordinate() {
        let cols: Vec<String> = ["(Intercept)", "x1", "x2"].iter().map(|s| s.to_string()).collect();
        let items: Vec<String> = ["x2", "2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(resolve_sensitive(&items, Some(&cols), 3).unwrap(), vec![3, 2]);
        assert!(resolve_sensitive(&["x9".to_string()], Some(&cols), 3).is_err());
        assert!(resolve_sensitive(&["4".to_string()], None, 3).is_err());
    }
}
