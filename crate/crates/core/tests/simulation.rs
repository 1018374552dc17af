use fedlmm::sim::{
    generate, median, run_estimation_study, run_reconstruction_study, Arm, ReconstructionStudy, Scenario,
    ScenarioId, SizeLaw, StudyOptions,
};
use fedlmm::summary::{compute_summary, merge_summaries};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[test]
fn size_law_matches_mixture_weights() {
    let law = SizeLaw::default();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let draws = 100_000;
    let small = (0..draws).filter(|_| law.sample(&mut rng) <= 10).count();
    let share = small as f64 / draws as f64;
    assert!((share - 0.8).abs() < 0.01, "{share}");
}

#[test]
fn residual_site_means_have_within_site_variance_only() {
    let mut s = Scenario::new(ScenarioId::RiCorrect, 10_000);
    s.tau2 = 0.0;
    let sites = generate(&s, 17).unwrap();
    // n_k · ē_k² has expectation σ² when there is no site effect.
    let stat: f64 = sites
        .iter()
        .map(|d| {
            let fitted = d.x() * nalgebra::DVector::from_vec(s.beta0.clone());
            let e = (d.y() - fitted).mean();
            d.n() as f64 * e * e
        })
        .sum::<f64>()
        / sites.len() as f64;
    assert!((stat - s.sigma2).abs() < 0.05, "{stat}");
}

#[test]
fn merged_sites_keep_counts() {
    let s = Scenario::new(ScenarioId::RisCorrect, 88);
    let sites = generate(&s, 2).unwrap();
    let set = merge_summaries(sites.iter().map(compute_summary).collect()).unwrap();
    assert_eq!(set.len(), 88);
    assert_eq!(set.total_n(), sites.iter().map(|d| d.n()).sum::<usize>());
}

#[test]
fn studies_do_not_depend_on_thread_count() {
    let s = Scenario::new(ScenarioId::RiMis, 20);
    let opts = StudyOptions::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_estimation_study(&s, &[4.0, 16.0], 6, 99, &opts).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert!(a.iter().filter(|r| r.arm == Arm::Ipd).all(|r| r.l2_privacy_cost == 0.0));
    // The underfit model has no sensitive covariates, so there is no DP2 arm.
    assert!(a.iter().all(|r| r.arm != Arm::Dp2));

    let study = ReconstructionStudy { ns: vec![3, 5], ps: vec![3], epsilon0: vec![None, Some(4.0)], reps: 20, ..Default::default() };
    assert_eq!(run_reconstruction_study(&study).unwrap(), run_reconstruction_study(&study).unwrap());
}

fn median_cost(rows: &[fedlmm::sim::MetricRow], k: usize, eps: f64) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == Arm::Dp && r.k == k && r.epsilon0 == Some(eps) && !r.failed)
        .map(|r| r.l2_privacy_cost)
        .collect();
    median(&v)
}

#[test]
fn privacy_cost_falls_with_budget_and_sites() {
    let opts = StudyOptions { corrections: vec![fedlmm::Correction::Cr0], ..Default::default() };
    let grid = [2.0, 4.0, 8.0, 12.0, 16.0];
    let mut rows = Vec::new();
    for k in [20, 50, 100, 200] {
        rows.extend(run_estimation_study(&Scenario::new(ScenarioId::RiCorrect, k), &grid, 100, 5, &opts).unwrap());
    }
    for k in [20, 50, 100, 200] {
        let costs: Vec<f64> = grid.iter().map(|&e| median_cost(&rows, k, e)).collect();
        assert!(costs.windows(2).all(|w| w[0] > w[1]), "K={k}: {costs:?}");
    }
    let by_k: Vec<f64> = [20, 50, 100, 200].iter().map(|&k| median_cost(&rows, k, 8.0)).collect();
    assert!(by_k.windows(2).all(|w| w[0] > w[1]), "{by_k:?}");
    let dp2 = rows.iter().filter(|r| r.arm == Arm::Dp2 && !r.failed).count();
    assert!(dp2 > 0);
}
