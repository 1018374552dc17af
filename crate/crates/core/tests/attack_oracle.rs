use std::collections::BTreeSet;

use fedlmm::attack::{enumerate_solutions, reconstruct, AttackConfig, AttackStatus, FeasibilityInstance};
use nalgebra::DMatrix;

fn instance(upper: &[i64], p: usize, n: usize) -> FeasibilityInstance {
    let mut g = DMatrix::zeros(p, p);
    let mut it = upper.iter();
    for j in 0..p {
        for k in j..p {
            g[(j, k)] = *it.next().unwrap();
            g[(k, j)] = g[(j, k)];
        }
    }
    FeasibilityInstance::new(g, n).unwrap()
}

#[test]
fn agrees_with_exhaustive_enumeration() {
    let cfg = AttackConfig::default();
    for n in 1..=4 {
        for p in 1..=3 {
            for (key, fiber) in fedlmm_oracle::binary_gram_fibers(n, p) {
                let inst = instance(&key, p, n);
                let rec = reconstruct(&inst, &cfg).unwrap();
                let expected = if fiber.len() == 1 { AttackStatus::Unique } else { AttackStatus::FeasibleMultiple };
                assert_eq!(rec.status, expected, "n={n} p={p} gram={key:?}");
                assert_eq!(rec.violation, 0);
                assert!(fiber.contains(&rec.x_hat.unwrap().rows()));

                let (all, complete) = enumerate_solutions(&inst, &cfg, usize::MAX).unwrap();
                assert!(complete);
                let found: BTreeSet<Vec<Vec<u8>>> = all.iter().map(|m| m.rows()).collect();
                assert_eq!(found, fiber);
            }
        }
    }
}

#[test]
fn repair_finds_the_least_violating_matrix() {
    // Every symmetric integer matrix with entries in -1..=3 at p = 2, n = 2.
    let (n, p) = (2, 2);
    let fibers = fedlmm_oracle::binary_gram_fibers(n, p);
    for a in -1..=3i64 {
        for b in -1..=3i64 {
            for c in -1..=3i64 {
                let key = vec![a, b, c];
                let best = fibers
                    .keys()
                    .map(|g| g.iter().zip(&key).map(|(x, y)| (x - y).unsigned_abs()).sum::<u64>())
                    .min()
                    .unwrap();
                let rec = reconstruct(&instance(&key, p, n), &AttackConfig::default()).unwrap();
                assert_eq!(rec.violation, best, "gram {key:?}");
                if best > 0 {
                    assert_eq!(rec.status, AttackStatus::InfeasibleRepaired);
                }
            }
        }
    }
}
