use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedlmm_oracle::Site;
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

fn fedlmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlmm"))
        .current_dir(dir)
        .env_remove("FEDLMM_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = fedlmm(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s_matrix(v: &Value) -> DMatrix<f64> {
    let d = v["p"].as_u64().unwrap() as usize + 1;
    let flat: Vec<f64> = v["S"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    DMatrix::from_row_slice(d, d, &flat)
}

const THREE_SITES: &str = "site,y,x1,x2
a,1.2,0.5,1
a,0.3,-1.1,0
a,2.2,0.7,1
a,1.9,1.4,0
b,-0.4,0.2,1
b,0.8,-0.3,0
b,1.1,2.1,1
c,3.0,1.0,0
c,2.4,0.1,1
c,1.7,-0.6,1
c,0.9,-1.5,0
c,2.6,0.9,0
";

fn oracle_sites(text: &str) -> Vec<(String, Site)> {
    let mut out: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let vals: Vec<f64> = cells[1..].iter().map(|c| c.parse().unwrap()).collect();
        if out.last().map(|s| s.0.as_str()) != Some(cells[0]) {
            out.push((cells[0].to_string(), Vec::new(), Vec::new()));
        }
        let last = out.last_mut().unwrap();
        last.1.push(vals[0]);
        last.2.push(1.0);
        last.2.extend(&vals[1..]);
    }
    out.into_iter()
        .map(|(id, y, x)| {
            let n = y.len();
            let p = x.len() / n;
            (id, Site { y: DVector::from_vec(y), x: DMatrix::from_row_slice(n, p, &x) })
        })
        .collect()
}

#[test]
fn summarize_binary_cardiology_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cardio.csv"), "y,x1,x2,x3\n1,0,0,0\n0,1,0,0\n1,0,1,0\n").unwrap();
    ok(dir.path(), &["summarize", "--input", "cardio.csv", "--covariates", "x1,x2,x3", "--no-intercept"]);
    let s = s_matrix(&json(&dir.path().join("cardio.json")));
    let xx = s.view((1, 1), (3, 3)).into_owned();
    assert_eq!(xx, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
}

#[test]
fn summarize_rejects_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = fedlmm(dir.path(), &["summarize", "--input", "empty.csv", "--covariates", "x"]);
    assert_eq!(code(&out), 1);

    fs::write(dir.path().join("bad.csv"), "y,x\n1,2\n3,oops\n").unwrap();
    let out = fedlmm(dir.path(), &["summarize", "--input", "bad.csv", "--covariates", "x"]);
    assert_eq!(code(&out), 1);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 3") && msg.contains("`x`"), "{msg}");
    assert!(!dir.path().join("bad.json").exists());
}

#[test]
fn summarize_splits_sites() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "site,y,x\nA,1,0\nB,2,1\nA,3,1\nA,0,0\n").unwrap();
    ok(dir.path(), &["--out-dir", "out", "summarize", "--input", "d.csv", "--covariates", "x", "--site-column", "site"]);
    assert_eq!(json(&dir.path().join("out/A.json"))["n"], 3);
    assert_eq!(json(&dir.path().join("out/B.json"))["n"], 1);
}

fn summarize_three(dir: &Path) -> Vec<String> {
    fs::write(dir.join("three.csv"), THREE_SITES).unwrap();
    ok(dir, &["--out-dir", "sum", "summarize", "--input", "three.csv", "--covariates", "x1,x2", "--site-column", "site"]);
    ["a", "b", "c"].iter().map(|s| format!("sum/{s}.json")).collect()
}

#[test]
fn fit_matches_dense_gls() {
    let dir = tempfile::tempdir().unwrap();
    let files = summarize_three(dir.path());
    let mut args = vec!["fit"];
    args.extend(files.iter().map(String::as_str));
    ok(dir.path(), &args);
    let report = json(&dir.path().join("fit.json"));
    let (s2, t2) = (report["sigma2"].as_f64().unwrap(), report["tau2"].as_f64().unwrap());
    let sites: Vec<Site> = oracle_sites(THREE_SITES).into_iter().map(|(_, s)| s).collect();
    let (beta, _) = fedlmm_oracle::gls(&sites, s2, t2);
    let coefs = report["coefficients"].as_array().unwrap();
    for (j, c) in coefs.iter().enumerate() {
        let b = c["estimate"].as_f64().unwrap();
        assert!((b - beta[j]).abs() <= 1e-8 * beta[j].abs().max(1.0), "{j}: {b} vs {}", beta[j]);
    }
    assert_eq!(coefs[0]["name"], "(Intercept)");

    // With τ² held at zero the fit is pooled least squares.
    ok(dir.path(), &[&["fit", "--fixed-tau2", "0", "--report", "ols.json"][..], &files.iter().map(String::as_str).collect::<Vec<_>>()].concat());
    let ols = fedlmm_oracle::ols(&sites);
    let report = json(&dir.path().join("ols.json"));
    for (j, c) in report["coefficients"].as_array().unwrap().iter().enumerate() {
        assert!((c["estimate"].as_f64().unwrap() - ols[j]).abs() < 1e-8);
    }
}

#[test]
fn narrower_intervals_at_lower_level() {
    let dir = tempfile::tempdir().unwrap();
    let files = summarize_three(dir.path());
    let width = |level: &str| -> Vec<f64> {
        let report = format!("fit_{level}.json");
        let mut args = vec!["fit", "--level", level, "--report", &report];
        args.extend(files.iter().map(String::as_str));
        ok(dir.path(), &args);
        json(&dir.path().join(&report))["coefficients"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["ci_hi"].as_f64().unwrap() - c["ci_lo"].as_f64().unwrap())
            .collect()
    };
    let (w90, w95) = (width("0.9"), width("0.95"));
    assert!(w90.iter().zip(&w95).all(|(a, b)| a < b));
}

#[test]
fn reml_on_privatized_input_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let files = summarize_three(dir.path());
    let mut private = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let out = format!("dp{i}.json");
        ok(dir.path(), &["privatize", "--in", f, "--epsilon0", "8", "--delta", "0.01", "--seed", "3", "--out", &out]);
        private.push(out);
    }
    let mut args = vec!["fit", "--method", "reml"];
    args.extend(private.iter().map(String::as_str));
    let out = fedlmm(dir.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("determinant amplification"));
    assert!(!dir.path().join("fit.json").exists());
}

#[test]
fn subset_privatization_needs_sensitive_columns() {
    let dir = tempfile::tempdir().unwrap();
    let files = summarize_three(dir.path());
    let out = fedlmm(dir.path(), &["privatize", "--in", &files[0], "--epsilon0", "8", "--delta", "0.01", "--scope", "subset"]);
    assert_eq!(code(&out), 1);
    ok(dir.path(), &[
        "privatize", "--in", &files[0], "--epsilon0", "8", "--delta", "0.01", "--scope", "subset", "--sensitive", "x2",
        "--out", "sub.json",
    ]);
    let before = s_matrix(&json(&dir.path().join(&files[0])));
    let after = s_matrix(&json(&dir.path().join("sub.json")));
    // x2 is summary coordinate 3; everything outside its row and column is untouched.
    for a in 0..4 {
        for b in 0..4 {
            if a != 3 && b != 3 {
                assert_eq!(before[(a, b)].to_bits(), after[(a, b)].to_bits());
            }
        }
    }
    assert_ne!(before[(3, 3)], after[(3, 3)]);
}

#[test]
fn tampered_summary_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let files = summarize_three(dir.path());
    let path = dir.path().join(&files[1]);
    let mut v = json(&path);
    let s = v["S"].as_array_mut().unwrap();
    s[1] = Value::from(s[1].as_f64().unwrap() + 1.0);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    let mut args = vec!["fit"];
    args.extend(files.iter().map(String::as_str));
    let out = fedlmm(dir.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("b.json"));
}

#[test]
fn singular_design_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    // x2 duplicates x1.
    fs::write(dir.path().join("s.csv"), "site,y,x1,x2\na,1,1,1\na,2,2,2\nb,0,3,3\nb,4,1,1\nc,2,0,0\nc,1,2,2\n").unwrap();
    ok(dir.path(), &["summarize", "--input", "s.csv", "--covariates", "x1,x2", "--site-column", "site"]);
    let out = fedlmm(dir.path(), &["fit", "a.json", "b.json", "c.json"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn attack_recovers_cardiology_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cardio.csv"), "y,x1,x2,x3\n1,0,0,0\n0,1,0,0\n1,0,1,0\n").unwrap();
    ok(dir.path(), &["summarize", "--input", "cardio.csv", "--covariates", "x1,x2,x3"]);
    ok(dir.path(), &["attack", "--in", "cardio.json"]);
    let report = json(&dir.path().join("attack.json"));
    assert_eq!(report["status"], "unique");
    assert_eq!(report["columns"], serde_json::json!(["x1", "x2", "x3"]));
    assert_eq!(report["x_hat"], serde_json::json!([[0, 0, 0], [0, 1, 0], [1, 0, 0]]));
}

#[test]
fn pipeline_is_close_to_exact_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out-dir", "one", "pipeline"]);
    ok(dir.path(), &["--out-dir", "two", "pipeline"]);
    for name in ["fit_private.json", "attack.json", "pipeline.json", "private/site03.json"] {
        assert_eq!(fs::read(dir.path().join("one").join(name)).unwrap(), fs::read(dir.path().join("two").join(name)).unwrap());
    }
    let coefs = |f: &str| -> Vec<f64> {
        json(&dir.path().join("one").join(f))["coefficients"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["estimate"].as_f64().unwrap())
            .collect()
    };
    let (exact, private) = (coefs("fit_exact.json"), coefs("fit_private.json"));
    let l2 = exact.iter().zip(&private).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(l2 > 0.0 && l2 < 0.05, "{l2}");
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "y,x\n1,0\n2,1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fedlmm"))
        .current_dir(dir.path())
        .env("FEDLMM_OUT_DIR", "envout")
        .args(["summarize", "--input", "d.csv", "--covariates", "x"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("envout/d.json").exists());
}

#[test]
fn bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fedlmm(dir.path(), &["fit"])), 1);
    assert_eq!(code(&fedlmm(dir.path(), &["simulate-estimation", "--scenario", "nope", "--reps", "2"])), 1);
    assert_eq!(code(&fedlmm(dir.path(), &["--help"])), 0);
}
