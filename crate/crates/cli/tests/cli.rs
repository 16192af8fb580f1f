use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memport::estimate::{objective, sample_lag_covariance, synthetic_prices};
use memport::fixtures::{reference_memory, reference_sigma, REFERENCE_DAYS};
use serde_json::Value;

const TWO_ASSET: &str = r#"
schema_version = 1
n = 2
p = [0.5, 0.0]
q = [0.5, 0.3]
sigma = [0.25, 0.05, -0.04, 0.2]
rbar = 0.02
lambda_bar = [0.3, 0.2]

[curves]
family = "relaxing"
r0 = 0.03
lambda0 = [0.4, 0.1]
rate = 0.5
"#;

const MERTON: &str = r#"
schema_version = 1
n = 2
p = [0.0, 0.0]
q = [0.5, 0.3]
sigma = [0.2, 0.0, 0.0, 0.25]
rbar = 0.03
lambda_bar = [0.3, -0.2]
"#;

fn memport(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memport"))
        .args(args)
        .current_dir(dir)
        .env("MEMPORT_OUT_DIR", dir.join("out"))
        .env_remove("MEMPORT_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// stdout must be exactly the manifest path.
fn manifest_path(out: &Output) -> PathBuf {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {text:?}");
    let p = PathBuf::from(lines[0]);
    assert!(p.exists(), "{p:?}");
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn verify_default_fixtures_all_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = memport(dir.path(), &["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m = json(&manifest_path(&out));
    assert_eq!(m["command"], "verify");
    let report = json(&dir.path().join("out/verify-report.json"));
    assert_eq!(report["failed"], 0);
    assert!(report["checks"].as_array().unwrap().len() >= 10);
    assert!(stderr(&out).lines().filter(|l| l.starts_with("PASS")).count() >= 10);
}

#[test]
fn verify_filter_and_config_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let out = memport(dir.path(), &["verify", "--filter", "cameron"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&dir.path().join("out/verify-report.json"));
    let names: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["cameron-martin-cosh", "cameron-martin-mc"]);

    let bad = write(dir.path(), "bad.toml", &TWO_ASSET.replace("q = [0.5, 0.3]", "q = [0.0, 0.3]"));
    let out = memport(dir.path(), &["verify", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!stderr(&out).contains("FAIL"), "{}", stderr(&out));
}

#[test]
fn solve_merton_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "merton.toml", MERTON);
    for alpha in ["-1", "0.5"] {
        let out = memport(dir.path(), &["solve", "merton.toml", "--alpha", alpha, "--horizon", "4", "--x0", "1.7"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let m = json(&manifest_path(&out));
        assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
        let v = json(&dir.path().join("out/solve-value.json"));
        let rel = v["merton"]["relative_error"].as_f64().unwrap();
        assert!(rel <= 1e-8, "alpha={alpha}: {rel}");
    }
    let grids = fs::read_to_string(dir.path().join("out/solve-grids.csv")).unwrap();
    assert!(grids.starts_with("t,R_1,R_2,v_1,v_2\n"));
    assert_eq!(grids.lines().count(), 1 + 4 * 64 + 1);

    let out = memport(dir.path(), &["solve", "merton.toml", "--alpha", "0", "--horizon", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha=0"), "{}", stderr(&out));

    write(dir.path(), "nosigma.toml", &MERTON.replace("sigma = [0.2, 0.0, 0.0, 0.25]\n", ""));
    let out = memport(dir.path(), &["solve", "nosigma.toml", "--alpha", "0.5", "--horizon", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sigma"));
}

#[test]
fn growth_reports_and_threshold_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "two.toml", TWO_ASSET);
    let out = memport(dir.path(), &["growth", "two.toml", "--alpha-grid=-2,-1,0.2,0.5,0.9"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = json(&dir.path().join("out/growth-report.json"));
    let c_bar = report["c_bar"].as_f64().unwrap();
    let alpha_csv = fs::read_to_string(dir.path().join("out/growth-alpha.csv")).unwrap();
    let mut rows = 0;
    for line in alpha_csv.lines().skip(1) {
        let gap: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(gap <= 1e-9);
        rows += 1;
    }
    assert_eq!(rows, 5);
    let rate_csv = fs::read_to_string(dir.path().join("out/growth-rate.csv")).unwrap();
    for line in rate_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (c, rate): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        if c <= c_bar {
            assert_eq!(rate, 0.0);
        } else {
            assert!(rate < 0.0);
        }
    }

    let strong = TWO_ASSET.replace("p = [0.5, 0.0]", "p = [3.0, 0.0]").replace("q = [0.5, 0.3]", "q = [0.05, 0.3]");
    write(dir.path(), "strong.toml", &strong);
    let out = memport(dir.path(), &["growth", "strong.toml", "--alpha", "-5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("alpha*=-3.13"), "{}", stderr(&out));
}

#[test]
fn simulate_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "two.toml", TWO_ASSET);
    let args = ["simulate", "two.toml", "--strategy", "p1", "--alpha", "0.5", "--paths", "3000", "--T", "2", "--seed", "9", "--write-paths", "2"];
    let first = memport(dir.path(), &args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let manifest = manifest_path(&first);
    let a = fs::read(dir.path().join("out/simulate-estimates.json")).unwrap();
    let path0 = fs::read(dir.path().join("out/simulate-path-0.csv")).unwrap();
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["comparison"]["consistent"], true, "{report}");

    let again = Command::new(env!("CARGO_BIN_EXE_memport"))
        .args(args)
        .current_dir(dir.path())
        .env("MEMPORT_OUT_DIR", dir.path().join("again"))
        .env("MEMPORT_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("again/simulate-estimates.json")).unwrap(), a);

    let replay = Command::new(env!("CARGO_BIN_EXE_memport"))
        .args(["--out-dir", "replayed", "replay", manifest.to_str().unwrap()])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(replay.status.code(), Some(0), "{}", stderr(&replay));
    assert_eq!(fs::read(dir.path().join("replayed/simulate-estimates.json")).unwrap(), a);
    assert_eq!(fs::read(dir.path().join("replayed/simulate-path-0.csv")).unwrap(), path0);
}

#[test]
fn simulate_riskless_strategy_has_zero_variance() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "two.toml", TWO_ASSET);
    let out = memport(dir.path(), &["simulate", "two.toml", "--strategy", "none", "--paths", "500", "--T", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&dir.path().join("out/simulate-estimates.json"));
    assert!(r["log_growth"]["sd"].as_f64().unwrap() < 1e-12);
    assert_eq!(r["comparison"]["consistent"], true);
    assert!(r["comparison"]["z"].is_null());
}

#[test]
fn simulate_stationary_growth_ci_contains_j() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "two.toml", TWO_ASSET);
    let out = memport(
        dir.path(),
        &["simulate", "two.toml", "--strategy", "p2", "--alpha", "0.5", "--T", "50", "--steps", "5000", "--paths", "100000", "--seed", "1"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&dir.path().join("out/simulate-estimates.json"));
    let (lo, hi, j) = (
        r["growth"]["ci_low"].as_f64().unwrap(),
        r["growth"]["ci_high"].as_f64().unwrap(),
        r["comparison"]["value"].as_f64().unwrap(),
    );
    assert!(lo <= j && j <= hi, "J={j} CI=[{lo}, {hi}]");
}

fn write_reference_prices(dir: &Path) -> PathBuf {
    let s = synthetic_prices(&reference_sigma(), &reference_memory(), REFERENCE_DAYS, 77, 0).unwrap();
    let mut text = String::from("date,a,b,c\n");
    for (m, row) in s.prices.row_iter().enumerate() {
        text.push_str(&format!("day{m},{},{},{}\n", row[0], row[1], row[2]));
    }
    write(dir, "prices.csv", &text)
}

#[test]
fn estimate_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let prices = write_reference_prices(dir.path());
    let out = memport(dir.path(), &["estimate", "prices.csv", "--max-lag", "100", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m = json(&manifest_path(&out));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 7);
    let fit = json(&dir.path().join("out/estimate-fit.json"));
    assert_eq!(fit["n_obs"], 2519);
    let curve = fs::read_to_string(dir.path().join("out/estimate-curve-13.csv")).unwrap();
    assert_eq!(curve.lines().count(), 101);
    assert!(curve.starts_with("t,d_13,D_13\n"));

    let series = memport::estimate::ingest_prices_file(&prices).unwrap();
    let table = sample_lag_covariance(&series, 100).unwrap();
    let truth = reference_memory();
    let at_truth = objective(&table, &reference_sigma(), truth.p(), truth.q());
    assert!(fit["fit"]["objective"].as_f64().unwrap() <= at_truth);

    let out = memport(dir.path(), &["estimate", "prices.csv", "--max-lag", "2518"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("degenerate"));

    let out = memport(dir.path(), &["estimate", "prices.csv", "--max-lag", "30", "--max-iterations", "1", "--starts", "3"]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(stderr(&out).contains("start"), "{}", stderr(&out));

    let out = memport(dir.path(), &["estimate", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
