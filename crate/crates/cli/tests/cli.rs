use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subgroup-balance")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Deterministic pseudo-uniform in (0, 1).
fn unif(i: usize, salt: u64) -> f64 {
    let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 31;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 29;
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Three strata, two covariates, confounded treatment. `reverse_outcome`
/// writes the outcome column in reverse row order.
fn fixture(n: usize, reverse_outcome: bool) -> String {
    let rows: Vec<(f64, u8, &str, f64, f64)> = (0..n)
        .map(|i| {
            let x1 = 4.0 * unif(i, 1) - 2.0;
            let x2 = 4.0 * unif(i, 2) - 2.0;
            let g = ["a", "b", "c"][i % 3];
            let w = u8::from(unif(i, 3) < 1.0 / (1.0 + (-(0.6 * x1 - 0.4 * x2)).exp()));
            let y = x1 + 0.5 * x2 + f64::from(w) * (1.0 + 0.5 * (i % 3) as f64) + unif(i, 4) - 0.5;
            (y, w, g, x1, x2)
        })
        .collect();
    let mut s = String::from("y,w,g,x1,x2\n");
    for (i, r) in rows.iter().enumerate() {
        let y = if reverse_outcome { rows[n - 1 - i].0 } else { r.0 };
        s.push_str(&format!("{y},{},{},{},{}\n", r.1, r.2, r.3, r.4));
    }
    s
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn setup(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), fixture(n, false)).unwrap();
    dir
}

#[test]
fn weights_writes_balanced_solution() {
    let dir = setup(240);
    let o = run(dir.path(), &["weights", "--input", "data.csv", "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["weights.json", "weights.csv", "balance.json", "overlap.json", "manifest.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let balance = json(&dir.path().join("out/balance.json"));
    for v in balance["global"].as_array().unwrap() {
        assert!(v.as_f64().unwrap() <= 1e-6);
    }
    let manifest = json(&dir.path().join("out/manifest.json"));
    assert_eq!(manifest["command"], "weights");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn weights_rerun_is_byte_identical() {
    let dir = setup(150);
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "data.csv", "--out", "a"])), 0);
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "data.csv", "--out", "a2", "--threads", "1"])), 0);
    for f in ["weights.json", "weights.csv", "balance.json", "overlap.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("a2").join(f)).unwrap());
    }
}

#[test]
fn weights_never_see_the_outcome() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fs::write(a.path().join("data.csv"), fixture(200, false)).unwrap();
    fs::write(b.path().join("data.csv"), fixture(200, true)).unwrap();
    assert_ne!(fs::read(a.path().join("data.csv")).unwrap(), fs::read(b.path().join("data.csv")).unwrap());
    for d in [&a, &b] {
        assert_eq!(code(&run(d.path(), &["weights", "--input", "data.csv", "--out", "out"])), 0);
    }
    for f in ["weights.json", "weights.csv", "balance.json", "overlap.json", "manifest.json"] {
        let (x, y) = (fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap());
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn infeasible_balance_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("y,w,g,x\n");
    for i in 0..12 {
        let treated = i >= 9;
        let x = if treated { 50.0 + i as f64 } else { i as f64 / 9.0 };
        s.push_str(&format!("0,{},a,{x}\n", u8::from(treated)));
    }
    fs::write(dir.path().join("data.csv"), s).unwrap();
    let o = run(dir.path(), &["weights", "--input", "data.csv", "--out", "out"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
    // the global constraint is what fails
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "data.csv", "--out", "out", "--pooling", "none"])), 0);
}

#[test]
fn usage_and_io_errors_exit_with_one() {
    let dir = setup(30);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["weights", "--out", "x"])), 1);
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "missing.csv", "--out", "x"])), 1);
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "data.csv", "--out", "x", "--lambda", "-1"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn estimate_aggregates_over_groupings() {
    let dir = setup(300);
    fs::write(dir.path().join("strata.csv"), "stratum,group\na,a\nb,b\nc,c\n").unwrap();
    fs::write(dir.path().join("pooled.csv"), "stratum,group\na,all\nb,all\nc,all\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["weights", "--input", "data.csv", "--out", "w"])), 0);
    let o = run(
        dir.path(),
        &["estimate", "--input", "data.csv", "--weights", "w/weights.json", "--grouping", "strata.csv", "--grouping", "pooled.csv", "--out", "e"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("e/estimates.csv"));
    let tau = |level: &str, group: &str| -> f64 {
        rows.iter().find(|r| r[0] == level && r[1] == group).map(|r| r[4].parse().unwrap()).unwrap()
    };
    for g in ["a", "b", "c"] {
        assert_eq!(tau("subgroup", g), tau("strata", g));
    }
    assert!((tau("pooled", "all") - tau("overall", "overall")).abs() <= 1e-12);

    // inline solve gives the same table as reading the weights back
    assert_eq!(code(&run(dir.path(), &["estimate", "--input", "data.csv", "--out", "e2"])), 0);
    let inline = csv_rows(&dir.path().join("e2/estimates.csv"));
    assert_eq!(inline.len(), 4);
    for a in &inline {
        let b = rows.iter().find(|r| r[..2] == a[..2]).unwrap();
        for (x, y) in a[2..].iter().zip(&b[2..]) {
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }

    fs::write(dir.path().join("bad.csv"), "stratum,group\na,x\nzzz,y\n").unwrap();
    let o = run(dir.path(), &["estimate", "--input", "data.csv", "--grouping", "bad.csv", "--out", "e3"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn estimate_methods_run() {
    let dir = setup(300);
    for m in ["ipw", "ipw-fixed-effects", "ridge", "regression"] {
        let out = format!("m-{m}");
        let o = run(dir.path(), &["estimate", "--input", "data.csv", "--method", m, "--out", &out]);
        assert_eq!(code(&o), 0, "{m}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(csv_rows(&dir.path().join(&out).join("estimates.csv")).len(), 4);
    }
    let o = run(dir.path(), &["estimate", "--input", "data.csv", "--augment", "ridge", "--out", "aug"]);
    assert_eq!(code(&o), 0);
    let o = run(dir.path(), &["estimate", "--input", "data.csv", "--method", "ridge", "--augment", "ridge", "--out", "x"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let dir = setup(200);
    let o = run(dir.path(), &["sweep", "--input", "data.csv", "--grid", "1,1e4,1e8", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("s/sweep.csv"));
    assert_eq!(rows.len(), 3);
    let local: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(local[0] <= local[1] && local[1] <= local[2]);
}

#[test]
fn sensitivity_at_unit_lambda_matches_estimate() {
    let dir = setup(210);
    assert_eq!(code(&run(dir.path(), &["estimate", "--input", "data.csv", "--out", "e"])), 0);
    let o = run(
        dir.path(),
        &["sensitivity", "--input", "data.csv", "--sens-lambda", "1,1.5", "--bootstrap", "40", "--seed", "3", "--target", "overall", "--target", "subgroup:b", "--out", "s"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let est = csv_rows(&dir.path().join("e/estimates.csv"));
    let sens = csv_rows(&dir.path().join("s/sensitivity.csv"));
    assert_eq!(sens.len(), 4);
    let point = |level: &str, g: &str| -> f64 { est.iter().find(|r| r[0] == level && r[1] == g).unwrap()[4].parse().unwrap() };
    for (row, expect) in [(&sens[0], point("overall", "overall")), (&sens[2], point("subgroup", "b"))] {
        let (lo, hi): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
        assert!((lo - expect).abs() <= 1e-10 && (hi - expect).abs() <= 1e-10);
    }
    // the wider Lambda gives wider bounds
    let width = |r: &Vec<String>| r[3].parse::<f64>().unwrap() - r[2].parse::<f64>().unwrap();
    assert!(width(&sens[1]) > width(&sens[0]));
}

#[test]
fn simulate_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run(dir.path(), &["simulate", "--n", "500", "--d", "8", "--replicates", "2", "--seed", "5", "--out", "sim"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    for f in ["metrics.csv", "replicates.csv", "failures.csv", "summary.json", "manifest.json"] {
        assert!(dir.path().join("sim").join(f).is_file(), "{f}");
    }
    let manifest = json(&dir.path().join("sim/manifest.json"));
    assert_eq!(manifest["seed"], 5);
}
