use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn oal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = oal(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = oal(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn summary_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in:\n{text}"))
        .parse()
        .unwrap()
}

/// (tau_ns, value columns...) rows of a CSV, skipping comment and header lines.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("tau") && !l.starts_with('x') && !l.is_empty())
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn sweep_is_deterministic_and_hashed() {
    let d = tmp();
    fs::write(d.path().join("c.toml"), "x_points = 5\n").unwrap();
    let s1 = ok(d.path(), &["sweep", "--preset", "fig3", "--config", "c.toml", "--out-dir", "a"]);
    ok(d.path(), &["sweep", "--preset", "fig3", "--config", "c.toml", "--out-dir", "b", "--threads", "1"]);
    for f in ["quantum.csv", "semiclassical.csv", "summary.txt"] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
        assert!(String::from_utf8(a).unwrap().starts_with("# config_hash=sha256:"));
    }
    let q = fs::read_to_string(d.path().join("a/quantum.csv")).unwrap();
    assert!(q.contains("x,nbar,pop_3p,pop_4,flux_ratio"));
    let grid: Vec<f64> = rows(&d.path().join("a/quantum.csv")).iter().map(|r| r[0]).collect();
    assert_eq!(grid.first(), Some(&0.0));
    assert_eq!(grid.last(), Some(&2.33));
    let semi = fs::read_to_string(d.path().join("a/semiclassical.csv")).unwrap();
    assert!(semi.lines().last().unwrap().starts_with("# x_th="));
    assert!(s1.contains("x_star=") && s1.contains("nbar_max=") && s1.contains("x_th="));
}

#[test]
fn sweep_rejects_empty_grid() {
    let d = tmp();
    fs::write(d.path().join("c.toml"), "x_points = 0\n").unwrap();
    let err = fails(d.path(), &["sweep", "--preset", "fig3", "--config", "c.toml"]);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn config_schema_is_enforced() {
    let d = tmp();
    fs::write(d.path().join("c.toml"), "kappa = 4.2\n").unwrap();
    let err = fails(d.path(), &["g2", "--preset", "fig4_low", "--config", "c.toml"]);
    assert!(err.contains("kappa"), "{err}");
    let err = fails(d.path(), &["g2", "--preset", "nonexistent"]);
    assert!(err.contains("preset"), "{err}");
}

#[test]
fn g2_presets() {
    let d = tmp();
    let low = ok(d.path(), &["g2", "--preset", "fig4_low", "--out-dir", "low"]);
    assert!(summary_value(&low, "g2_0") < 1.0);
    let r = rows(&d.path().join("low/g2.csv"));
    assert_eq!(r.len(), 2049);
    for k in 0..r.len() {
        assert_eq!(r[k][0], -r[r.len() - 1 - k][0]);
        assert_eq!(r[k][1], r[r.len() - 1 - k][1]);
    }
    let high = ok(d.path(), &["g2", "--preset", "fig4_high", "--out-dir", "high"]);
    assert!(summary_value(&high, "g2_0") > summary_value(&low, "g2_0"));
    let err = fails(d.path(), &["g2", "--x", "0"]);
    assert!(err.contains("undefined"), "{err}");
}

fn simulate(dir: &Path, out: &str, extra: &str, seed: &str) -> String {
    fs::write(dir.join(format!("{out}.toml")), extra).unwrap();
    ok(
        dir,
        &["trajectories", "--preset", "fig4_low", "--config", &format!("{out}.toml"), "--seed", seed, "--out-dir", out],
    )
}

#[test]
fn single_trajectory_reproducible() {
    let d = tmp();
    simulate(d.path(), "a", "duration_s = 0.002\n", "11");
    simulate(d.path(), "b", "duration_s = 0.002\n", "11");
    let a = fs::read(d.path().join("a/records/run_0000.txt")).unwrap();
    let b = fs::read(d.path().join("b/records/run_0000.txt")).unwrap();
    assert_eq!(a, b);
    assert!(!d.path().join("a/records/run_0001.txt").exists());
    simulate(d.path(), "c", "duration_s = 0.002\n", "12");
    assert_ne!(a, fs::read(d.path().join("c/records/run_0000.txt")).unwrap());
    let ens = fs::read_to_string(d.path().join("a/ensemble.csv")).unwrap();
    assert!(ens.contains("t_ns,nbar_mean,nbar_se"));
}

#[test]
fn detected_rate_matches_prediction() {
    let d = tmp();
    let s = simulate(d.path(), "t", "duration_s = 0.05\nbackground_rate_hz = 2000\n", "3");
    let predicted = summary_value(&s, "predicted_rate_hz");
    let rate = summary_value(&s, "detected_rate_hz");
    let se = summary_value(&s, "detected_rate_se_hz");
    assert!((rate - predicted).abs() < 3.0 * se, "{rate} vs {predicted} ± {se}");
    let rates = fs::read_to_string(d.path().join("t/rates/run_0000.csv")).unwrap();
    assert_eq!(rates.lines().filter(|l| !l.starts_with('#')).count(), 11);
}

#[test]
fn estimate_matches_regression_curve() {
    let d = tmp();
    simulate(d.path(), "t", "duration_s = 0.25\nbackground_rate_hz = 3000\n", "5");
    ok(d.path(), &["g2", "--preset", "fig4_low", "--out-dir", "g"]);
    let s = ok(
        d.path(),
        &["estimate", "--out-dir", "e", "--bin-width-ns", "50", "--tau-max-ns", "600", "--sigma-ns", "0", "t/records/run_0000.txt"],
    );
    assert!(summary_value(&s, "background_hz") == 3000.0);
    let model = rows(&d.path().join("g/g2.csv"));
    let est = rows(&d.path().join("e/g2_estimate.csv"));
    let mut within = 0;
    for r in &est {
        let (tau, g, err) = (r[0], r[1], r[3]);
        // Bin average of the regression curve.
        let inside: Vec<f64> = model
            .iter()
            .filter(|m| m[0] >= tau - 25.0 && m[0] < tau + 25.0)
            .map(|m| m[1])
            .collect();
        let expect = inside.iter().sum::<f64>() / inside.len() as f64;
        if (g - expect).abs() <= 3.0 * err {
            within += 1;
        }
    }
    assert!(within as f64 >= 0.9 * est.len() as f64, "{within}/{}", est.len());
    let g_summary = fs::read_to_string(d.path().join("g/g2_summary.txt")).unwrap();
    let nbar = summary_value(&g_summary, "nbar");
    let (est_n, se) = (summary_value(&s, "nbar"), summary_value(&s, "nbar_se"));
    assert!((est_n - nbar).abs() < 3.0 * se, "{est_n} ± {se} vs {nbar}");
}

fn write_record(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn estimate_rejections() {
    let d = tmp();
    write_record(d.path(), "one.txt", "# duration_ns=1000\nD1\t1\nD1\t5\n");
    let err = fails(d.path(), &["estimate", "one.txt"]);
    assert!(err.contains("one detector"), "{err}");

    write_record(d.path(), "bad.txt", "# duration_ns=1000\nD1\t1\nD3\t5\n");
    let err = fails(d.path(), &["estimate", "bad.txt"]);
    assert!(err.contains("line 3"), "{err}");

    let mut text = String::from("# duration_ns=1000000\n");
    for k in 0..100 {
        text.push_str(&format!("D1\t{}\nD2\t{}\n", k * 10_000, k * 10_000 + 3_000));
    }
    write_record(d.path(), "bg.txt", &text);
    // 100 clicks per detector in 1 ms is 1e5 s⁻¹, all declared as background.
    let err = fails(d.path(), &["estimate", "--background-hz", "100000", "bg.txt"]);
    assert!(err.contains("background"), "{err}");
}
