use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tfqkd_core::aopp::RawKeyPair;
use tfqkd_core::io;
use tfqkd_core::keyrate::PipelineReport;
use tfqkd_core::montecarlo::SimSummary;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn tfqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfqkd")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn edited_json(src: &Path, dir: &TempDir, name: &str, edit: impl FnOnce(&mut serde_json::Map<String, Value>)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(src).unwrap()).unwrap();
    edit(v.as_object_mut().unwrap());
    let p = dir.path().join(name);
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

#[test]
fn validate_accepts_field_parameters() {
    let o = tfqkd(&["validate", "--params", path_str(&fixture("field_params.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn validate_rejects_bad_probability() {
    let dir = TempDir::new().unwrap();
    let bad = edited_json(&fixture("field_params.json"), &dir, "bad.json", |m| {
        m.insert("p_z_A".into(), Value::from(1.4));
    });
    let o = tfqkd(&["validate", "--params", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, vec!["basis probability (A)"]);
}

#[test]
fn tight_tolerance_reports_asymmetry_deviation() {
    let o = tfqkd(&["validate", "--params", path_str(&fixture("field_params.json")), "--tolerance", "0.001"]);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let check = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "asymmetry condition")
        .unwrap();
    assert_eq!(check["passed"], false);
    let dev = check["deviation"].as_f64().unwrap();
    assert!((dev - 0.0078).abs() < 0.0005, "{dev}");
}

#[test]
fn keyrate_on_field_counts() {
    let o = tfqkd(&[
        "keyrate",
        "--params",
        path_str(&fixture("field_params.json")),
        "--counts",
        path_str(&fixture("field_counts.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((r.key_rate.bits_per_second / 110.1 - 1.0).abs() < 0.2);
    assert!(r.decoy.is_some() && r.aopp.is_some());
}

#[test]
fn zero_counts_give_zero_rate() {
    let dir = TempDir::new().unwrap();
    let zero = edited_json(&fixture("field_counts.json"), &dir, "zero.json", |m| {
        for (k, v) in m.iter_mut() {
            if k != "N_total_sent" {
                *v = Value::from(0.0);
            }
        }
    });
    let o = tfqkd(&[
        "keyrate",
        "--params",
        path_str(&fixture("field_params.json")),
        "--counts",
        path_str(&zero),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.key_rate.r_per_signal, 0.0);
    assert!(!r.key_rate.diagnostics.is_empty());
}

#[test]
fn missing_category_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let partial = edited_json(&fixture("field_counts.json"), &dir, "partial.json", |m| {
        m.remove("Detected-XXvv");
    });
    let o = tfqkd(&[
        "keyrate",
        "--params",
        path_str(&fixture("field_params.json")),
        "--counts",
        path_str(&partial),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("Detected-XXvv"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let o = tfqkd(&["validate", "--params", "/nonexistent/params.json"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bounds_at_half_transmission() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bounds.csv");
    let db = format!("{}", 10.0 * 2f64.log10());
    let o = tfqkd(&["bounds", "--sweep-db", &db, "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let header = std::fs::read_to_string(&out).unwrap().lines().next().unwrap().to_string();
    for col in ["skc0", "skc0_relative", "skc1_sym", "skc1_asym", "noisy_ub"] {
        assert!(header.split(',').any(|h| h == col), "{header}");
    }
    let rows = io::read_bounds_csv(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].skc0 - 1.0).abs() < 1e-12);
}

#[test]
fn simulated_curve_is_monotone() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("curve.csv");
    let o = tfqkd(&["simulate", "--sweep-db", "0:60:1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = io::read_curve_csv(&out).unwrap();
    assert_eq!(rows.len(), 61);
    assert!(rows.windows(2).all(|w| w[1].skr_bit_per_pulse <= w[0].skr_bit_per_pulse));
    assert!(rows[0].skr_bit_per_pulse > 0.0);
}

#[test]
fn length_sweep_converts_with_attenuation() {
    let o = tfqkd(&["simulate", "--sweep-km", "0:200:100", "--atten", "0.2", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    let losses: Vec<f64> = rows.iter().map(|r| r["loss_db"].as_f64().unwrap()).collect();
    assert_eq!(losses, vec![0.0, 20.0, 40.0]);
}

fn montecarlo(dir: &Path, loss: &str, slots: &str, seed: &str) {
    let o = tfqkd(&[
        "montecarlo",
        "--loss-db",
        loss,
        "--slots",
        slots,
        "--seed",
        seed,
        "--no-deadtime",
        "--out",
        path_str(dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn keyrate_rate(counts: &Path) -> f64 {
    let o = tfqkd(&[
        "keyrate",
        "--params",
        path_str(&fixture("field_params.json")),
        "--counts",
        path_str(counts),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: PipelineReport = serde_json::from_str(&stdout(&o)).unwrap();
    r.key_rate.r_per_signal
}

fn analytic_rate(loss: &str, n_tot: &str) -> f64 {
    let o = tfqkd(&["simulate", "--sweep-db", loss, "--n-tot", n_tot, "--format", "json"]);
    let rows: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    rows[0]["skr_bit_per_pulse"].as_f64().unwrap()
}

#[test]
fn montecarlo_counts_feed_keyrate() {
    let dir = TempDir::new().unwrap();
    montecarlo(dir.path(), "20", "1e7", "1");
    let mc = keyrate_rate(&dir.path().join("counts.json"));
    let analytic = analytic_rate("20", "1e7");
    // Ten million slots are too few for a positive finite-size key at
    // these settings on either path.
    assert_eq!((mc, analytic), (0.0, 0.0));
}

#[test]
fn montecarlo_rate_agrees_with_analytic_curve() {
    let seeds = ["11", "12", "13", "14"];
    let dir = TempDir::new().unwrap();
    let rates: Vec<f64> = seeds
        .iter()
        .map(|s| {
            let d = dir.path().join(s);
            montecarlo(&d, "20", "1e9", s);
            keyrate_rate(&d.join("counts.json"))
        })
        .collect();
    let analytic = analytic_rate("20", "1e9");
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(analytic > 0.0 && sd > 0.0);
    for r in &rates {
        assert!((r - analytic).abs() <= 3.0 * sd, "{rates:?} vs {analytic}");
    }
    assert!((mean - analytic).abs() <= 3.0 * sd / n.sqrt(), "{mean} vs {analytic} (sd {sd})");
}

#[test]
fn montecarlo_outputs_round_trip() {
    let dir = TempDir::new().unwrap();
    let o = tfqkd(&[
        "montecarlo",
        "--loss-db",
        "10",
        "--slots",
        "2e6",
        "--stage",
        "fine",
        "--format",
        "csv",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let params = io::read_params(&fixture("field_params.json")).unwrap();
    let counts = io::read_counts(&dir.path().join("counts.csv"), &params).unwrap();
    assert_eq!(counts.n_tot, 2e6);
    let summary: SimSummary = io::read_json(&dir.path().join("outcome.json")).unwrap();
    let keys = RawKeyPair::from_packed(&summary.raw_keys).unwrap();
    let zz: f64 = tfqkd_core::Category::all().filter(|c| c.is_zz()).map(|c| counts.detected(c)).sum();
    assert_eq!(keys.len() as f64, zz);
    assert!((keys.qber() - summary.qber_z).abs() < 1e-15);
    let trace = io::read_trace_csv(&dir.path().join("trace.csv")).unwrap();
    assert!(!trace.is_empty());
}

#[test]
fn keyrate_report_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report.json");
    let o = tfqkd(&[
        "keyrate",
        "--params",
        path_str(&fixture("field_params.json")),
        "--counts",
        path_str(&fixture("field_counts.json")),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let a: PipelineReport = io::read_json(&out).unwrap();
    let again = serde_json::to_string(&a).unwrap();
    let b: PipelineReport = serde_json::from_str(&again).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seeded_commands_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    montecarlo(&a, "15", "1e6", "9");
    montecarlo(&b, "15", "1e6", "9");
    for f in ["counts.json", "outcome.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let run = || stdout(&tfqkd(&["phasestab", "--duration", "0.2", "--seed", "4"]));
    assert_eq!(run(), run());
}

#[test]
fn phasestab_rejects_unstable_gain() {
    let o = tfqkd(&["phasestab", "--coarse-gain", "2.5", "--duration", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("coarse"));
}
