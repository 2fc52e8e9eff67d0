use std::fs;
use std::process::{Command, Output};

use mdsim::bench::SweepReport;
use mdsim::des::Trace;

fn mdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdsim")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SWEEP: &str = r#"
[[scenario]]
preset = "grappa-pme-6k"
layout = { gcds = 1 }
profile = "23.10-instant"
reps = 3
n_steps = 150

[[matrix]]
presets = ["grappa-pme-3k"]
layouts = [{ gcds = 1 }]
profiles = ["0.9.4", "23.10-instant"]
mcn = [0, 100]
"#;

#[test]
fn sweep_writes_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    fs::write(&spec, SWEEP).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = mdsim(&["sweep", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let report = SweepReport::from_csv(&text).unwrap();
    // 3 reps, plus the matrix: two MCNs for 0.9.4 and one instant entry.
    assert_eq!(report.rows.len(), 6);
    let reps: Vec<f64> = report.rows[..3].iter().map(|r| r.ns_per_day).collect();
    assert!(reps.iter().all(|&v| v == reps[0]));
}

#[test]
fn check_exit_status_follows_points() {
    let dir = tempfile::tempdir().unwrap();
    let point = |value: f64| {
        format!(
            r#"
[[points]]
id = "p"
figure = "f"
metric = "ns-per-day"
value = {value}
tolerance = 0.1
tolerance_kind = "relative"
provenance = "test"
scenario = {{ preset = "grappa-pme-3k", layout = {{ gcds = 1 }}, profile = "23.10-instant", n_steps = 150 }}
"#
        )
    };
    let sim = mdsim(&["simulate", "--preset", "grappa-pme-3k", "--profile", "23.10-instant", "--steps", "150"]);
    let rate: f64 = stdout(&sim)
        .lines()
        .find_map(|l| l.strip_prefix("ns/day"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();

    let good = dir.path().join("good.toml");
    fs::write(&good, point(rate)).unwrap();
    let o = mdsim(&["check", "--reference", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS p"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, point(rate * 2.0)).unwrap();
    let o = mdsim(&["check", "--reference", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL p"));
}

#[test]
fn check_with_report_lists_missing_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    fs::write(&csv, SweepReport::default().to_csv()).unwrap();
    let o = mdsim(&["check", "--report", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("MISSING single-gcd-12k-instant"));
}

#[test]
fn calibrate_recovers_line() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("s.csv");
    fs::write(&samples, "atoms,walltime_us\n# comment\n1000, 14\n3000, 22\n5000, 30\n").unwrap();
    let o = mdsim(&["calibrate", "--samples", samples.to_str().unwrap(), "--kernel", "PmeSpread"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("[kernels.PmeSpread]"));
    let get = |k: &str| -> f64 { out.lines().find_map(|l| l.strip_prefix(k)).unwrap().trim_start_matches([' ', '=']).parse().unwrap() };
    assert!((get("floor_us") - 10.0).abs() < 1e-9);
    assert!((get("slope_us") - 0.004).abs() < 1e-12);
}

#[test]
fn export_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = mdsim(&[
        "export-trace", "--preset", "grappa-pme-1500", "--profile", "0.9.4", "--mcn", "5", "--gcds", "2", "--steps", "110", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = Trace::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(!trace.is_empty());
    assert!(trace.records.iter().any(|r| r.actor.starts_with("rank1/")));
}

#[test]
fn plan_affinity_formats() {
    let o = mdsim(&["plan-affinity", "--topology", "lumi", "--ranks", "8", "--format", "env"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 8);
    let o = mdsim(&["plan-affinity", "--topology", "dardel", "--ranks", "1", "--format", "masks"]);
    // CCX 0 with SMT: cores 0-7 and siblings 64-71.
    assert_eq!(stdout(&o).trim(), "mask_cpu:0xff00000000000000ff");
    let o = mdsim(&["plan-affinity", "--ranks", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors() {
    assert!(!mdsim(&["simulate", "--preset", "nope"]).status.success());
    assert!(!mdsim(&["simulate", "--preset", "grappa-pme-3k", "--env", "novalue"]).status.success());
    assert!(!mdsim(&["simulate", "--preset", "grappa-pme-3k", "--gcds", "1", "--nodes", "2"]).status.success());
}

#[test]
fn env_override_changes_behavior() {
    let rate = |extra: &[&str]| {
        let mut args = vec!["simulate", "--preset", "grappa-pme-3k", "--profile", "23.10", "--steps", "150"];
        args.extend_from_slice(extra);
        let o = mdsim(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o).lines().find(|l| l.starts_with("ns/day")).unwrap().to_string()
    };
    assert_ne!(rate(&[]), rate(&["--env", "HIPSYCL_RT_MAX_CACHED_NODES=0"]));
}
