use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde::Deserialize;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn wlan_pf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wlan-pf")).args(args).output().unwrap()
}

fn ok_stdout(args: &[&str]) -> String {
    let out = wlan_pf(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[derive(Debug, Deserialize)]
struct ModelRow {
    station: String,
    rate_mbps: f64,
    scheme: String,
    throughput_mbps: f64,
    airtime_frac: f64,
    utility_total: f64,
}

#[test]
fn model_csv_round_trips() {
    let path = scenario("two_station.toml");
    let text = ok_stdout(&["model", "--scenario", path.to_str().unwrap()]);
    let rows: Vec<ModelRow> = csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 4);
    let rpf: Vec<_> = rows.iter().filter(|r| r.scheme == "rpf").collect();
    assert!(rpf.iter().all(|r| (r.airtime_frac - 0.5).abs() < 1e-9));
    assert_eq!(rpf[0].station, "sta1");
    assert_eq!(rpf[1].rate_mbps, 6.0);
    let dcf = rows.iter().find(|r| r.scheme == "dcf").unwrap();
    assert!(rpf[0].utility_total > dcf.utility_total);
    assert!(rpf[0].throughput_mbps > dcf.throughput_mbps);
}

#[test]
fn jsonl_output_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt.jsonl");
    let path = scenario("ladder.toml");
    let stdout = ok_stdout(&[
        "optimize",
        "--scenario",
        path.to_str().unwrap(),
        "--format",
        "jsonl",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.is_empty());
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    for l in &lines {
        assert!(l["residual"].as_f64().unwrap() <= 1e-10);
        assert!(l["ecw"].as_u64().unwrap() <= 15);
        assert!(l["utility_gain"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "[[stations]]\nlabel = \"a\"\npayload_bytes = 1000\nrate_mbps = 54\n\n[[stations]]\nlabel = \"b\"\npayload_bytes = 1000\nrate_mbps = 7\n",
    )
    .unwrap();
    let out = wlan_pf(&["model", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stations[1]"), "{err}");

    std::fs::write(&bad, "stations = \"none\"\n").unwrap();
    assert_eq!(wlan_pf(&["model", "--scenario", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_file_is_a_general_error() {
    let out = wlan_pf(&["model", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_seeded_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let path = scenario("two_station.toml");
    let args = [
        "simulate",
        "--scenario",
        path.to_str().unwrap(),
        "--mode",
        "backoff",
        "--slots",
        "20000",
        "--seed",
        "5",
    ];
    let a = ok_stdout(&args);
    let b = ok_stdout(&args);
    assert_eq!(a, b);
    let mut with_trace = args.to_vec();
    with_trace.extend(["--trace", trace.to_str().unwrap()]);
    let c = ok_stdout(&with_trace);
    assert_eq!(a, c);
    let t = std::fs::read_to_string(trace).unwrap();
    let mut lines = t.lines();
    assert_eq!(lines.next(), Some("slot_index,outcome,station,duration_us"));
    assert_eq!(lines.count(), 20000);
    let other = ok_stdout(&[
        "simulate",
        "--scenario",
        path.to_str().unwrap(),
        "--mode",
        "backoff",
        "--slots",
        "20000",
        "--seed",
        "6",
    ]);
    assert_ne!(a, other);
}

#[test]
fn sweep_order_does_not_depend_on_execution() {
    let path = scenario("ladder.toml");
    let par = ok_stdout(&["sweep-payload", "--scenario", path.to_str().unwrap()]);
    let seq = ok_stdout(&["sweep-payload", "--scenario", path.to_str().unwrap(), "--sequential"]);
    assert_eq!(par, seq);
    let mut reader = csv::Reader::from_reader(par.as_bytes());
    let payloads: Vec<f64> = reader.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(payloads.len(), 14 * 8);
    assert!(payloads.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn closed_loop_trace_columns() {
    let path = scenario("capture.toml");
    let text = ok_stdout(&["closed-loop", "--scenario", path.to_str().unwrap()]);
    let header = text.lines().next().unwrap();
    assert_eq!(header, "time_s,station,rate_mbps,ecw,throughput_mbps,airtime_frac");
    let again = ok_stdout(&["closed-loop", "--scenario", path.to_str().unwrap()]);
    assert_eq!(text, again);
    let reseeded = ok_stdout(&["closed-loop", "--scenario", path.to_str().unwrap(), "--seed", "99"]);
    assert_ne!(text, reseeded);
}
