use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use halobit::experiment::METRICS_HEADER;

fn halobit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halobit")).args(args).output().unwrap()
}

fn run_ok(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["run", "--synthetic", "sbm:k=4,n=25", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = halobit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read_to_string(out.join("metrics.csv")).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line}"))
}

#[test]
fn run_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = run_ok(&dir.path().join("r"), &[]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 101);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 12);
        assert_eq!(cols[0], (i + 1).to_string());
        assert_eq!(cols[1], "sync");
        assert_eq!(cols[11], "0");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["final_epoch"]["epoch"], 100);
    assert_eq!(summary["graph"]["num_nodes"], 100);
}

#[test]
fn async_staleness_alternates_modes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = run_ok(&dir.path().join("r"), &["--mode", "async", "--staleness", "2", "--epochs", "6"]);
    let modes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(modes, ["async", "sync", "async", "sync", "async", "sync"]);
}

#[test]
fn wall_clock_flag_fills_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = run_ok(&dir.path().join("r"), &["--epochs", "3", "--wall-clock"]);
    assert!(csv.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() > 0.0));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = halobit(&["run", "--synthetic", "sbm:k=4,n=25", "--bits", "9", "--parts", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = error_json(&o);
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 2);
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("--bits") && msg.contains("--parts"), "{msg}");
    assert!(!out.exists());

    let o = halobit(&["run", "--dataset", "/no/such/dir", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = halobit(&["run", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = halobit(&["run", "--synthetic", "sbm:k=2,n=10", "--lr", "1e300", "--epochs", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = error_json(&o);
    assert_eq!(err["exit_code"], 3);
    assert_ne!(err["error"], "config");
}

#[test]
fn compare_with_self_has_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run_ok(&a, &["--epochs", "8"]);
    let a = a.to_str().unwrap();
    let o = halobit(&["compare", "--csv", a, a]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1..], rows[1][1..]);
    assert_eq!(rows[1][6], "+0.0000");
    assert_eq!(rows[1][7], "1.0000");

    let o = halobit(&["compare", a, a]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("run "));
}

#[test]
fn compare_reports_byte_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (one, full) = (dir.path().join("one"), dir.path().join("full"));
    run_ok(&one, &["--epochs", "4"]);
    run_ok(&full, &["--epochs", "4", "--bits", "32"]);
    let o = halobit(&["compare", "--csv", one.to_str().unwrap(), full.join("summary.json").to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(last[7], "32.0000");
    assert_eq!(last[5], "0");
}

#[test]
fn compare_rejects_unknown_schema() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run_ok(&a, &["--epochs", "2"]);
    let path = a.join("summary.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
    fs::write(&path, text).unwrap();
    let o = halobit(&["compare", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("schema_version 99"));
}

#[test]
fn generated_graph_trains_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("g");
    let o = halobit(&["gen-sbm", "sbm:k=3,n=20", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["num_nodes"], 60);
    assert_eq!(meta["num_classes"], 3);

    let out = dir.path().join("r");
    let o = halobit(&["run", "--dataset", data.to_str().unwrap(), "--parts", "3", "--partition", "bfs", "--epochs", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 6);
}
