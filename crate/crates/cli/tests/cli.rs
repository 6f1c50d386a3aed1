use std::path::Path;
use std::process::{Command, Output};

fn basa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basa"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stderr).lines().map(String::from).collect()
}

const SMALL: [&str; 14] = [
    "run", "--users", "8", "--buffer", "4", "--dim", "10", "--beta", "2", "--seed", "3", "--max-time", "400", "--samples-per-user",
];

fn small(mode: &str) -> Vec<&str> {
    let mut a = SMALL.to_vec();
    a.extend(["60", "--mode", mode]);
    a
}

#[test]
fn missing_users_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = basa(&["run", "--mode", "basa-afl"], dir.path());
    assert!(!o.status.success());
    assert_eq!(stderr_lines(&o), ["error: --users is required for training modes"]);
}

#[test]
fn invalid_values_give_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    for (args, msg) in [
        (vec!["--users", "4", "--buffer", "0"], "buffer sizes must be between 1 and 2^32 - 1"),
        (vec!["--users", "4", "--buffer", "5"], "--buffer must not exceed --users"),
        (vec!["--users", "4", "--buffer", "2", "--beta", "-1"], "--beta must be non-negative"),
        (vec!["--users", "4", "--buffer", "2", "--modulus", "100"], "--modulus: "),
        (vec!["--users", "4", "--buffer", "2", "--staleness", "hinge"], "invalid staleness"),
    ] {
        let mut full = vec!["run", "--mode", "basa-afl"];
        full.extend(args);
        let o = basa(&full, dir.path());
        assert_eq!(o.status.code(), Some(2));
        let lines = stderr_lines(&o);
        assert_eq!(lines.len(), 1, "{lines:?}");
        assert!(lines[0].starts_with("error: ") && lines[0].contains(msg), "{lines:?}");
    }
}

#[test]
fn same_config_gives_byte_identical_artifacts() {
    for mode in ["basa-afl", "nosa-afl", "sync-fedavg"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert!(basa(&small(mode), a.path()).status.success());
        assert!(basa(&small(mode), b.path()).status.success());
        for f in ["metrics.csv", "trace.jsonl", "summary.json"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{mode} {f}");
        }
        let csv = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "simulated_time_s,round,mode,accuracy,loss,buffer_commits");
        assert!(csv.lines().count() > 2);
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "mode = basa-afl\nusers = 8\nbuffer = 4\ndim = 10\nseed = 3\nbeta = 2\nmax-time = 400\nsamples_per_user = 60\n").unwrap();
    let from_file = dir.path().join("file");
    let o = basa(&["run", "--config", conf.to_str().unwrap()], &from_file);
    assert!(o.status.success(), "{:?}", stderr_lines(&o));
    let from_flags = dir.path().join("flags");
    assert!(basa(&small("basa-afl"), &from_flags).status.success());
    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(&from_file), csv(&from_flags));

    let overridden = dir.path().join("override");
    let o = basa(&["run", "--config", conf.to_str().unwrap(), "--mode", "nosa-afl"], &overridden);
    assert!(o.status.success());
    let text = String::from_utf8(csv(&overridden)).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("nosa-afl"));
}

#[test]
fn censored_runs_exit_zero_and_say_so() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small("basa-afl");
    args.extend(["--target", "1.0", "--max-rounds", "3"]);
    let o = basa(&args, dir.path());
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["outcome"]["censored"], true);
    assert!(summary["outcome"]["time_to_target_s"].is_null());
}

#[test]
fn bench_sweeps_default_user_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = basa(&["run", "--mode", "bench-user-cost", "--buffer", "10..1000", "--dim", "100000"], dir.path());
    assert!(o.status.success());
    let mut rdr = csv::Reader::from_path(dir.path().join("user_cost.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    let ks: Vec<&str> = rows.iter().step_by(3).map(|r| r.get(0).unwrap()).collect();
    assert_eq!(ks, ["10", "32", "100", "316", "1000"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["flat_in_users"], true);
    assert_eq!(summary["users"], serde_json::json!([100, 500, 1000]));
}

#[test]
fn demo_requires_one_user_per_slot() {
    let dir = tempfile::tempdir().unwrap();
    let o = basa(&["run", "--mode", "demo-tcp", "--buffer", "3", "--users", "4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_lines(&o).len(), 1);
}

#[test]
fn demo_runs_several_users_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let o = basa(&["run", "--mode", "demo-tcp", "--buffer", "5", "--dim", "20", "--seed", "9"], dir.path());
    assert!(o.status.success(), "{:?}", stderr_lines(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("demo_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["matches"], true);
    assert_eq!(summary["tcp"][0]["contributors"], 5);
}

#[test]
fn clap_usage_errors_fit_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = basa(&["run", "--users", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_lines(&o), ["error: the following required arguments were not provided: --mode <MODE>"]);
}
