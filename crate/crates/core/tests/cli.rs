use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdlab::trace::load_trace;

fn fdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdlab")).args(args).output().expect("spawn fdlab")
}

fn trace_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    fdlab(&args)
}

#[test]
fn gen_writes_one_file_per_link_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--links", "9", "--delta-ms", "100", "--heartbeats", "5000", "--seed", "7"];
    assert!(gen(a.path(), &flags).status.success());
    assert!(gen(b.path(), &flags).status.success());

    let files = trace_files(a.path());
    assert_eq!(files.len(), 9);
    assert!(a.path().join("manifest.json").exists());
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        let t = load_trace(f).unwrap();
        assert!(t.validate().is_empty());
    }
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn gen_rejects_total_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(dir.path(), &["--loss-prob", "1.0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss_prob"));
    assert!(out.stdout.is_empty());
}

#[test]
fn run_chen_emits_json_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "3", "--heartbeats", "1500"]).status.success());
    let files = trace_files(dir.path());
    let mut args = vec!["run", "--fd", "chen", "--n", "1000", "--alpha-ms", "680"];
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let links = v["links"].as_array().unwrap();
    assert_eq!(links.len(), 3);
    for key in ["link_id", "p_a", "t_d_ms", "t_c_ms", "predictions_total", "predictions_safe", "suspicion_time_ms"] {
        assert!(links[0].get(key).is_some(), "missing {key}");
    }
    assert!(v.get("config").is_some());
    assert!(v.get("seed").is_some());
    assert_eq!(v["config"]["kind"], "chen");
    assert_eq!(v["config"]["n"], 1000);
}

#[test]
fn run_mlfd_csv_and_prediction_log() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "2", "--heartbeats", "200"]).status.success());
    let files = trace_files(dir.path());
    let mut args = vec![
        "run", "--fd", "mlfd", "--eta", "40", "--batch", "16", "--epochs", "2", "--epsilon", "10", "--hidden", "4",
        "--lookback", "5", "--format", "csv", "--log", "predictions.csv", "--out",
    ];
    args.push(out_dir.path().to_str().unwrap());
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "link_id,predictions_total,predictions_safe,p_a,t_d_ms,t_c_ms,suspicion_time_ms");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("average,"));
    assert_eq!(fs::read_to_string(out_dir.path().join("report.csv")).unwrap(), stdout);

    let log = fs::read_to_string(out_dir.path().join("predictions.csv")).unwrap();
    let mut rows = log.lines();
    assert_eq!(rows.next(), Some("link_id,seq,arrival_ms,ea_ms,margin_ms,tau_ms,safe"));
    // P_A recomputed from the log matches the report (safe column is exact).
    let mut total = 0;
    let mut safe = 0;
    for r in rows.filter(|r| r.starts_with("1,")) {
        total += 1;
        safe += r.ends_with(",1") as usize;
    }
    let link1: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(link1[1].parse::<usize>().unwrap(), total);
    assert_eq!(link1[2].parse::<usize>().unwrap(), safe);
}

#[test]
fn detector_flag_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "1", "--heartbeats", "50"]).status.success());
    let f = trace_files(dir.path()).pop().unwrap();
    let out = fdlab(&["run", "--fd", "mlfd", "--alpha-ms", "100", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = fdlab(&["run", "--fd", "chen", "--eta", "100", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = fdlab(&["run", "--fd", "bogus", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_trace_is_a_runtime_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.csv");
    fs::write(&f, "# fdlab-trace v1\n# link_id=1 delta_ms=100 crashed=0\nseq,arrival_ms\n3,300.000\n2,400.000\n").unwrap();
    let out = fdlab(&["run", "--fd", "chen", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn align_on_clean_traces_selects_zero() {
    let dir = tempfile::tempdir().unwrap();
    let flags = [
        "--links", "3", "--heartbeats", "300", "--jitter-ms", "0", "--base-delay-ms", "0", "--burst-rate", "0",
        "--loss-prob", "0",
    ];
    assert!(gen(dir.path(), &flags).status.success());
    let files = trace_files(dir.path());
    let mut args = vec!["align", "--n", "100", "--target-pa", "1.0", "--alpha-grid", "0:50:10"];
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["alpha_ms"], 0.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_ms=0.000"));
}

#[test]
fn align_curve_csv_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "3", "--heartbeats", "1000"]).status.success());
    let files = trace_files(dir.path());
    let mut args = vec!["align", "--n", "100", "--target-pa", "0.99", "--alpha-grid", "0:300:20", "--format", "csv"];
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha_ms,p_a"));
    let pa: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(pa.len(), 16);
    assert!(pa.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn compare_csv_has_both_detectors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "2", "--heartbeats", "250", "--seed", "3"]).status.success());
    let files = trace_files(dir.path());
    let mut args = vec![
        "compare", "--n", "1000", "--eta", "40", "--batch", "16", "--epochs", "2", "--hidden", "4", "--lookback", "5",
        "--align-first", "--target-pa", "auto", "--alpha-grid", "0:1500:10", "--format", "csv",
    ];
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("link_id,predictions_total,chen_p_a,mlfd_p_a,chen_t_d_ms,mlfd_t_d_ms,chen_t_c_ms,mlfd_t_c_ms")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][0], "average");
    // Aligned: Chen reaches at least the LSTM detector's mean P_A.
    let chen_pa: f64 = rows[2][2].parse().unwrap();
    let mlfd_pa: f64 = rows[2][3].parse().unwrap();
    assert!(chen_pa >= mlfd_pa - 5e-7);
}

#[test]
fn grid_emits_sorted_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--links", "1", "--heartbeats", "120"]).status.success());
    let files = trace_files(dir.path());
    let mut args = vec![
        "grid", "--eta-list", "20,40", "--batch-list", "8,16", "--epoch-list", "1", "--hidden", "3", "--lookback",
        "4", "--format", "csv",
    ];
    args.extend(files.iter().map(|p| p.to_str().unwrap()));
    let out = fdlab(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[0][3] > w[1][3] || (w[0][3] == w[1][3] && w[0][5] <= w[1][5])));

    let out = fdlab(&["grid", "--eta", "100", files[0].to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
