mod support;

use std::fs;
use std::process::Command;

use support::procs::{self, QosRecord, SummaryRecord};

fn bench(args: &[&str]) -> std::process::Output {
    Command::new(procs::bench_bin())
        .args(args)
        .env("BESTEFFORT_BASE_PORT", procs::port_base(0).to_string())
        .output()
        .expect("benchmark binary runs")
}

#[test]
fn check_layers_flags_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "mode = 1\nworkers = 2\nbuffer_capacity = 8\nworkload = \"compute\"\n").unwrap();
    let out = bench(&["check", "--config", file.to_str().unwrap(), "--buffer-capacity", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["mode"], 1);
    assert_eq!(json["workers"], 2);
    assert_eq!(json["buffer_capacity"], 16);
    assert_eq!(json["workload"], "compute");
    assert_eq!(json["params"]["compute_work_units"], 4096);
}

#[test]
fn invalid_settings_name_the_key() {
    let out = bench(&["check", "--mode", "9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`mode`"));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "no_such_setting = 1\n").unwrap();
    let out = bench(&["check", "--config", file.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_setting"));
}

#[test]
fn results_append_with_a_single_header() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--workers", "2", "--grid", "8x4", "--replicates", "5", "--duration", "0.05", "--mode", "3",
    ];
    for _ in 0..2 {
        procs::run_threads(&args, dir.path()).unwrap();
    }
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("run_id,")).count(), 1);
    let rows: Vec<SummaryRecord> = procs::read_csv(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 20);
    for (i, r) in rows.iter().take(10).enumerate() {
        assert_eq!((r.replicate, r.worker_id), (i / 2, i % 2));
        assert!(r.updates > 0);
        assert!(r.final_conflicts.is_some() && r.initial_conflicts.is_some());
    }
    assert!(!dir.path().join("qos.csv").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["replicates_recorded"], 5);
    assert!(meta["qos_file"].is_null());
}

#[test]
fn snapshots_write_qos_rows() {
    let dir = tempfile::tempdir().unwrap();
    procs::run_threads(
        &[
            "--workers", "2", "--grid", "8x4", "--duration", "1.2", "--snapshot-interval", "0.3",
            "--snapshot-window", "0.1", "--qos-endpoints", "2",
        ],
        dir.path(),
    )
    .unwrap();
    let rows: Vec<QosRecord> = procs::read_csv(&dir.path().join("qos.csv")).unwrap();
    // Windows at 0.3, 0.6 and 0.9 s; one at 1.2 s would overrun.
    assert_eq!(rows.len(), 3 * 2 * 2);
    assert!(rows.iter().all(|r| r.simstep_period > 0.0 && r.endpoint < 16 * 4));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.delivery_clumpiness)));
    let windows: Vec<usize> = rows.iter().map(|r| r.window_index).collect();
    assert!((0..3).all(|w| windows.contains(&w)));
}

#[test]
fn stdout_summary_without_out_dir() {
    let out = bench(&["run", "--grid", "4x4", "--duration", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("run_id,replicate,seed,"));
    assert_eq!(lines.count(), 1);
}

#[test]
fn process_ranks_share_one_summary() {
    let dir = tempfile::tempdir().unwrap();
    procs::run_ranks(
        2,
        procs::port_base(3),
        &["--grid", "8x2", "--mode", "0", "--duration", "0.3", "--compute-work-units", "16"],
        dir.path(),
    )
    .unwrap();
    let rows: Vec<SummaryRecord> = procs::read_csv(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].updates, rows[1].updates);
    assert!(rows.iter().all(|r| r.wire_transfers == r.updates && r.compute_work_units == 16));
}
