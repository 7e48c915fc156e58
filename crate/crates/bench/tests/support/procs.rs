//! Launching the benchmark binary and reading its CSV output.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde::Deserialize;

pub fn bench_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_besteffort-bench"))
}

/// A block of ports unlikely to collide with concurrent test processes.
pub fn port_base(slot: u16) -> u16 {
    20000 + (std::process::id() % 400) as u16 * 96 + slot * 24
}

fn spawn(args: &[String], base_port: u16) -> std::io::Result<Child> {
    Command::new(bench_bin())
        .args(args)
        .env("BESTEFFORT_BASE_PORT", base_port.to_string())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
}

fn finish(child: Child, what: &str) -> Result<String, String> {
    let out = child.wait_with_output().map_err(|e| format!("{what}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{what} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Runs one process per rank and waits for all of them. Rank 0 writes the
/// results into `out`.
pub fn run_ranks(workers: usize, base_port: u16, extra: &[&str], out: &Path) -> Result<(), String> {
    let children = (0..workers)
        .map(|rank| {
            let mut args: Vec<String> = [
                "run",
                "--locus",
                "processes",
                "--workers",
                &workers.to_string(),
                "--rank",
                &rank.to_string(),
                "--out",
                &out.display().to_string(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            args.extend(extra.iter().map(|s| s.to_string()));
            spawn(&args, base_port).map_err(|e| format!("spawn rank {rank}: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut first_error = None;
    for (rank, child) in children.into_iter().enumerate() {
        if let Err(e) = finish(child, &format!("rank {rank}")) {
            first_error.get_or_insert(e);
        }
    }
    first_error.map_or(Ok(()), Err)
}

/// Runs a single thread-locus invocation.
pub fn run_threads(extra: &[&str], out: &Path) -> Result<(), String> {
    let mut args = vec!["run".to_string(), "--out".to_string(), out.display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    let child = spawn(&args, port_base(0)).map_err(|e| format!("spawn: {e}"))?;
    finish(child, "benchmark").map(drop)
}

#[derive(Debug, Clone, Deserialize)]
pub struct SummaryRecord {
    pub replicate: usize,
    pub worker_id: usize,
    pub updates: u64,
    pub update_rate: f64,
    pub wire_transfers: u64,
    pub initial_conflicts: Option<u64>,
    pub final_conflicts: Option<u64>,
    pub compute_work_units: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QosRecord {
    pub worker_id: usize,
    pub endpoint: usize,
    pub window_index: usize,
    pub simstep_period: f64,
    pub delivery_clumpiness: f64,
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    reader
        .deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Lower middle element for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}
