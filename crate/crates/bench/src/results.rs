//! CSV and JSON output.
//!
//! `summary.csv` has one row per (replicate, worker). `qos.csv` has one row
//! per (replicate, worker, endpoint, window) and only exists when snapshots
//! were configured. Both are appended to when they already exist, and the
//! header is written only into an empty file.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{LocusKind, RunConfig, WorkloadKind};
use crate::harness::{Metrics, ReplicateRecord};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const QOS_FILE: &str = "qos.csv";
pub const META_FILE: &str = "meta.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub replicate: usize,
    pub seed: u64,
    pub workload: WorkloadKind,
    pub mode: u8,
    pub workers: usize,
    pub locus: LocusKind,
    pub worker_id: usize,
    pub updates: u64,
    pub wall_time_s: f64,
    pub update_rate: f64,
    pub initial_conflicts: Option<u64>,
    pub final_conflicts: Option<u64>,
    pub wire_transfers: u64,
    pub compute_work_units: u64,
    pub nodes_per_worker: usize,
    /// Empty when snapshots were not configured.
    pub qos_file: String,
    pub version: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QosCsvRow {
    pub run_id: String,
    pub replicate: usize,
    pub mode: u8,
    pub worker_id: usize,
    pub endpoint: usize,
    pub window_index: usize,
    pub simstep_period_inlet: f64,
    pub simstep_period_outlet: f64,
    pub simstep_period: f64,
    pub simstep_latency_inlet: f64,
    pub simstep_latency_outlet: f64,
    pub simstep_latency: f64,
    pub walltime_latency_inlet: f64,
    pub walltime_latency_outlet: f64,
    pub walltime_latency: f64,
    pub delivery_failure_rate_inlet: Option<f64>,
    pub delivery_failure_rate_outlet: Option<f64>,
    pub delivery_failure_rate: Option<f64>,
    pub delivery_clumpiness_inlet: f64,
    pub delivery_clumpiness_outlet: f64,
    pub delivery_clumpiness: f64,
}

pub fn summary_rows(config: &RunConfig, records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let qos_file = if config.snapshots.is_some() { QOS_FILE } else { "" };
    records
        .iter()
        .flat_map(|rec| {
            rec.workers.iter().map(move |w| SummaryRow {
                run_id: config.run_id.clone(),
                replicate: rec.replicate,
                seed: rec.seed,
                workload: config.workload,
                mode: config.mode.index(),
                workers: config.workers,
                locus: config.locus.kind(),
                worker_id: w.worker,
                updates: w.updates,
                wall_time_s: w.wall_time_s,
                update_rate: w.update_rate(),
                initial_conflicts: rec.initial_conflicts,
                final_conflicts: rec.final_conflicts,
                wire_transfers: w.wire_transfers,
                compute_work_units: config.params.compute_work_units,
                nodes_per_worker: config.nodes_per_worker,
                qos_file: qos_file.to_string(),
                version: VERSION,
            })
        })
        .collect()
}

pub fn qos_rows(config: &RunConfig, records: &[ReplicateRecord]) -> Vec<QosCsvRow> {
    let mut rows = Vec::new();
    for rec in records {
        for q in &rec.qos {
            let (i, o, m): (&Metrics, &Metrics, &Metrics) = (&q.inlet, &q.outlet, &q.mean);
            rows.push(QosCsvRow {
                run_id: config.run_id.clone(),
                replicate: rec.replicate,
                mode: config.mode.index(),
                worker_id: q.worker_id,
                endpoint: q.endpoint,
                window_index: q.window_index,
                simstep_period_inlet: i.simstep_period,
                simstep_period_outlet: o.simstep_period,
                simstep_period: m.simstep_period,
                simstep_latency_inlet: i.simstep_latency,
                simstep_latency_outlet: o.simstep_latency,
                simstep_latency: m.simstep_latency,
                walltime_latency_inlet: i.walltime_latency,
                walltime_latency_outlet: o.walltime_latency,
                walltime_latency: m.walltime_latency,
                delivery_failure_rate_inlet: i.delivery_failure_rate,
                delivery_failure_rate_outlet: o.delivery_failure_rate,
                delivery_failure_rate: m.delivery_failure_rate,
                delivery_clumpiness_inlet: i.delivery_clumpiness,
                delivery_clumpiness_outlet: o.delivery_clumpiness,
                delivery_clumpiness: m.delivery_clumpiness,
            });
        }
    }
    rows
}

/// Appends `rows` to a CSV file, writing the header only into an empty or
/// new file.
pub fn append_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), ResultsError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let empty = file.metadata()?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'static str,
    config: &'a RunConfig,
    replicates_recorded: usize,
    qos_file: Option<&'static str>,
    /// How the metric columns are defined.
    conventions: [&'static str; 6],
}

const CONVENTIONS: [&str; 6] = [
    "simstep_period = elapsed wall seconds / updates elapsed",
    "simstep_latency = updates elapsed / max(touches elapsed, 1)",
    "walltime_latency = simstep_latency * simstep_period",
    "delivery_failure_rate = (attempted sends - successful sends) / attempted sends; empty without attempts",
    "delivery_clumpiness = (min(messages, pull attempts) - laden pulls) / min(messages, pull attempts); 0 without opportunities",
    "medians of even-length lists take the lower middle value",
];

/// Writes every output file into `dir` and returns their paths.
pub fn emit_results(
    dir: &Path,
    config: &RunConfig,
    records: &[ReplicateRecord],
) -> Result<Vec<PathBuf>, ResultsError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let summary = dir.join(SUMMARY_FILE);
    append_csv(&summary, &summary_rows(config, records))?;
    written.push(summary);

    if config.snapshots.is_some() {
        let qos = dir.join(QOS_FILE);
        append_csv(&qos, &qos_rows(config, records))?;
        written.push(qos);
    }

    let meta = dir.join(META_FILE);
    let mut file = File::create(&meta)?;
    serde_json::to_writer_pretty(
        &mut file,
        &Meta {
            version: VERSION,
            config,
            replicates_recorded: records.len(),
            qos_file: config.snapshots.map(|_| QOS_FILE),
            conventions: CONVENTIONS,
        },
    )?;
    writeln!(file)?;
    written.push(meta);
    Ok(written)
}

/// Summary rows as CSV text, for printing.
pub fn summary_csv(config: &RunConfig, records: &[ReplicateRecord]) -> Result<String, ResultsError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in summary_rows(config, records) {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
