//! Run configuration: command-line flags layered over an optional TOML file
//! layered over defaults.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use besteffort::sync::AsynchronicityMode;
use besteffort::topology::build_torus;
use besteffort::workload::WorkloadParams;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the first port of the default peer list.
pub const BASE_PORT_ENV: &str = "BESTEFFORT_BASE_PORT";
pub const DEFAULT_BASE_PORT: u16 = 47000;

#[derive(Debug, Error, PartialEq)]
#[error("invalid `{key}`: {message}")]
pub struct ConfigError {
    pub key: &'static str,
    pub message: String,
}

fn err(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    /// Distributed graph coloring.
    Coloring,
    /// Fixed compute per update with a light value exchange.
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocusKind {
    Threads,
    Processes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PullKind {
    /// Latest value wins.
    Jump,
    /// Oldest pending value, one per update.
    Step,
}

/// One layer of settings. Unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    /// TOML file with any of the settings below; flags take precedence
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub workload: Option<WorkloadKind>,

    /// Asynchronicity mode, 0 (lockstep) through 4 (no communication)
    #[arg(long)]
    pub mode: Option<u8>,

    #[arg(long)]
    pub workers: Option<usize>,

    #[arg(long, value_enum)]
    pub locus: Option<LocusKind>,

    /// This process's worker index under the process locus
    #[arg(long)]
    pub rank: Option<usize>,

    /// host:port per rank, comma separated; port p is the first of a block
    /// of workers + 1 consecutive ports
    #[arg(long, value_delimiter = ',')]
    pub peers: Option<Vec<String>>,

    /// Torus dimensions as WIDTHxHEIGHT
    #[arg(long)]
    pub grid: Option<String>,

    #[arg(long)]
    pub nodes_per_worker: Option<usize>,

    #[arg(long)]
    pub buffer_capacity: Option<usize>,

    /// Learning factor of the coloring update
    #[arg(long)]
    pub b: Option<f64>,

    #[arg(long)]
    pub num_colors: Option<usize>,

    /// Generator draws burned per worker update
    #[arg(long)]
    pub compute_work_units: Option<u64>,

    /// Collapse a node's color distribution after a conflict-free update
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub success_reset: Option<bool>,

    /// Run duration in seconds
    #[arg(long)]
    pub duration: Option<f64>,

    /// Stop a worker after this many updates
    #[arg(long)]
    pub max_updates: Option<u64>,

    /// Mode 1 chunk length in milliseconds
    #[arg(long)]
    pub chunk_ms: Option<u64>,

    /// Mode 2 barrier interval in milliseconds
    #[arg(long)]
    pub sync_interval_ms: Option<u64>,

    /// Seconds between QoS snapshot windows; enables snapshots
    #[arg(long)]
    pub snapshot_interval: Option<f64>,

    /// QoS snapshot window length in seconds
    #[arg(long)]
    pub snapshot_window: Option<f64>,

    /// Endpoints observed per worker
    #[arg(long)]
    pub qos_endpoints: Option<usize>,

    #[arg(long)]
    pub replicates: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Upper bound of a uniform random sleep added to every update of the
    /// jittered worker, in milliseconds
    #[arg(long)]
    pub jitter_ms: Option<f64>,

    #[arg(long)]
    pub jitter_worker: Option<usize>,

    /// Probability of discarding an outgoing inter-process datagram
    #[arg(long)]
    pub drop_probability: Option<f64>,

    #[arg(long, value_enum)]
    pub pull: Option<PullKind>,

    /// Output directory for summary.csv, qos.csv and meta.json
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub run_id: Option<String>,

    /// Seconds to wait on any inter-process barrier
    #[arg(long)]
    pub barrier_timeout: Option<f64>,
}

macro_rules! overlay {
    ($upper:ident, $lower:ident; $($field:ident),* $(,)?) => {
        ConfigLayer { $($field: $upper.$field.or($lower.$field)),* }
    };
}

impl ConfigLayer {
    /// `self` wins over `lower` field by field.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        let upper = self;
        overlay!(upper, lower;
            config, workload, mode, workers, locus, rank, peers, grid,
            nodes_per_worker, buffer_capacity, b, num_colors, compute_work_units,
            success_reset, duration, max_updates, chunk_ms, sync_interval_ms,
            snapshot_interval, snapshot_window, qos_endpoints, replicates, seed,
            jitter_ms, jitter_worker, drop_probability, pull, out, run_id,
            barrier_timeout,
        )
    }

    pub fn from_toml(text: &str) -> Result<ConfigLayer, ConfigError> {
        toml::from_str(text).map_err(|e| err("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<ConfigLayer, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads the file named by `--config`, if any, beneath these flags.
    pub fn with_file(self) -> Result<ConfigLayer, ConfigError> {
        match &self.config {
            Some(path) => {
                let file = Self::from_file(path)?;
                Ok(self.over(file))
            }
            None => Ok(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LocusConfig {
    Threads,
    Processes { rank: usize, peers: Vec<SocketAddr> },
}

impl LocusConfig {
    pub fn kind(&self) -> LocusKind {
        match self {
            LocusConfig::Threads => LocusKind::Threads,
            LocusConfig::Processes { .. } => LocusKind::Processes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotConfig {
    #[serde(serialize_with = "as_secs")]
    pub interval: Duration,
    #[serde(serialize_with = "as_secs")]
    pub window: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jitter {
    #[serde(serialize_with = "as_secs")]
    pub max: Duration,
    pub worker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub workload: WorkloadKind,
    #[serde(serialize_with = "serialize_mode")]
    pub mode: AsynchronicityMode,
    pub workers: usize,
    pub locus: LocusConfig,
    pub grid: (usize, usize),
    pub nodes_per_worker: usize,
    pub buffer_capacity: usize,
    #[serde(serialize_with = "serialize_params")]
    pub params: WorkloadParams,
    #[serde(serialize_with = "as_secs")]
    pub duration: Duration,
    pub max_updates: Option<u64>,
    pub snapshots: Option<SnapshotConfig>,
    pub qos_endpoints: usize,
    pub replicates: usize,
    pub seed: u64,
    pub jitter: Option<Jitter>,
    pub drop_probability: f64,
    pub pull: PullKind,
    pub out: Option<PathBuf>,
    pub run_id: String,
    #[serde(serialize_with = "as_secs")]
    pub barrier_timeout: Duration,
}

fn serialize_mode<S: serde::Serializer>(mode: &AsynchronicityMode, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(mode.index())
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

fn serialize_params<S: serde::Serializer>(p: &WorkloadParams, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = s.serialize_struct("WorkloadParams", 4)?;
    st.serialize_field("num_colors", &p.num_colors)?;
    st.serialize_field("b", &p.b)?;
    st.serialize_field("compute_work_units", &p.compute_work_units)?;
    st.serialize_field("success_reset", &p.success_reset)?;
    st.end()
}

fn seconds(key: &'static str, value: f64) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| err(key, format!("expected a positive number of seconds, got {value}")))
}

fn parse_grid(text: &str) -> Result<(usize, usize), ConfigError> {
    let (w, h) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| err("grid", format!("expected WIDTHxHEIGHT, got {text:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| err("grid", format!("bad dimension {s:?}")))
    };
    Ok((parse(w)?, parse(h)?))
}

/// Widest rows whose height is the largest divisor of `total` not above its
/// square root.
fn default_grid(total: usize) -> (usize, usize) {
    let mut height = 1;
    let mut d = 1;
    while d * d <= total {
        if total.is_multiple_of(d) {
            height = d;
        }
        d += 1;
    }
    (total / height, height)
}

pub fn base_port_from_env() -> Result<u16, ConfigError> {
    match std::env::var(BASE_PORT_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| err("base_port", format!("{BASE_PORT_ENV}={v:?} is not a port"))),
        Err(_) => Ok(DEFAULT_BASE_PORT),
    }
}

/// Loopback peer list with one port block per rank.
pub fn default_peers(workers: usize, base_port: u16) -> Vec<SocketAddr> {
    let stride = workers as u16 + 1;
    (0..workers as u16)
        .map(|r| SocketAddr::from(([127, 0, 0, 1], base_port + r * stride)))
        .collect()
}

impl RunConfig {
    /// Validates a fully layered configuration and fills defaults.
    pub fn resolve(layer: ConfigLayer, base_port: u16) -> Result<RunConfig, ConfigError> {
        let workload = layer.workload.unwrap_or(WorkloadKind::Coloring);

        let workers = layer.workers.unwrap_or(1);
        if workers == 0 {
            return Err(err("workers", "must be at least 1"));
        }

        let chunk_default = match workload {
            WorkloadKind::Coloring => 10,
            WorkloadKind::Compute => 100,
        };
        let chunk = Duration::from_millis(layer.chunk_ms.unwrap_or(chunk_default));
        let interval = Duration::from_millis(layer.sync_interval_ms.unwrap_or(1000));
        if chunk.is_zero() {
            return Err(err("chunk_ms", "must be positive"));
        }
        if interval.is_zero() {
            return Err(err("sync_interval_ms", "must be positive"));
        }
        let mode_index = layer.mode.unwrap_or(3);
        let mode = AsynchronicityMode::from_index(mode_index, chunk, interval)
            .ok_or_else(|| err("mode", format!("expected 0 through 4, got {mode_index}")))?;

        let (grid, nodes_per_worker) = match (layer.grid.as_deref(), layer.nodes_per_worker) {
            (Some(g), npw) => {
                let grid = parse_grid(g)?;
                let total = grid.0 * grid.1;
                if total % workers != 0 {
                    return Err(err("grid", format!("{total} nodes do not split evenly over {workers} workers")));
                }
                if let Some(npw) = npw {
                    if npw * workers != total {
                        return Err(err(
                            "grid",
                            format!("{total} nodes but {workers} workers x {npw} nodes per worker"),
                        ));
                    }
                }
                (grid, total / workers)
            }
            (None, npw) => {
                let npw = npw.unwrap_or(2048);
                if npw == 0 {
                    return Err(err("nodes_per_worker", "must be at least 1"));
                }
                (default_grid(npw * workers), npw)
            }
        };

        let params = WorkloadParams {
            num_colors: layer.num_colors.unwrap_or(3),
            b: layer.b.unwrap_or(0.1),
            compute_work_units: layer.compute_work_units.unwrap_or(match workload {
                WorkloadKind::Coloring => 0,
                WorkloadKind::Compute => 4096,
            }),
            success_reset: layer.success_reset.unwrap_or(false),
        };
        if params.num_colors < 2 || params.num_colors as u64 >= u32::MAX as u64 {
            return Err(err("num_colors", "must be at least 2"));
        }
        if !(params.b > 0.0 && params.b < 1.0) {
            return Err(err("b", "must lie strictly between 0 and 1"));
        }
        if workload == WorkloadKind::Coloring {
            let topology = build_torus(grid.0, grid.1).map_err(|e| err("grid", e.to_string()))?;
            if topology.has_self_edges() {
                return Err(err("grid", "coloring needs a torus at least 2 wide and 2 high"));
            }
        }

        let snapshots = match layer.snapshot_interval {
            Some(i) => {
                let interval = seconds("snapshot_interval", i)?;
                let window = seconds("snapshot_window", layer.snapshot_window.unwrap_or(1.0))?;
                if window >= interval {
                    return Err(err("snapshot_window", "must be shorter than the snapshot interval"));
                }
                Some(SnapshotConfig { interval, window })
            }
            None if layer.snapshot_window.is_some() => {
                return Err(err("snapshot_window", "set without snapshot_interval"));
            }
            None => None,
        };

        let buffer_capacity = layer
            .buffer_capacity
            .unwrap_or(if snapshots.is_some() { 64 } else { 2 });
        if buffer_capacity == 0 {
            return Err(err("buffer_capacity", "must be at least 1"));
        }

        let jitter = match layer.jitter_ms {
            Some(ms) if ms < 0.0 || !ms.is_finite() => {
                return Err(err("jitter_ms", "must be non-negative"));
            }
            Some(ms) => {
                let worker = layer.jitter_worker.unwrap_or(0);
                if worker >= workers {
                    return Err(err("jitter_worker", format!("no worker {worker} among {workers}")));
                }
                Some(Jitter {
                    max: Duration::from_secs_f64(ms / 1000.0),
                    worker,
                })
            }
            None if layer.jitter_worker.is_some() => {
                return Err(err("jitter_worker", "set without jitter_ms"));
            }
            None => None,
        };

        let drop_probability = layer.drop_probability.unwrap_or(0.0);
        if !(0.0..1.0).contains(&drop_probability) {
            return Err(err("drop_probability", "must lie in [0, 1)"));
        }

        let locus = match layer.locus.unwrap_or(LocusKind::Threads) {
            LocusKind::Threads => {
                if layer.rank.is_some() || layer.peers.is_some() {
                    return Err(err("locus", "rank and peers need the process locus"));
                }
                LocusConfig::Threads
            }
            LocusKind::Processes => {
                let rank = layer.rank.ok_or_else(|| err("rank", "required for the process locus"))?;
                if rank >= workers {
                    return Err(err("rank", format!("no rank {rank} among {workers} workers")));
                }
                let peers = match &layer.peers {
                    Some(list) => list
                        .iter()
                        .map(|p| {
                            p.to_socket_addrs()
                                .ok()
                                .and_then(|mut a| a.next())
                                .ok_or_else(|| err("peers", format!("cannot resolve {p:?}")))
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    None => default_peers(workers, base_port),
                };
                if peers.len() != workers {
                    return Err(err("peers", format!("{} addresses for {workers} workers", peers.len())));
                }
                LocusConfig::Processes { rank, peers }
            }
        };

        let replicates = layer.replicates.unwrap_or(1);
        if replicates == 0 {
            return Err(err("replicates", "must be at least 1"));
        }
        let seed = layer.seed.unwrap_or(1);

        Ok(RunConfig {
            workload,
            mode,
            workers,
            locus,
            grid,
            nodes_per_worker,
            buffer_capacity,
            params,
            duration: seconds("duration", layer.duration.unwrap_or(5.0))?,
            max_updates: layer.max_updates,
            snapshots,
            qos_endpoints: layer.qos_endpoints.unwrap_or(4),
            replicates,
            seed,
            jitter,
            drop_probability,
            pull: layer.pull.unwrap_or(PullKind::Jump),
            out: layer.out,
            run_id: layer.run_id.unwrap_or_else(|| format!("run-{seed}")),
            barrier_timeout: seconds("barrier_timeout", layer.barrier_timeout.unwrap_or(120.0))?,
        })
    }
}
