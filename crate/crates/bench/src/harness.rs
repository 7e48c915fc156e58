//! Launches workers for one benchmark invocation and collects their
//! records.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Barrier, OnceLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use besteffort::channel::{ChannelError, DuctRx, DuctTx, Inlet, Outlet};
use besteffort::duct::{AnyRx, AnyTx, DuctKind, LinkConfig};
use besteffort::qos::{snapshot_schedule, take_snapshots, EndpointProbe, QosReport, SnapshotWindow};
use besteffort::sync::{
    run_worker, AbandonOnDrop, NetBarrier, NetBarrierConfig, RunLimits, SyncBarrier, SyncError,
    ThreadBarrier,
};
use besteffort::topology::{
    build_torus, instantiate_channels, partition_block, Direction, DuctConfig, NetAddressing,
    PartitionAssignment, TopologyError, TorusTopology, WorkerEndpoints,
};
use besteffort::workload::{
    count_conflicts, init_node, node_rng, ColoringNodeState, ComputeBurner, NO_COLOR,
};
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{LocusConfig, PullKind, RunConfig, WorkloadKind};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("launch failed: {0}")]
    Launch(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("malformed worker report: {0}")]
    Report(#[from] serde_json::Error),
}

/// Per-window metrics for one observed endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub simstep_period: f64,
    pub simstep_latency: f64,
    pub walltime_latency: f64,
    pub delivery_failure_rate: Option<f64>,
    pub delivery_clumpiness: f64,
}

impl From<QosReport> for Metrics {
    fn from(r: QosReport) -> Self {
        Metrics {
            simstep_period: r.simstep_period,
            simstep_latency: r.simstep_latency,
            walltime_latency: r.walltime_latency,
            delivery_failure_rate: r.delivery_failure_rate,
            delivery_clumpiness: r.delivery_clumpiness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosRow {
    pub worker_id: usize,
    /// `slot * 4 + direction` within the worker.
    pub endpoint: usize,
    pub window_index: usize,
    pub inlet: Metrics,
    pub outlet: Metrics,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub worker: usize,
    pub updates: u64,
    pub wall_time_s: f64,
    pub barriers: u64,
    /// Datagrams handed to the socket by this worker.
    pub wire_transfers: u64,
}

impl WorkerSummary {
    pub fn update_rate(&self) -> f64 {
        if self.wall_time_s > 0.0 {
            self.updates as f64 / self.wall_time_s
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    /// Ordered by worker id.
    pub workers: Vec<WorkerSummary>,
    /// Coloring only.
    pub initial_conflicts: Option<u64>,
    pub final_conflicts: Option<u64>,
    pub qos: Vec<QosRow>,
}

impl ReplicateRecord {
    pub fn total_updates(&self) -> u64 {
        self.workers.iter().map(|w| w.updates).sum()
    }
}

/// What a worker hands back at the end of a replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorkerOutcome {
    summary: WorkerSummary,
    nodes: Vec<usize>,
    values: Vec<u32>,
    qos: Vec<QosRow>,
}

/// Seed of replicate `r`, derived from the master seed.
pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    node_rng(master, replicate).next_u64()
}

/// Runs every replicate. Under the process locus only rank 0 returns
/// records; other ranks return an empty list.
pub fn run_benchmark(config: &RunConfig) -> Result<Vec<ReplicateRecord>, BenchError> {
    let topology = build_torus(config.grid.0, config.grid.1)?;
    match &config.locus {
        LocusConfig::Threads => (0..config.replicates)
            .map(|r| run_threads(config, &topology, r, replicate_seed(config.seed, r)))
            .collect(),
        LocusConfig::Processes { rank, peers } => {
            let n = peers.len();
            let control = peers
                .iter()
                .map(|a| {
                    let mut a = *a;
                    a.set_port(a.port() + n as u16);
                    a
                })
                .collect();
            let mut barrier_config = NetBarrierConfig::new(control, *rank);
            barrier_config.timeout = config.barrier_timeout;
            let barrier = NetBarrier::bind(barrier_config)?;
            let mut records = Vec::new();
            for r in 0..config.replicates {
                let seed = replicate_seed(config.seed, r);
                if let Some(record) = run_process(config, &topology, r, seed, *rank, peers, &barrier)? {
                    records.push(record);
                }
            }
            barrier.finish()?;
            Ok(records)
        }
    }
}

fn initial_values(config: &RunConfig, topology: &TorusTopology, seed: u64) -> Vec<u32> {
    (0..topology.node_count())
        .map(|node| match config.workload {
            WorkloadKind::Coloring => init_node(config.params.num_colors, node_rng(seed, node)).current_color,
            WorkloadKind::Compute => node as u32,
        })
        .collect()
}

fn assemble(
    config: &RunConfig,
    topology: &TorusTopology,
    replicate: usize,
    seed: u64,
    outcomes: Vec<WorkerOutcome>,
) -> ReplicateRecord {
    let mut values = vec![NO_COLOR; topology.node_count()];
    let mut workers = Vec::with_capacity(outcomes.len());
    let mut qos = Vec::new();
    for o in outcomes {
        for (&node, &v) in o.nodes.iter().zip(&o.values) {
            values[node] = v;
        }
        workers.push(o.summary);
        qos.extend(o.qos);
    }
    workers.sort_by_key(|w| w.worker);
    let coloring = config.workload == WorkloadKind::Coloring;
    ReplicateRecord {
        replicate,
        seed,
        workers,
        initial_conflicts: coloring.then(|| count_conflicts(topology, &initial_values(config, topology, seed))),
        final_conflicts: coloring.then(|| count_conflicts(topology, &values)),
        qos,
    }
}

fn run_threads(
    config: &RunConfig,
    topology: &TorusTopology,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateRecord, BenchError> {
    let n = config.workers;
    let assignment = partition_block(topology, n);
    let registry = Arc::new(instantiate_channels::<u32>(
        topology,
        &assignment,
        DuctConfig {
            buffer_capacity: config.buffer_capacity,
        },
    ));
    let barrier = ThreadBarrier::new(n);
    let start = Arc::new(Barrier::new(n + 1));
    let epoch: Arc<OnceLock<Instant>> = Arc::new(OnceLock::new());
    let abort = Arc::new(AtomicBool::new(false));
    let (probe_tx, probe_rx) = mpsc::channel::<Result<Vec<(usize, usize, EndpointProbe)>, BenchError>>();

    let handles: Vec<_> = (0..n)
        .map(|w| {
            let registry = Arc::clone(&registry);
            let barrier = barrier.clone();
            let (start, epoch, abort) = (Arc::clone(&start), Arc::clone(&epoch), Arc::clone(&abort));
            let probe_tx = probe_tx.clone();
            let config = config.clone();
            thread::Builder::new()
                .name(format!("worker-{w}"))
                .spawn(move || -> Result<WorkerOutcome, BenchError> {
                    let endpoints = match registry.worker_endpoints(w, NO_COLOR, None) {
                        Ok(e) => e,
                        Err(e) => {
                            let _ = probe_tx.send(Err(BenchError::Launch(format!("worker {w}: {e}"))));
                            start.wait();
                            return Err(e.into());
                        }
                    };
                    let _ = probe_tx.send(Ok(select_probes(&config, &endpoints)));
                    start.wait();
                    if abort.load(Ordering::Relaxed) {
                        return Err(BenchError::Launch("aborted before start".into()));
                    }
                    let epoch = *epoch.get().expect("epoch set before start");
                    let guard = AbandonOnDrop::new(&barrier);
                    let outcome = drive_worker(&config, seed, registry.assignment(), endpoints, &barrier, epoch)?;
                    guard.disarm();
                    Ok(outcome)
                })
                .map_err(|e| BenchError::Launch(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    drop(probe_tx);

    let mut probes = Vec::new();
    let mut launch_error = None;
    for _ in 0..n {
        match probe_rx.recv() {
            Ok(Ok(p)) => probes.extend(p),
            Ok(Err(e)) => launch_error = launch_error.or(Some(e)),
            Err(_) => {
                launch_error = launch_error.or(Some(BenchError::Launch("worker exited during setup".into())))
            }
        }
    }
    if launch_error.is_some() {
        abort.store(true, Ordering::Relaxed);
    }
    let run_start = Instant::now();
    epoch.set(run_start).expect("epoch set once");
    start.wait();

    let stop = Arc::new(AtomicBool::new(false));
    let observer = spawn_observer(config, probes, run_start, Arc::clone(&stop));

    let mut outcomes = Vec::with_capacity(n);
    let mut worker_error = None;
    for h in handles {
        match h.join() {
            Ok(Ok(o)) => outcomes.push(o),
            Ok(Err(e)) => worker_error = worker_error.or(Some(e)),
            Err(_) => worker_error = worker_error.or(Some(BenchError::Launch("worker panicked".into()))),
        }
    }
    stop.store(true, Ordering::Relaxed);
    let qos = observer.map(|h| h.join().unwrap_or_default()).unwrap_or_default();
    if let Some(e) = launch_error.or(worker_error) {
        return Err(e);
    }
    let mut record = assemble(config, topology, replicate, seed, outcomes);
    record.qos = qos;
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn run_process(
    config: &RunConfig,
    topology: &TorusTopology,
    replicate: usize,
    seed: u64,
    rank: usize,
    peers: &[std::net::SocketAddr],
    barrier: &NetBarrier,
) -> Result<Option<ReplicateRecord>, BenchError> {
    let assignment = partition_block(topology, config.workers).with_process_per_worker();
    let registry = instantiate_channels::<u32>(
        topology,
        &assignment,
        DuctConfig {
            buffer_capacity: config.buffer_capacity,
        },
    );
    let net = NetAddressing {
        addrs: peers.to_vec(),
        link: LinkConfig {
            drop_probability: config.drop_probability,
            seed: seed ^ (rank as u64).rotate_left(32),
        },
    };
    let guard = AbandonOnDrop::new(barrier);
    let endpoints = registry.worker_endpoints(rank, NO_COLOR, Some(&net))?;
    let probes = select_probes(config, &endpoints);

    let (_, stamp) = barrier.wait_stamped(false)?;
    let run_start = Instant::now();
    let since_release = SystemTime::now()
        .duration_since(UNIX_EPOCH + Duration::from_nanos(stamp))
        .unwrap_or_default();
    let epoch = run_start.checked_sub(since_release).unwrap_or(run_start);

    let stop = Arc::new(AtomicBool::new(false));
    let observer = spawn_observer(config, probes, run_start, Arc::clone(&stop));
    let result = drive_worker(config, seed, registry.assignment(), endpoints, barrier, epoch);
    stop.store(true, Ordering::Relaxed);
    let qos = observer.map(|h| h.join().unwrap_or_default()).unwrap_or_default();
    let mut outcome = result?;
    outcome.qos = qos;

    let gathered = barrier.gather(&serde_json::to_vec(&outcome)?)?;
    guard.disarm();
    match gathered {
        Some(parts) => {
            let outcomes = parts
                .iter()
                .map(|p| serde_json::from_slice(p))
                .collect::<Result<Vec<WorkerOutcome>, _>>()?;
            Ok(Some(assemble(config, topology, replicate, seed, outcomes)))
        }
        None => Ok(None),
    }
}

/// Observed endpoints of one worker as (worker, endpoint index, probe).
/// Channels that cross workers come first.
fn select_probes(config: &RunConfig, endpoints: &WorkerEndpoints<u32>) -> Vec<(usize, usize, EndpointProbe)> {
    if config.snapshots.is_none() {
        return Vec::new();
    }
    let crossing = |i: &usize| endpoints.outlets[*i].duct().kind() != DuctKind::IntraThread;
    let all = 0..endpoints.outlets.len();
    let (cut, local): (Vec<usize>, Vec<usize>) = all.partition(crossing);
    cut.into_iter()
        .chain(local)
        .take(config.qos_endpoints)
        .map(|i| {
            let probe = EndpointProbe::new(
                endpoints.inlets[i].counters().clone(),
                endpoints.outlets[i].counters().clone(),
            );
            (endpoints.worker, i, probe)
        })
        .collect()
}

fn spawn_observer(
    config: &RunConfig,
    probes: Vec<(usize, usize, EndpointProbe)>,
    run_start: Instant,
    stop: Arc<AtomicBool>,
) -> Option<thread::JoinHandle<Vec<QosRow>>> {
    let snap = config.snapshots?;
    if probes.is_empty() {
        return None;
    }
    let schedule = snapshot_schedule(config.duration, snap.interval, snap.window);
    thread::Builder::new()
        .name("qos-observer".into())
        .spawn(move || {
            let just_probes: Vec<EndpointProbe> = probes.iter().map(|(_, _, p)| p.clone()).collect();
            let windows = take_snapshots(&just_probes, run_start, &schedule, snap.window, &stop);
            qos_rows(&probes, &windows)
        })
        .ok()
}

fn qos_rows(probes: &[(usize, usize, EndpointProbe)], windows: &[SnapshotWindow]) -> Vec<QosRow> {
    let mut rows = Vec::new();
    for w in windows {
        for (e, &(worker_id, endpoint, _)) in probes.iter().enumerate() {
            // A window with no updates has no defined period; it is skipped.
            if let Ok(r) = w.endpoint_report(e) {
                rows.push(QosRow {
                    worker_id,
                    endpoint,
                    window_index: w.index,
                    inlet: r.inlet.into(),
                    outlet: r.outlet.into(),
                    mean: r.mean.into(),
                });
            }
        }
    }
    rows
}

enum Kernel {
    Coloring(ColoringNodeState),
    Compute(u32),
}

impl Kernel {
    fn value(&self) -> u32 {
        match self {
            Kernel::Coloring(s) => s.current_color,
            Kernel::Compute(v) => *v,
        }
    }
}

fn pull<D: DuctRx<u32>>(outlet: &mut Outlet<u32, D>, kind: PullKind) -> Result<(), ChannelError> {
    let r = match kind {
        PullKind::Jump => outlet.jump().map(|_| ()),
        PullKind::Step => outlet.try_step().map(|_| ()),
    };
    match r {
        // The peer finished first; its last value stays in place.
        Err(ChannelError::DuctClosed) => Ok(()),
        other => other,
    }
}

fn push<D: DuctTx<u32>>(inlet: &mut Inlet<u32, D>, value: u32) -> Result<(), ChannelError> {
    match inlet.try_put(value) {
        Ok(_) | Err(ChannelError::DuctClosed) => Ok(()),
        Err(e) => Err(e),
    }
}

fn drive_worker<B: SyncBarrier + ?Sized>(
    config: &RunConfig,
    seed: u64,
    assignment: &PartitionAssignment,
    mut endpoints: WorkerEndpoints<u32>,
    barrier: &B,
    epoch: Instant,
) -> Result<WorkerOutcome, BenchError> {
    let worker = endpoints.worker;
    let nodes = assignment.nodes_of(worker).to_vec();
    let mut kernels: Vec<Kernel> = nodes
        .iter()
        .map(|&node| match config.workload {
            WorkloadKind::Coloring => {
                Kernel::Coloring(init_node(config.params.num_colors, node_rng(seed, node)))
            }
            WorkloadKind::Compute => Kernel::Compute(node as u32),
        })
        .collect();
    let local: Vec<bool> = endpoints
        .outlets
        .iter()
        .map(|o| matches!(o.duct(), AnyRx::Intra(_)))
        .collect();
    let local_tx: Vec<bool> = endpoints
        .inlets
        .iter()
        .map(|i| matches!(i.duct(), AnyTx::Intra(_)))
        .collect();
    let mut burner = ComputeBurner::new((seed as u32) ^ worker as u32);
    let jitter = config.jitter.filter(|j| j.worker == worker && !j.max.is_zero());
    let mut jitter_rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ worker as u64);
    let params = config.params;
    let pull_kind = config.pull;
    let mut failure: Option<ChannelError> = None;

    let WorkerEndpoints {
        inlets,
        outlets,
        pools,
        links,
        ..
    } = &mut endpoints;

    let mut update = |communicate: bool| {
        let mut step = || -> Result<(), ChannelError> {
            for (slot, kernel) in kernels.iter_mut().enumerate() {
                let mut seen = [NO_COLOR; 4];
                for dir in Direction::ALL {
                    let i = WorkerEndpoints::<u32>::index(slot, dir);
                    if communicate || local[i] {
                        pull(&mut outlets[i], pull_kind)?;
                    }
                    seen[dir.index()] = *outlets[i].last_received();
                }
                let sent = match kernel {
                    Kernel::Coloring(state) => state.update(&seen, &params),
                    Kernel::Compute(v) => {
                        *v = seen.iter().fold(v.rotate_left(7), |acc, &s| acc.wrapping_mul(31) ^ s);
                        *v
                    }
                };
                for dir in Direction::ALL {
                    let i = WorkerEndpoints::<u32>::index(slot, dir);
                    if communicate || local_tx[i] {
                        push(&mut inlets[i], sent)?;
                    }
                }
            }
            if communicate {
                for pool in pools.iter() {
                    match pool.borrow_mut().try_flush() {
                        // A refused flush is already charged as a drop.
                        Ok(_) | Err(ChannelError::DuctFull) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure.get_or_insert(e);
        }
        for inlet in inlets.iter() {
            inlet.record_update();
        }
        for outlet in outlets.iter() {
            outlet.record_update();
        }
        if params.compute_work_units > 0 {
            burner.burn(params.compute_work_units);
        }
        if let Some(j) = jitter {
            thread::sleep(jitter_rng.random_range(Duration::ZERO..=j.max));
        }
    };

    let limits = RunLimits {
        duration: Some(config.duration),
        max_updates: config.max_updates,
    };
    let record = run_worker(config.mode, &mut update, barrier, limits, epoch)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(WorkerOutcome {
        summary: WorkerSummary {
            worker,
            updates: record.updates,
            wall_time_s: record.wall_time.as_secs_f64(),
            barriers: record.barriers,
            wire_transfers: links.iter().map(|l| l.stats().wire_transfers).sum(),
        },
        values: kernels.iter().map(Kernel::value).collect(),
        nodes,
        qos: Vec::new(),
    })
}
