//! Quality-of-service instrumentation.
//!
//! An observer copies channel counters into a [`SnapshotTranche`] at the
//! start and end of a short window without pausing workers. Metrics come
//! from the differences between the two tranches:
//!
//! * simstep period: wall time per update
//! * simstep latency: updates per touch, touches advance by two per round
//!   trip so this is one-way latency in updates
//! * walltime latency: simstep latency times simstep period
//! * delivery failure rate: fraction of attempted sends that were dropped
//! * delivery clumpiness: one minus laden pulls over the number of
//!   opportunities for a laden pull
//!
//! Reads are individually atomic but not mutually consistent, so torn
//! windows can push clumpiness slightly outside `[0, 1]`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{InletCounters, InletCounts, OutletCounters, OutletCounts};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum QosError {
    #[error("no updates elapsed in the window")]
    NoUpdatesElapsed,
    #[error("no sends attempted in the window")]
    NoSendsAttempted,
    #[error("nothing to aggregate")]
    EmptyInput,
}

/// Wall time per update, in seconds.
pub fn simstep_period(elapsed_ns: u64, updates: u64) -> Result<f64, QosError> {
    if updates == 0 {
        return Err(QosError::NoUpdatesElapsed);
    }
    Ok(elapsed_ns as f64 / 1e9 / updates as f64)
}

/// Updates per touch. With no touches the result is the window's update
/// count.
pub fn simstep_latency(updates: u64, touches: u64) -> f64 {
    updates as f64 / touches.max(1) as f64
}

pub fn walltime_latency(simstep_latency: f64, simstep_period: f64) -> f64 {
    simstep_latency * simstep_period
}

pub fn delivery_failure_rate(attempted: u64, successful: u64) -> Result<f64, QosError> {
    if attempted == 0 {
        return Err(QosError::NoSendsAttempted);
    }
    // One rounding: failed / attempted rather than 1 - successful / attempted.
    Ok(attempted.saturating_sub(successful) as f64 / attempted as f64)
}

/// Zero when there was no opportunity for a laden pull.
pub fn delivery_clumpiness(laden_pulls: u64, messages: u64, pull_attempts: u64) -> f64 {
    let opportunities = messages.min(pull_attempts);
    if opportunities == 0 {
        return 0.0;
    }
    opportunities.saturating_sub(laden_pulls) as f64 / opportunities as f64
}

/// Counters of one endpoint: the inlet toward a neighbor and the outlet
/// from that same neighbor.
#[derive(Debug, Clone)]
pub struct EndpointProbe {
    pub inlet: Arc<InletCounters>,
    pub outlet: Arc<OutletCounters>,
}

impl EndpointProbe {
    pub fn new(inlet: Arc<InletCounters>, outlet: Arc<OutletCounters>) -> Self {
        EndpointProbe { inlet, outlet }
    }

    pub fn sample(&self) -> CounterSample {
        CounterSample {
            inlet: self.inlet.read(),
            outlet: self.outlet.read(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSample {
    pub inlet: InletCounts,
    pub outlet: OutletCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotTranche {
    /// Nanoseconds since run start.
    pub capture_walltime_ns: u64,
    pub samples: Vec<CounterSample>,
}

impl SnapshotTranche {
    pub fn capture(probes: &[EndpointProbe], run_start: Instant) -> Self {
        let samples = probes.iter().map(EndpointProbe::sample).collect();
        SnapshotTranche {
            capture_walltime_ns: run_start.elapsed().as_nanos() as u64,
            samples,
        }
    }

    /// Capture with an externally supplied timestamp.
    pub fn capture_at(probes: &[EndpointProbe], capture_walltime_ns: u64) -> Self {
        SnapshotTranche {
            capture_walltime_ns,
            samples: probes.iter().map(EndpointProbe::sample).collect(),
        }
    }
}

/// Which side's update counter normalizes the time-based metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Inlet,
    Outlet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QosReport {
    pub simstep_period: f64,
    pub simstep_latency: f64,
    pub walltime_latency: f64,
    /// `None` when no sends were attempted.
    pub delivery_failure_rate: Option<f64>,
    pub delivery_clumpiness: f64,
}

impl QosReport {
    fn mean(a: &QosReport, b: &QosReport) -> QosReport {
        let avg = |x: f64, y: f64| (x + y) / 2.0;
        QosReport {
            simstep_period: avg(a.simstep_period, b.simstep_period),
            simstep_latency: avg(a.simstep_latency, b.simstep_latency),
            walltime_latency: avg(a.walltime_latency, b.walltime_latency),
            delivery_failure_rate: a
                .delivery_failure_rate
                .zip(b.delivery_failure_rate)
                .map(|(x, y)| avg(x, y)),
            delivery_clumpiness: avg(a.delivery_clumpiness, b.delivery_clumpiness),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointReport {
    pub inlet: QosReport,
    pub outlet: QosReport,
    pub mean: QosReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotWindow {
    pub index: usize,
    pub before: SnapshotTranche,
    pub after: SnapshotTranche,
}

fn diff(after: u64, before: u64) -> u64 {
    after.saturating_sub(before)
}

impl SnapshotWindow {
    pub fn elapsed_ns(&self) -> u64 {
        diff(self.after.capture_walltime_ns, self.before.capture_walltime_ns)
    }

    pub fn endpoint_count(&self) -> usize {
        self.before.samples.len().min(self.after.samples.len())
    }

    pub fn report(&self, endpoint: usize, basis: Basis) -> Result<QosReport, QosError> {
        let (b, a) = (&self.before.samples[endpoint], &self.after.samples[endpoint]);
        let updates = match basis {
            Basis::Inlet => diff(a.inlet.update_count, b.inlet.update_count),
            Basis::Outlet => diff(a.outlet.update_count, b.outlet.update_count),
        };
        let period = simstep_period(self.elapsed_ns(), updates)?;
        let latency = simstep_latency(updates, diff(a.outlet.touch_count, b.outlet.touch_count));
        let failure = match delivery_failure_rate(
            diff(a.inlet.attempted_send_count, b.inlet.attempted_send_count),
            diff(a.inlet.successful_send_count, b.inlet.successful_send_count),
        ) {
            Ok(rate) => Some(rate),
            Err(QosError::NoSendsAttempted) => None,
            Err(e) => return Err(e),
        };
        Ok(QosReport {
            simstep_period: period,
            simstep_latency: latency,
            walltime_latency: walltime_latency(latency, period),
            delivery_failure_rate: failure,
            delivery_clumpiness: delivery_clumpiness(
                diff(a.outlet.laden_pull_count, b.outlet.laden_pull_count),
                diff(a.outlet.message_count, b.outlet.message_count),
                diff(a.outlet.pull_attempt_count, b.outlet.pull_attempt_count),
            ),
        })
    }

    pub fn endpoint_report(&self, endpoint: usize) -> Result<EndpointReport, QosError> {
        let inlet = self.report(endpoint, Basis::Inlet)?;
        let outlet = self.report(endpoint, Basis::Outlet)?;
        Ok(EndpointReport {
            inlet,
            outlet,
            mean: QosReport::mean(&inlet, &outlet),
        })
    }
}

/// Window start offsets: every `interval` after run start, skipping the
/// start itself, for as long as the whole window fits in `duration`.
pub fn snapshot_schedule(duration: Duration, interval: Duration, window: Duration) -> Vec<Duration> {
    if interval.is_zero() {
        return Vec::new();
    }
    (1u32..)
        .map(|k| interval * k)
        .take_while(|&start| start + window <= duration)
        .collect()
}

/// Records one window per scheduled start. Sleeps between captures so the
/// observer does not compete with workers for a core. Returns early, with
/// the windows completed so far, once `stop` is set.
pub fn take_snapshots(
    probes: &[EndpointProbe],
    run_start: Instant,
    schedule: &[Duration],
    window: Duration,
    stop: &AtomicBool,
) -> Vec<SnapshotWindow> {
    let mut windows = Vec::with_capacity(schedule.len());
    for (index, &start) in schedule.iter().enumerate() {
        if !sleep_until(run_start + start, stop) {
            break;
        }
        let before = SnapshotTranche::capture(probes, run_start);
        if !sleep_until(Instant::now() + window, stop) {
            break;
        }
        let after = SnapshotTranche::capture(probes, run_start);
        windows.push(SnapshotWindow { index, before, after });
    }
    windows
}

fn sleep_until(deadline: Instant, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::Relaxed) {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(50)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Lower of the two middle values for even counts.
    pub median: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary, QosError> {
    if values.is_empty() {
        return Err(QosError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: sorted[(sorted.len() - 1) / 2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateSummary {
    pub simstep_period: Summary,
    pub simstep_latency: Summary,
    pub walltime_latency: Summary,
    /// `None` when no report had any attempted sends.
    pub delivery_failure_rate: Option<Summary>,
    pub delivery_clumpiness: Summary,
}

/// Mean and median of each metric over the reports of one replicate.
pub fn aggregate_replicate(reports: &[QosReport]) -> Result<ReplicateSummary, QosError> {
    let metric = |f: fn(&QosReport) -> f64| summarize(&reports.iter().map(f).collect::<Vec<_>>());
    let failures: Vec<f64> = reports.iter().filter_map(|r| r.delivery_failure_rate).collect();
    Ok(ReplicateSummary {
        simstep_period: metric(|r| r.simstep_period)?,
        simstep_latency: metric(|r| r.simstep_latency)?,
        walltime_latency: metric(|r| r.walltime_latency)?,
        delivery_failure_rate: summarize(&failures).ok(),
        delivery_clumpiness: metric(|r| r.delivery_clumpiness)?,
    })
}
