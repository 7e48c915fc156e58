//! Brute-force replay of a two-endpoint channel pair, checked against the
//! real channels and the snapshot arithmetic.

use std::collections::VecDeque;

use besteffort::channel::{InletCounts, OutletCounts};
use besteffort::duct::intra_thread_duct;
use besteffort::qos::{CounterSample, EndpointProbe, EndpointReport, QosReport, SnapshotTranche, SnapshotWindow};
use besteffort::{Inlet, Outlet, PutOutcome};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy)]
pub enum Event {
    Put { side: usize, value: u32 },
    Jump { side: usize },
    Step { side: usize },
    InletUpdate { side: usize },
    OutletUpdate { side: usize },
    Snapshot { advance_ns: u64 },
}

#[derive(Debug, Clone)]
pub struct EventLog {
    pub capacity: usize,
    pub events: Vec<Event>,
}

pub fn random_log(seed: u64) -> EventLog {
    let mut rng = StdRng::seed_from_u64(seed);
    let capacity = rng.random_range(1..=4);
    let len = rng.random_range(20..400);
    let mut events = vec![Event::Snapshot { advance_ns: 0 }];
    for _ in 0..len {
        let side = rng.random_range(0..2);
        let roll = rng.random_range(0..100);
        events.push(match roll {
            0..30 => Event::Put { side, value: rng.random() },
            30..50 => Event::Jump { side },
            50..62 => Event::Step { side },
            62..77 => Event::InletUpdate { side },
            77..92 => Event::OutletUpdate { side },
            _ => Event::Snapshot {
                advance_ns: rng.random_range(0..2_000_000_000),
            },
        });
    }
    events.push(Event::Snapshot {
        advance_ns: rng.random_range(1..2_000_000_000),
    });
    EventLog { capacity, events }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Side {
    attempted: u64,
    successful: u64,
    inlet_updates: u64,
    pulls: u64,
    laden: u64,
    messages: u64,
    outlet_updates: u64,
    touch: u64,
    last_value: Option<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    touch: u64,
    value: u32,
}

#[derive(Debug, Clone)]
struct ModelTranche {
    at_ns: u64,
    sides: [Side; 2],
}

/// Replays `log` by hand and returns one tranche per snapshot event.
fn replay(log: &EventLog) -> Vec<ModelTranche> {
    let mut sides = [Side::default(); 2];
    // queues[s] carries messages sent by side s.
    let mut queues: [VecDeque<Queued>; 2] = Default::default();
    let mut now = 0;
    let mut tranches = Vec::new();
    for &event in &log.events {
        match event {
            Event::Put { side, value } => {
                sides[side].attempted += 1;
                if queues[side].len() < log.capacity {
                    let touch = sides[side].touch;
                    queues[side].push_back(Queued { touch, value });
                    sides[side].successful += 1;
                }
            }
            Event::Jump { side } | Event::Step { side } => {
                let queue = &mut queues[1 - side];
                let take = match event {
                    Event::Jump { .. } => queue.len(),
                    _ => queue.len().min(1),
                };
                let taken: Vec<Queued> = queue.drain(..take).collect();
                let s = &mut sides[side];
                s.pulls += 1;
                if let Some(last) = taken.last() {
                    s.messages += taken.len() as u64;
                    s.laden += 1;
                    s.touch = last.touch + 1;
                    s.last_value = Some(last.value);
                }
            }
            Event::InletUpdate { side } => sides[side].inlet_updates += 1,
            Event::OutletUpdate { side } => sides[side].outlet_updates += 1,
            Event::Snapshot { advance_ns } => {
                now += advance_ns;
                tranches.push(ModelTranche { at_ns: now, sides });
            }
        }
    }
    tranches
}

fn metrics(ns: u64, updates: u64, touches: u64, b: &Side, a: &Side) -> Option<QosReport> {
    if updates == 0 {
        return None;
    }
    let period = ns as f64 / 1e9 / updates as f64;
    let latency = updates as f64 / touches.max(1) as f64;
    let attempted = a.attempted - b.attempted;
    let successful = a.successful - b.successful;
    let failure = (attempted > 0).then(|| (attempted - successful) as f64 / attempted as f64);
    let opportunities = (a.messages - b.messages).min(a.pulls - b.pulls);
    let laden = a.laden - b.laden;
    let clumpiness = if opportunities == 0 {
        0.0
    } else {
        (opportunities - laden) as f64 / opportunities as f64
    };
    Some(QosReport {
        simstep_period: period,
        simstep_latency: latency,
        walltime_latency: latency * period,
        delivery_failure_rate: failure,
        delivery_clumpiness: clumpiness,
    })
}

fn expected(before: &ModelTranche, after: &ModelTranche, side: usize) -> Option<EndpointReport> {
    let (b, a) = (&before.sides[side], &after.sides[side]);
    let ns = after.at_ns - before.at_ns;
    let touches = a.touch - b.touch;
    let inlet = metrics(ns, a.inlet_updates - b.inlet_updates, touches, b, a)?;
    let outlet = metrics(ns, a.outlet_updates - b.outlet_updates, touches, b, a)?;
    let avg = |x: f64, y: f64| (x + y) / 2.0;
    let mean = QosReport {
        simstep_period: avg(inlet.simstep_period, outlet.simstep_period),
        simstep_latency: avg(inlet.simstep_latency, outlet.simstep_latency),
        walltime_latency: avg(inlet.walltime_latency, outlet.walltime_latency),
        delivery_failure_rate: match (inlet.delivery_failure_rate, outlet.delivery_failure_rate) {
            (Some(x), Some(y)) => Some(avg(x, y)),
            _ => None,
        },
        delivery_clumpiness: avg(inlet.delivery_clumpiness, outlet.delivery_clumpiness),
    };
    Some(EndpointReport { inlet, outlet, mean })
}

fn sample_of(side: &Side) -> CounterSample {
    CounterSample {
        inlet: InletCounts {
            attempted_send_count: side.attempted,
            successful_send_count: side.successful,
            update_count: side.inlet_updates,
        },
        outlet: OutletCounts {
            pull_attempt_count: side.pulls,
            laden_pull_count: side.laden,
            message_count: side.messages,
            update_count: side.outlet_updates,
            touch_count: side.touch,
        },
    }
}

/// Runs `log` on real channels. Returns the tranche captured at each
/// snapshot and the last value received by each side.
fn execute(log: &EventLog) -> (Vec<SnapshotTranche>, [Option<u32>; 2]) {
    let (ab_tx, ab_rx) = intra_thread_duct::<u32>(log.capacity);
    let (ba_tx, ba_rx) = intra_thread_duct::<u32>(log.capacity);
    let mut inlets = [Inlet::new(ab_tx), Inlet::new(ba_tx)];
    // outlets[s] receives what the other side sends.
    let mut outlets = [Outlet::new(ba_rx, u32::MAX), Outlet::new(ab_rx, u32::MAX)];
    for s in 0..2 {
        inlets[s].bind_touch(outlets[s].counters().clone());
    }
    let probes: Vec<EndpointProbe> = (0..2)
        .map(|s| EndpointProbe::new(inlets[s].counters().clone(), outlets[s].counters().clone()))
        .collect();
    let mut received = [None; 2];
    let mut now = 0;
    let mut tranches = Vec::new();
    for &event in &log.events {
        match event {
            Event::Put { side, value } => {
                let _: PutOutcome = inlets[side].try_put(value).expect("intra duct stays open");
            }
            Event::Jump { side } => {
                let before = outlets[side].last_sequence();
                let v = *outlets[side].jump().expect("intra duct stays open");
                if outlets[side].last_sequence() != before {
                    received[side] = Some(v);
                }
            }
            Event::Step { side } => {
                if let besteffort::StepOutcome::Advanced(v) =
                    outlets[side].try_step().expect("intra duct stays open")
                {
                    received[side] = Some(*v);
                }
            }
            Event::InletUpdate { side } => inlets[side].record_update(),
            Event::OutletUpdate { side } => outlets[side].record_update(),
            Event::Snapshot { advance_ns } => {
                now += advance_ns;
                tranches.push(SnapshotTranche::capture_at(&probes, now));
            }
        }
    }
    (tranches, received)
}

#[derive(Debug, Default)]
pub struct OracleOutcome {
    pub logs: usize,
    pub windows_compared: usize,
    pub mismatches: Vec<String>,
}

/// Every pair of snapshots in every log, both endpoints.
pub fn check_logs(count: usize, first_seed: u64) -> OracleOutcome {
    let mut outcome = OracleOutcome::default();
    for seed in first_seed..first_seed + count as u64 {
        let log = random_log(seed);
        let model = replay(&log);
        let (real, received) = execute(&log);
        outcome.logs += 1;
        let model_last = [model.last().unwrap().sides[0].last_value, model.last().unwrap().sides[1].last_value];
        if received != model_last {
            outcome
                .mismatches
                .push(format!("log {seed}: received {received:?}, replay {model_last:?}"));
        }
        for (t, (m, r)) in model.iter().zip(&real).enumerate() {
            for s in 0..2 {
                if sample_of(&m.sides[s]) != r.samples[s] {
                    outcome.mismatches.push(format!(
                        "log {seed} tranche {t} side {s}: counters {:?}, replay {:?}",
                        r.samples[s], m.sides[s]
                    ));
                }
            }
        }
        for i in 0..model.len() {
            for j in i + 1..model.len() {
                let window = SnapshotWindow {
                    index: i,
                    before: real[i].clone(),
                    after: real[j].clone(),
                };
                for s in 0..2 {
                    let want = expected(&model[i], &model[j], s);
                    let got = window.endpoint_report(s).ok();
                    outcome.windows_compared += 1;
                    if want != got {
                        outcome
                            .mismatches
                            .push(format!("log {seed} window {i}..{j} side {s}: {got:?} != {want:?}"));
                    }
                }
            }
        }
    }
    outcome
}
