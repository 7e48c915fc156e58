//! Asynchronicity modes and the per-worker update loop.
//!
//! | mode | behavior |
//! |------|----------|
//! | 0 | barrier after every update |
//! | 1 | update for a fixed chunk of wall time, then barrier |
//! | 2 | barrier whenever a tick of a shared epoch schedule has passed |
//! | 3 | no barriers; communication is fully best-effort |
//! | 4 | no barriers and no inter-worker communication |
//!
//! Every barrier doubles as a stop vote so that workers running under a
//! barrier mode agree on which generation is the last one.

mod net;

pub use net::{NetBarrier, NetBarrierConfig};

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsynchronicityMode {
    FullBarrier,
    TimedChunks { chunk: Duration },
    UtcSchedule { interval: Duration },
    FullyAsync,
    NoComm,
}

impl AsynchronicityMode {
    pub fn index(&self) -> u8 {
        match self {
            AsynchronicityMode::FullBarrier => 0,
            AsynchronicityMode::TimedChunks { .. } => 1,
            AsynchronicityMode::UtcSchedule { .. } => 2,
            AsynchronicityMode::FullyAsync => 3,
            AsynchronicityMode::NoComm => 4,
        }
    }

    pub fn from_index(index: u8, chunk: Duration, interval: Duration) -> Option<Self> {
        Some(match index {
            0 => AsynchronicityMode::FullBarrier,
            1 => AsynchronicityMode::TimedChunks { chunk },
            2 => AsynchronicityMode::UtcSchedule { interval },
            3 => AsynchronicityMode::FullyAsync,
            4 => AsynchronicityMode::NoComm,
            _ => return None,
        })
    }

    pub fn uses_barriers(&self) -> bool {
        self.index() <= 2
    }

    /// Whether workers exchange messages with other workers during the run.
    pub fn communicates(&self) -> bool {
        !matches!(self, AsynchronicityMode::NoComm)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("barrier broken: a participant left early")]
    BarrierBroken,
    #[error("barrier timed out waiting for peers")]
    Timeout,
    #[error("barrier transport failed: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    pub generation: u64,
    /// True when any participant voted to stop at this generation.
    pub stop: bool,
}

pub trait SyncBarrier {
    /// Blocks until every participant reaches the same generation.
    fn wait(&self, stop_vote: bool) -> Result<Release, SyncError>;

    /// Marks the barrier broken, releasing current and future waiters with
    /// an error.
    fn abandon(&self);
}

struct BarrierState {
    arrived: usize,
    generation: u64,
    stop_vote: bool,
    last_stop: bool,
    broken: bool,
}

/// Generation-counting barrier for threads of one process.
#[derive(Clone)]
pub struct ThreadBarrier {
    inner: Arc<(Mutex<BarrierState>, Condvar)>,
    participants: usize,
}

impl ThreadBarrier {
    pub fn new(participants: usize) -> Self {
        assert!(participants > 0);
        ThreadBarrier {
            inner: Arc::new((
                Mutex::new(BarrierState {
                    arrived: 0,
                    generation: 0,
                    stop_vote: false,
                    last_stop: false,
                    broken: false,
                }),
                Condvar::new(),
            )),
            participants,
        }
    }
}

impl SyncBarrier for ThreadBarrier {
    fn wait(&self, stop_vote: bool) -> Result<Release, SyncError> {
        let (lock, cvar) = &*self.inner;
        let mut state = lock.lock().unwrap_or_else(|e| e.into_inner());
        if state.broken {
            return Err(SyncError::BarrierBroken);
        }
        let generation = state.generation;
        state.arrived += 1;
        state.stop_vote |= stop_vote;
        if state.arrived == self.participants {
            state.arrived = 0;
            state.generation += 1;
            state.last_stop = state.stop_vote;
            state.stop_vote = false;
            cvar.notify_all();
            return Ok(Release {
                generation,
                stop: state.last_stop,
            });
        }
        while state.generation == generation && !state.broken {
            state = cvar.wait(state).unwrap_or_else(|e| e.into_inner());
        }
        if state.generation == generation {
            return Err(SyncError::BarrierBroken);
        }
        Ok(Release {
            generation,
            stop: state.last_stop,
        })
    }

    fn abandon(&self) {
        let (lock, cvar) = &*self.inner;
        lock.lock().unwrap_or_else(|e| e.into_inner()).broken = true;
        cvar.notify_all();
    }
}

/// Calls [`SyncBarrier::abandon`] on drop unless disarmed. Hold one per
/// worker so a panicking worker releases its peers.
pub struct AbandonOnDrop<'a, B: SyncBarrier + ?Sized> {
    barrier: &'a B,
    armed: bool,
}

impl<'a, B: SyncBarrier + ?Sized> AbandonOnDrop<'a, B> {
    pub fn new(barrier: &'a B) -> Self {
        AbandonOnDrop { barrier, armed: true }
    }

    pub fn disarm(mut self) {
        self.armed = false;
    }
}

impl<B: SyncBarrier + ?Sized> Drop for AbandonOnDrop<'_, B> {
    fn drop(&mut self) {
        if self.armed {
            self.barrier.abandon();
        }
    }
}

/// One simulation update, as seen by the update loop.
pub trait Workload {
    /// `communicate` is false under [`AsynchronicityMode::NoComm`].
    fn update(&mut self, communicate: bool);
}

impl<F: FnMut(bool)> Workload for F {
    fn update(&mut self, communicate: bool) {
        self(communicate)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    pub duration: Option<Duration>,
    pub max_updates: Option<u64>,
}

impl RunLimits {
    fn reached(&self, started: Instant, updates: u64) -> bool {
        self.max_updates.is_some_and(|m| updates >= m)
            || self.duration.is_some_and(|d| started.elapsed() >= d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerRecord {
    pub updates: u64,
    pub wall_time: Duration,
    pub barriers: u64,
}

/// Drives `workload` under `mode` until a limit is reached. Limits are
/// checked between updates. In barrier modes the limit is voted through the
/// barrier, so every worker leaves at the same generation. `epoch` anchors
/// the mode 2 tick schedule and must be the same instant for all workers.
pub fn run_worker<W: Workload + ?Sized, B: SyncBarrier + ?Sized>(
    mode: AsynchronicityMode,
    workload: &mut W,
    barrier: &B,
    limits: RunLimits,
    epoch: Instant,
) -> Result<WorkerRecord, SyncError> {
    let started = Instant::now();
    let communicate = mode.communicates();
    let mut updates = 0u64;
    let mut barriers = 0u64;
    let sync = |vote: bool, barriers: &mut u64| -> Result<bool, SyncError> {
        *barriers += 1;
        Ok(barrier.wait(vote)?.stop)
    };

    match mode {
        AsynchronicityMode::FullBarrier => loop {
            workload.update(communicate);
            updates += 1;
            if sync(limits.reached(started, updates), &mut barriers)? {
                break;
            }
        },
        AsynchronicityMode::TimedChunks { chunk } => loop {
            let chunk_start = Instant::now();
            let mut done = false;
            while chunk_start.elapsed() < chunk {
                workload.update(communicate);
                updates += 1;
                if limits.reached(started, updates) {
                    done = true;
                    break;
                }
            }
            if sync(done, &mut barriers)? {
                break;
            }
        },
        AsynchronicityMode::UtcSchedule { interval } => {
            let mut tick = 1u32;
            loop {
                workload.update(communicate);
                updates += 1;
                let done = limits.reached(started, updates);
                if done || Instant::now() >= epoch + interval * tick {
                    tick += 1;
                    if sync(done, &mut barriers)? {
                        break;
                    }
                }
            }
        }
        AsynchronicityMode::FullyAsync | AsynchronicityMode::NoComm => {
            while !limits.reached(started, updates) {
                workload.update(communicate);
                updates += 1;
            }
        }
    }

    Ok(WorkerRecord {
        updates,
        wall_time: started.elapsed(),
        barriers,
    })
}
