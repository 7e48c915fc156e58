//! Inlet/outlet endpoints, the message envelope, and the duct contract.
//!
//! An [`Inlet`] is the sending side of one directed logical channel and an
//! [`Outlet`] is the receiving side. Both sit on top of a duct, the transport
//! that actually moves messages. Sends never block in [`Inlet::try_put`]: when
//! the duct's buffer is full the new message is dropped and the drop is
//! visible only through the inlet's counters. Reads never block in
//! [`Outlet::jump`] or [`Outlet::try_step`]: when nothing new has arrived the
//! last received value is returned again.
//!
//! Every endpoint owns a set of atomic counters that an observer on another
//! thread may read at any time without pausing the worker.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::wire::WireError;

/// A payload together with the instrumentation fields carried alongside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMessage<T> {
    pub payload: T,
    pub bundled_touch_count: u64,
    pub sequence_number: u64,
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("duct closed: the paired endpoint was dropped")]
    DuctClosed,
    #[error("duct full: consolidated transfer dropped")]
    DuctFull,
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Result of handing one message to a duct.
#[derive(Debug)]
pub enum Enqueue<T> {
    Accepted,
    /// Staged for a later consolidated transfer. Send accounting happens when
    /// the consolidated transfer is dispatched.
    Deferred,
    /// No room; the message is handed back and the duct is unchanged.
    Full(ChannelMessage<T>),
}

/// Sending half of a duct.
pub trait DuctTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError>;

    /// True once the receiving half is gone.
    fn is_closed(&self) -> bool;
}

/// Receiving half of a duct.
pub trait DuctRx<T> {
    /// Moves up to `max` available messages (all of them when `None`) into
    /// `out` in sequence order and returns how many were moved.
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError>;

    /// Removes up to `max` messages like [`DuctRx::drain`] but keeps only
    /// the newest. `scratch` is working space for ducts without a cheaper
    /// path.
    fn drain_newest(&mut self, max: Option<usize>, scratch: &mut Vec<ChannelMessage<T>>) -> Newest<T> {
        scratch.clear();
        let error = self.drain(max, scratch).err();
        let count = scratch.len();
        let newest = scratch.pop();
        scratch.clear();
        Newest { count, newest, error }
    }

    /// True once the sending half is gone and nothing remains to drain.
    fn is_closed(&self) -> bool;
}

/// Outcome of [`DuctRx::drain_newest`].
#[derive(Debug)]
pub struct Newest<T> {
    /// Messages removed, including the newest.
    pub count: usize,
    pub newest: Option<ChannelMessage<T>>,
    /// A transport failure hit after `count` messages were removed.
    pub error: Option<ChannelError>,
}

impl<T, D: DuctTx<T> + ?Sized> DuctTx<T> for Box<D> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        (**self).enqueue(msg)
    }

    fn is_closed(&self) -> bool {
        (**self).is_closed()
    }
}

impl<T, D: DuctRx<T> + ?Sized> DuctRx<T> for Box<D> {
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError> {
        (**self).drain(max, out)
    }

    fn drain_newest(&mut self, max: Option<usize>, scratch: &mut Vec<ChannelMessage<T>>) -> Newest<T> {
        (**self).drain_newest(max, scratch)
    }

    fn is_closed(&self) -> bool {
        (**self).is_closed()
    }
}

/// Adds `n` to a counter that only one thread ever writes. A plain load and
/// store avoids a locked read-modify-write; readers still see whole values.
#[inline]
fn bump(counter: &AtomicU64, n: u64) {
    counter.store(counter.load(Ordering::Relaxed) + n, Ordering::Relaxed);
}

/// Written only by the thread that owns the inlet; readable from anywhere.
#[derive(Debug, Default)]
pub struct InletCounters {
    attempted_send_count: AtomicU64,
    successful_send_count: AtomicU64,
    update_count: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct InletCounts {
    pub attempted_send_count: u64,
    pub successful_send_count: u64,
    pub update_count: u64,
}

impl InletCounters {
    pub fn read(&self) -> InletCounts {
        InletCounts {
            attempted_send_count: self.attempted_send_count.load(Ordering::Relaxed),
            successful_send_count: self.successful_send_count.load(Ordering::Relaxed),
            update_count: self.update_count.load(Ordering::Relaxed),
        }
    }

    /// Records one send attempt. Consolidated transfers use this to account
    /// for their member channels at dispatch time.
    pub fn record_send(&self, succeeded: bool) {
        // Successful before attempted would let an observer see successful >
        // attempted; bump attempted first.
        bump(&self.attempted_send_count, 1);
        if succeeded {
            bump(&self.successful_send_count, 1);
        }
    }

    pub fn record_update(&self) {
        bump(&self.update_count, 1);
    }
}

/// Written only by the thread that owns the outlet; readable from anywhere.
#[derive(Debug, Default)]
pub struct OutletCounters {
    pull_attempt_count: AtomicU64,
    laden_pull_count: AtomicU64,
    message_count: AtomicU64,
    update_count: AtomicU64,
    touch_count: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OutletCounts {
    pub pull_attempt_count: u64,
    pub laden_pull_count: u64,
    pub message_count: u64,
    pub update_count: u64,
    pub touch_count: u64,
}

impl OutletCounters {
    pub fn read(&self) -> OutletCounts {
        OutletCounts {
            pull_attempt_count: self.pull_attempt_count.load(Ordering::Relaxed),
            laden_pull_count: self.laden_pull_count.load(Ordering::Relaxed),
            message_count: self.message_count.load(Ordering::Relaxed),
            update_count: self.update_count.load(Ordering::Relaxed),
            touch_count: self.touch_count.load(Ordering::Relaxed),
        }
    }

    pub fn touch_count(&self) -> u64 {
        self.touch_count.load(Ordering::Relaxed)
    }

    pub fn record_update(&self) {
        bump(&self.update_count, 1);
    }

    fn record_pull(&self, received: usize, newest_touch: Option<u64>) {
        bump(&self.pull_attempt_count, 1);
        if received > 0 {
            bump(&self.message_count, received as u64);
            bump(&self.laden_pull_count, 1);
        }
        if let Some(bundled) = newest_touch {
            self.touch_count.store(bundled + 1, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Queued,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome<V> {
    Advanced(V),
    Stale(V),
}

impl<V> StepOutcome<V> {
    pub fn into_inner(self) -> V {
        match self {
            StepOutcome::Advanced(v) | StepOutcome::Stale(v) => v,
        }
    }

    pub fn is_advanced(&self) -> bool {
        matches!(self, StepOutcome::Advanced(_))
    }
}

/// Sending endpoint of one directed channel.
pub struct Inlet<T, D> {
    duct: D,
    counters: Arc<InletCounters>,
    next_sequence: u64,
    /// Touch counter of the reverse channel's outlet, bundled with each send.
    reply_touch: Option<Arc<OutletCounters>>,
    _payload: PhantomData<fn(T)>,
}

impl<T, D: DuctTx<T>> Inlet<T, D> {
    pub fn new(duct: D) -> Self {
        Self::with_counters(duct, Arc::default())
    }

    pub fn with_counters(duct: D, counters: Arc<InletCounters>) -> Self {
        Inlet {
            duct,
            counters,
            next_sequence: 0,
            reply_touch: None,
            _payload: PhantomData,
        }
    }

    pub fn counters(&self) -> &Arc<InletCounters> {
        &self.counters
    }

    pub fn duct(&self) -> &D {
        &self.duct
    }

    /// Bundles the touch counter of `reply` (the outlet receiving from this
    /// inlet's target) with every message sent.
    pub fn bind_touch(&mut self, reply: Arc<OutletCounters>) {
        self.reply_touch = Some(reply);
    }

    fn envelope(&self, payload: T) -> ChannelMessage<T> {
        ChannelMessage {
            payload,
            bundled_touch_count: self.reply_touch.as_ref().map_or(0, |c| c.touch_count()),
            sequence_number: self.next_sequence,
        }
    }

    /// Non-blocking send. A full buffer drops the new message.
    pub fn try_put(&mut self, payload: T) -> Result<PutOutcome, ChannelError> {
        if self.duct.is_closed() {
            return Err(ChannelError::DuctClosed);
        }
        let msg = self.envelope(payload);
        match self.duct.enqueue(msg)? {
            Enqueue::Accepted => {
                self.counters.record_send(true);
                self.next_sequence += 1;
                Ok(PutOutcome::Queued)
            }
            Enqueue::Deferred => {
                self.next_sequence += 1;
                Ok(PutOutcome::Queued)
            }
            Enqueue::Full(_) => {
                self.counters.record_send(false);
                Ok(PutOutcome::Dropped)
            }
        }
    }

    /// Blocking send: waits for buffer space, then enqueues.
    pub fn put(&mut self, payload: T) -> Result<(), ChannelError> {
        let mut msg = self.envelope(payload);
        let mut backoff = Backoff::default();
        loop {
            if self.duct.is_closed() {
                return Err(ChannelError::DuctClosed);
            }
            match self.duct.enqueue(msg)? {
                Enqueue::Accepted => {
                    self.counters.record_send(true);
                    self.next_sequence += 1;
                    return Ok(());
                }
                Enqueue::Deferred => {
                    self.next_sequence += 1;
                    return Ok(());
                }
                Enqueue::Full(returned) => {
                    msg = returned;
                    // Refresh the bundled touch count while waiting.
                    if let Some(reply) = &self.reply_touch {
                        msg.bundled_touch_count = reply.touch_count();
                    }
                    backoff.snooze();
                }
            }
        }
    }

    pub fn record_update(&self) {
        self.counters.record_update();
    }
}

/// Receiving endpoint of one directed channel.
pub struct Outlet<T, D> {
    duct: D,
    counters: Arc<OutletCounters>,
    last_received: T,
    last_sequence: Option<u64>,
    scratch: Vec<ChannelMessage<T>>,
}

impl<T, D: DuctRx<T>> Outlet<T, D> {
    /// `initial` is returned by reads that happen before any message arrives.
    pub fn new(duct: D, initial: T) -> Self {
        Outlet {
            duct,
            counters: Arc::default(),
            last_received: initial,
            last_sequence: None,
            scratch: Vec::new(),
        }
    }

    pub fn counters(&self) -> &Arc<OutletCounters> {
        &self.counters
    }

    pub fn duct(&self) -> &D {
        &self.duct
    }

    pub fn last_received(&self) -> &T {
        &self.last_received
    }

    /// Sequence number of the most recent successful fetch.
    pub fn last_sequence(&self) -> Option<u64> {
        self.last_sequence
    }

    fn pull(&mut self, max: Option<usize>) -> Result<usize, ChannelError> {
        let Newest { count, newest, error } = self.duct.drain_newest(max, &mut self.scratch);
        let newest_touch = newest.as_ref().map(|m| m.bundled_touch_count);
        if let Some(m) = newest {
            self.last_received = m.payload;
            self.last_sequence = Some(m.sequence_number);
        }
        // Anything drained before a transport failure still counts.
        self.counters.record_pull(count, newest_touch);
        match error {
            Some(e) => Err(e),
            None => Ok(count),
        }
    }

    /// Drains every available message and keeps the newest.
    pub fn jump(&mut self) -> Result<&T, ChannelError> {
        self.pull(None)?;
        Ok(&self.last_received)
    }

    /// Fetches at most one message.
    pub fn try_step(&mut self) -> Result<StepOutcome<&T>, ChannelError> {
        let received = self.pull(Some(1))?;
        Ok(if received > 0 {
            StepOutcome::Advanced(&self.last_received)
        } else {
            StepOutcome::Stale(&self.last_received)
        })
    }

    /// Blocks until one new message arrives. Internal polls are not counted
    /// as pull attempts; one attempt is recorded per returned message.
    pub fn step(&mut self) -> Result<&T, ChannelError> {
        let mut backoff = Backoff::default();
        loop {
            let got = self.duct.drain_newest(Some(1), &mut self.scratch);
            if let Some(m) = got.newest {
                self.last_received = m.payload;
                self.last_sequence = Some(m.sequence_number);
                self.counters.record_pull(1, Some(m.bundled_touch_count));
                return Ok(&self.last_received);
            }
            if let Some(e) = got.error {
                return Err(e);
            }
            if self.duct.is_closed() {
                return Err(ChannelError::DuctClosed);
            }
            backoff.snooze();
        }
    }

    pub fn record_update(&self) {
        self.counters.record_update();
    }
}

/// Spin, then yield, then sleep in short increments.
#[derive(Default)]
pub(crate) struct Backoff {
    step: u32,
}

impl Backoff {
    pub(crate) fn snooze(&mut self) {
        if self.step < 16 {
            std::hint::spin_loop();
        } else if self.step < 32 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
        }
        self.step = self.step.saturating_add(1);
    }
}
