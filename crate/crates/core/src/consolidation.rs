//! Consolidation of many logical channels between one process pair into
//! single wire transfers.
//!
//! A [`ChannelPool`] holds exactly one staged message per member channel and
//! ships them all as one fixed-size frame once every slot is filled. A
//! [`ChannelAggregator`] ships any number of tagged messages per member in a
//! variable-size frame. Both leave per-channel send accounting to dispatch
//! time, so a dropped consolidated transfer shows up as one failed send on
//! every member it carried.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::rc::Rc;
use std::sync::Arc;

use crate::channel::{ChannelError, ChannelMessage, DuctTx, Enqueue, Inlet, InletCounters};
use crate::duct::PeerLink;
use crate::wire::{self, FrameKind, WireError, WirePayload, MAX_PAYLOAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Staged,
    /// An earlier staged message for the slot was overwritten.
    Replaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushOutcome {
    Flushed,
    Incomplete { missing: usize },
}

/// Fixed-size consolidation: one message per member per transfer.
pub struct ChannelPool {
    id: u64,
    link: PeerLink,
    slots: Vec<Option<Vec<u8>>>,
    counters: Vec<Option<Arc<InletCounters>>>,
    staged: usize,
    body: Vec<u8>,
}

pub type SharedPool = Rc<RefCell<ChannelPool>>;

impl ChannelPool {
    /// `id` names the pool on the wire; the receiving link must register the
    /// same id with the member channel ids in the same slot order.
    pub fn new(link: PeerLink, id: u64, members: usize, capacity: usize) -> Self {
        assert!(members > 0, "a pool needs at least one member");
        link.reserve_tx(id, capacity);
        ChannelPool {
            id,
            link,
            slots: vec![None; members],
            counters: vec![None; members],
            staged: 0,
            body: Vec::new(),
        }
    }

    pub fn shared(self) -> SharedPool {
        Rc::new(RefCell::new(self))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn members(&self) -> usize {
        self.slots.len()
    }

    pub fn link(&self) -> &PeerLink {
        &self.link
    }

    /// Counters charged for the member's share of each dispatched transfer.
    pub fn attach_counters(&mut self, member: usize, counters: Arc<InletCounters>) {
        self.counters[member] = Some(counters);
    }

    /// Stages an encoded envelope for `member`. Latest wins until flush.
    pub fn offer(&mut self, member: usize, envelope: &[u8]) -> Offer {
        let slot = &mut self.slots[member];
        match slot {
            Some(existing) => {
                existing.clear();
                existing.extend_from_slice(envelope);
                Offer::Replaced
            }
            None => {
                *slot = Some(envelope.to_vec());
                self.staged += 1;
                Offer::Staged
            }
        }
    }

    /// Dispatches one transfer if every slot is staged. A full send buffer
    /// drops the whole transfer, charges one failed send to every member, and
    /// returns [`ChannelError::DuctFull`].
    pub fn try_flush(&mut self) -> Result<FlushOutcome, ChannelError> {
        let missing = self.slots.len() - self.staged;
        if missing > 0 {
            return Ok(FlushOutcome::Incomplete { missing });
        }
        self.body.clear();
        let width = self.slots[0].as_ref().map_or(0, Vec::len);
        for slot in &self.slots {
            let bytes = slot.as_deref().expect("all slots staged");
            if bytes.len() != width {
                self.clear();
                return Err(WireError::MalformedBody.into());
            }
            self.body.extend_from_slice(bytes);
        }
        if self.body.len() > MAX_PAYLOAD {
            self.clear();
            return Err(WireError::PayloadTooLarge {
                len: self.body.len(),
                max: MAX_PAYLOAD,
            }
            .into());
        }
        let sent = self.link.send_frame(self.id, FrameKind::Pooled, &self.body);
        self.clear();
        let sent = sent?;
        for c in self.counters.iter().flatten() {
            c.record_send(sent);
        }
        if sent {
            Ok(FlushOutcome::Flushed)
        } else {
            Err(ChannelError::DuctFull)
        }
    }

    fn clear(&mut self) {
        for slot in &mut self.slots {
            *slot = None;
        }
        self.staged = 0;
    }
}

/// Duct half that stages into a shared pool slot.
pub struct PooledTx<T> {
    pool: SharedPool,
    member: usize,
    scratch: Vec<u8>,
    _payload: PhantomData<fn(T)>,
}

impl<T> PooledTx<T> {
    pub fn pool(&self) -> &SharedPool {
        &self.pool
    }
}

impl<T: WirePayload> DuctTx<T> for PooledTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        self.scratch.clear();
        let mut payload = Vec::new();
        msg.payload.encode(&mut payload);
        wire::encode_envelope(msg.sequence_number, msg.bundled_touch_count, &payload, &mut self.scratch);
        self.pool.borrow_mut().offer(self.member, &self.scratch);
        Ok(Enqueue::Deferred)
    }

    fn is_closed(&self) -> bool {
        false
    }
}

/// Duct half staging into slot `member`. The caller attaches the owning
/// inlet's counters to the pool; [`pooled_inlet`] does both.
pub fn pooled_tx<T>(pool: &SharedPool, member: usize) -> PooledTx<T> {
    PooledTx {
        pool: pool.clone(),
        member,
        scratch: Vec::new(),
        _payload: PhantomData,
    }
}

/// An inlet whose sends stage into slot `member` of `pool`.
pub fn pooled_inlet<T: WirePayload>(pool: &SharedPool, member: usize) -> Inlet<T, PooledTx<T>> {
    let inlet = Inlet::new(pooled_tx(pool, member));
    pool.borrow_mut()
        .attach_counters(member, inlet.counters().clone());
    inlet
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateFlush {
    pub frames: usize,
    pub messages: usize,
}

/// Variable-size consolidation: any number of tagged messages per member.
pub struct ChannelAggregator {
    id: u64,
    link: PeerLink,
    staged: Vec<Vec<Vec<u8>>>,
    counters: Vec<Option<Arc<InletCounters>>>,
}

pub type SharedAggregator = Rc<RefCell<ChannelAggregator>>;

const AGGREGATE_ENTRY_HEADER: usize = 4;

impl ChannelAggregator {
    pub fn new(link: PeerLink, id: u64, members: usize, capacity: usize) -> Self {
        assert!(
            members > 0 && members <= usize::from(u16::MAX) + 1,
            "member index must fit in two bytes"
        );
        link.reserve_tx(id, capacity);
        ChannelAggregator {
            id,
            link,
            staged: vec![Vec::new(); members],
            counters: vec![None; members],
        }
    }

    pub fn shared(self) -> SharedAggregator {
        Rc::new(RefCell::new(self))
    }

    pub fn attach_counters(&mut self, member: usize, counters: Arc<InletCounters>) {
        self.counters[member] = Some(counters);
    }

    pub fn stage(&mut self, member: usize, envelope: &[u8]) {
        self.staged[member].push(envelope.to_vec());
    }

    /// Splits staged messages, in member order, into the fewest frames that
    /// respect the datagram cap.
    fn partition(&self) -> Result<Vec<(Vec<u8>, Vec<usize>)>, WireError> {
        let mut frames = Vec::new();
        let mut body = Vec::new();
        let mut carried = Vec::new();
        for (member, envelopes) in self.staged.iter().enumerate() {
            for env in envelopes {
                let entry = AGGREGATE_ENTRY_HEADER + env.len();
                if entry > MAX_PAYLOAD {
                    return Err(WireError::PayloadTooLarge {
                        len: entry,
                        max: MAX_PAYLOAD,
                    });
                }
                if body.len() + entry > MAX_PAYLOAD {
                    frames.push((std::mem::take(&mut body), std::mem::take(&mut carried)));
                }
                body.extend_from_slice(&(member as u16).to_le_bytes());
                body.extend_from_slice(&(env.len() as u16).to_le_bytes());
                body.extend_from_slice(env);
                carried.push(member);
            }
        }
        if !carried.is_empty() {
            frames.push((body, carried));
        }
        Ok(frames)
    }

    /// Ships everything staged. Nothing staged means no transfer.
    pub fn flush(&mut self) -> Result<AggregateFlush, ChannelError> {
        let frames = self.partition();
        for s in &mut self.staged {
            s.clear();
        }
        let frames = frames?;
        let mut dropped = false;
        let mut outcome = AggregateFlush {
            frames: 0,
            messages: 0,
        };
        for (body, carried) in &frames {
            let sent = self.link.send_frame(self.id, FrameKind::Aggregated, body)?;
            dropped |= !sent;
            for &member in carried {
                if let Some(c) = &self.counters[member] {
                    c.record_send(sent);
                }
            }
            if sent {
                outcome.frames += 1;
                outcome.messages += carried.len();
            }
        }
        if dropped {
            Err(ChannelError::DuctFull)
        } else {
            Ok(outcome)
        }
    }
}

pub struct AggregatedTx<T> {
    agg: SharedAggregator,
    member: usize,
    scratch: Vec<u8>,
    _payload: PhantomData<fn(T)>,
}

impl<T: WirePayload> DuctTx<T> for AggregatedTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        self.scratch.clear();
        let mut payload = Vec::new();
        msg.payload.encode(&mut payload);
        wire::encode_envelope(msg.sequence_number, msg.bundled_touch_count, &payload, &mut self.scratch);
        self.agg.borrow_mut().stage(self.member, &self.scratch);
        Ok(Enqueue::Deferred)
    }

    fn is_closed(&self) -> bool {
        false
    }
}

pub fn aggregated_inlet<T: WirePayload>(
    agg: &SharedAggregator,
    member: usize,
) -> Inlet<T, AggregatedTx<T>> {
    let inlet = Inlet::new(AggregatedTx {
        agg: agg.clone(),
        member,
        scratch: Vec::new(),
        _payload: PhantomData,
    });
    agg.borrow_mut()
        .attach_counters(member, inlet.counters().clone());
    inlet
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{DuctRx, Outlet, PutOutcome};
    use crate::duct::{loopback_pair, LinkConfig, ProcessRx};
    use std::time::{Duration, Instant};

    fn env(seq: u64, payload: u32) -> Vec<u8> {
        let mut out = Vec::new();
        wire::encode_envelope(seq, 0, &payload.to_le_bytes(), &mut out);
        out
    }

    fn settle<T: WirePayload>(rx: &mut ProcessRx<T>, want: usize) -> Vec<ChannelMessage<T>> {
        let deadline = Instant::now() + Duration::from_secs(5);
        let mut out = Vec::new();
        while out.len() < want && Instant::now() < deadline {
            rx.drain(None, &mut out).unwrap();
            std::thread::sleep(Duration::from_micros(200));
        }
        out
    }

    #[test]
    fn offer_stages_then_replaces() {
        let (a, _b) = loopback_pair(LinkConfig::default()).unwrap();
        let mut pool = ChannelPool::new(a, 1 << 63, 2, 4);
        assert_eq!(pool.offer(0, &env(0, 1)), Offer::Staged);
        assert_eq!(pool.offer(0, &env(1, 2)), Offer::Replaced);
        assert_eq!(pool.try_flush().unwrap(), FlushOutcome::Incomplete { missing: 1 });
        assert_eq!(pool.offer(1, &env(0, 3)), Offer::Staged);
        assert_eq!(pool.try_flush().unwrap(), FlushOutcome::Flushed);
        assert_eq!(pool.offer(0, &env(2, 4)), Offer::Staged);
    }

    #[test]
    fn incomplete_reports_missing_count() {
        let (a, _b) = loopback_pair(LinkConfig::default()).unwrap();
        let mut pool = ChannelPool::new(a.clone(), 9, 4, 4);
        for m in 0..3 {
            pool.offer(m, &env(0, m as u32));
        }
        assert_eq!(pool.try_flush().unwrap(), FlushOutcome::Incomplete { missing: 1 });
        assert_eq!(a.stats().wire_transfers, 0);
        pool.offer(3, &env(0, 3));
        assert_eq!(pool.try_flush().unwrap(), FlushOutcome::Flushed);
        assert_eq!(a.stats().wire_transfers, 1);
    }

    #[test]
    fn one_transfer_per_update_regardless_of_member_count() {
        for members in [1usize, 4, 16, 64] {
            let (a, b) = loopback_pair(LinkConfig::default()).unwrap();
            let pool = ChannelPool::new(a.clone(), 77, members, 64).shared();
            let mut inlets: Vec<_> = (0..members).map(|m| pooled_inlet::<u32>(&pool, m)).collect();
            let ids: Vec<u64> = (0..members as u64).map(|m| 1000 + m).collect();
            b.register_consolidated_rx(77, ids.clone());
            let mut outlets: Vec<_> = ids
                .iter()
                .map(|&id| Outlet::new(b.receiver::<u32>(id), u32::MAX))
                .collect();

            let updates = 25;
            for k in 0..updates {
                for (m, inlet) in inlets.iter_mut().enumerate() {
                    assert_eq!(inlet.try_put((k * 1000 + m) as u32).unwrap(), PutOutcome::Queued);
                }
                assert_eq!(pool.borrow_mut().try_flush().unwrap(), FlushOutcome::Flushed);
            }
            assert_eq!(a.stats().wire_transfers, updates as u64, "members={members}");

            std::thread::sleep(Duration::from_millis(20));
            for (m, outlet) in outlets.iter_mut().enumerate() {
                let deadline = Instant::now() + Duration::from_secs(5);
                while outlet.last_sequence() != Some(updates as u64 - 1) && Instant::now() < deadline {
                    outlet.jump().unwrap();
                }
                assert_eq!(*outlet.last_received(), ((updates - 1) * 1000 + m) as u32);
            }
            for inlet in &inlets {
                let c = inlet.counters().read();
                assert_eq!((c.attempted_send_count, c.successful_send_count), (25, 25));
            }
        }
    }

    #[test]
    fn dropped_pool_transfer_charges_every_member() {
        let (a, _b) = loopback_pair(LinkConfig::default()).unwrap();
        let pool = ChannelPool::new(a.clone(), 5, 3, 1).shared();
        let mut inlets: Vec<_> = (0..3).map(|m| pooled_inlet::<u32>(&pool, m)).collect();
        a.set_sends_paused(true);
        let mut fill = Vec::new();
        for _ in 0..3 {
            wire::encode_envelope(0, 0, &[0; 4], &mut fill);
        }
        assert!(a.send_frame(5, FrameKind::Pooled, &fill).unwrap());
        for inlet in &mut inlets {
            inlet.try_put(1).unwrap();
        }
        assert!(matches!(pool.borrow_mut().try_flush(), Err(ChannelError::DuctFull)));
        for inlet in &inlets {
            let c = inlet.counters().read();
            assert_eq!((c.attempted_send_count, c.successful_send_count), (1, 0));
        }
    }

    #[test]
    fn aggregate_routes_tagged_messages() {
        let (a, b) = loopback_pair(LinkConfig::default()).unwrap();
        let agg = ChannelAggregator::new(a.clone(), 42, 3, 8).shared();
        let mut inlets: Vec<_> = (0..3).map(|m| aggregated_inlet::<u32>(&agg, m)).collect();
        b.register_consolidated_rx(42, vec![10, 11, 12]);
        let mut rxs: Vec<_> = [10, 11, 12].iter().map(|&id| b.receiver::<u32>(id)).collect();

        inlets[1].try_put(100).unwrap();
        inlets[1].try_put(101).unwrap();
        inlets[2].try_put(200).unwrap();
        let out = agg.borrow_mut().flush().unwrap();
        assert_eq!(out, AggregateFlush { frames: 1, messages: 3 });
        assert_eq!(a.stats().wire_transfers, 1);

        let got1 = settle(&mut rxs[1], 2);
        assert_eq!(got1.iter().map(|m| m.payload).collect::<Vec<_>>(), [100, 101]);
        let got2 = settle(&mut rxs[2], 1);
        assert_eq!(got2[0].payload, 200);
        let mut none = Vec::new();
        rxs[0].drain(None, &mut none).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn empty_aggregate_sends_nothing() {
        let (a, _b) = loopback_pair(LinkConfig::default()).unwrap();
        let mut agg = ChannelAggregator::new(a.clone(), 1, 2, 8);
        assert_eq!(agg.flush().unwrap(), AggregateFlush { frames: 0, messages: 0 });
        assert_eq!(a.stats().wire_transfers, 0);
    }

    #[test]
    fn oversize_aggregate_splits_in_member_order() {
        let (a, b) = loopback_pair(LinkConfig::default()).unwrap();
        let agg = ChannelAggregator::new(a.clone(), 2, 2, 8).shared();
        let mut i0 = aggregated_inlet::<Vec<u8>>(&agg, 0);
        let mut i1 = aggregated_inlet::<Vec<u8>>(&agg, 1);
        // Each entry is 4 + 16 + 600 = 620 bytes; three exceed 1400.
        i0.try_put(vec![0xa0; 600]).unwrap();
        i0.try_put(vec![0xa1; 600]).unwrap();
        i1.try_put(vec![0xb0; 600]).unwrap();
        let out = agg.borrow_mut().flush().unwrap();
        assert_eq!(out, AggregateFlush { frames: 2, messages: 3 });
        assert_eq!(a.stats().wire_transfers, 2);

        b.register_consolidated_rx(2, vec![20, 21]);
        let mut r0 = b.receiver::<Vec<u8>>(20);
        let mut r1 = b.receiver::<Vec<u8>>(21);
        let got0 = settle(&mut r0, 2);
        let got1 = settle(&mut r1, 1);
        assert_eq!(got0.iter().map(|m| m.payload[0]).collect::<Vec<_>>(), [0xa0, 0xa1]);
        assert_eq!(got1[0].payload[0], 0xb0);
    }

    #[test]
    fn oversize_single_entry_rejected() {
        let (a, _b) = loopback_pair(LinkConfig::default()).unwrap();
        let mut agg = ChannelAggregator::new(a, 2, 1, 8);
        agg.stage(0, &vec![0; MAX_PAYLOAD]);
        assert!(matches!(
            agg.flush(),
            Err(ChannelError::Wire(WireError::PayloadTooLarge { .. }))
        ));
    }
}
