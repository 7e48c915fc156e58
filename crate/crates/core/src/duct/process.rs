//! Inter-process ducts over connectionless datagrams.
//!
//! One [`PeerLink`] owns the socket for a process pair. Every logical channel
//! and every consolidated pool between the pair is demultiplexed by its
//! 64-bit channel id. Delivery is best-effort: datagrams may vanish in
//! transit, and loss only shows up as absence on the receiving side.
//!
//! Each receive pass reads every datagram currently readable, orders them by
//! sequence number per channel, and releases them. A channel's next expected
//! sequence number only moves forward, so a datagram arriving after a newer
//! one was released is discarded as late. This gives in-order, at-most-once
//! delivery per channel.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::marker::PhantomData;
use std::net::{SocketAddr, UdpSocket};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{ChannelError, ChannelMessage, DuctRx, DuctTx, Enqueue};
use crate::wire::{
    self, Decoded, FrameKind, WireError, WirePayload, ENVELOPE_HEADER_LEN, MAX_PAYLOAD,
};

/// Fault injection applied to outgoing datagrams.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinkConfig {
    /// Probability that an outgoing datagram is silently discarded instead
    /// of being written to the socket.
    pub drop_probability: f64,
    pub seed: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LinkStats {
    /// Datagrams handed to the socket.
    pub wire_transfers: u64,
    pub injected_drops: u64,
    /// Sends the kernel refused because the peer was not listening.
    pub refused_sends: u64,
    pub datagrams_received: u64,
    /// Datagrams failing checksum or structural validation.
    pub corrupt_discards: u64,
    /// Duplicates and datagrams older than an already released one.
    pub stale_discards: u64,
    pub unroutable_discards: u64,
    pub messages_released: u64,
}

#[derive(Debug)]
struct RawMessage {
    sequence_number: u64,
    bundled_touch_count: u64,
    payload: Vec<u8>,
}

#[derive(Default)]
struct RxChannel {
    next_expected: u64,
    ready: VecDeque<RawMessage>,
}

struct ConsolidatedLayout {
    members: Vec<u64>,
    next_expected: u64,
}

struct TxQueue {
    capacity: usize,
    pending: VecDeque<Vec<u8>>,
    next_frame_sequence: u64,
}

enum Staged {
    Message(RawMessage),
    Frame(FrameKind, Vec<u8>),
}

struct LinkState {
    socket: UdpSocket,
    rx: HashMap<u64, RxChannel>,
    consolidated: HashMap<u64, ConsolidatedLayout>,
    tx: HashMap<u64, TxQueue>,
    fault: Option<(f64, ChaCha8Rng)>,
    sends_paused: bool,
    stats: LinkStats,
    recv_buf: Vec<u8>,
    staging: BTreeMap<(u64, u64), Staged>,
}

/// Socket and demultiplexing state for one process pair.
#[derive(Clone)]
pub struct PeerLink {
    state: Arc<Mutex<LinkState>>,
    local: SocketAddr,
}

impl PeerLink {
    /// Binds `local` and directs all sends at `peer`.
    pub fn bind(local: SocketAddr, peer: SocketAddr, config: LinkConfig) -> io::Result<Self> {
        let socket = UdpSocket::bind(local)?;
        socket.connect(peer)?;
        socket.set_nonblocking(true)?;
        let local = socket.local_addr()?;
        let fault = (config.drop_probability > 0.0)
            .then(|| (config.drop_probability, ChaCha8Rng::seed_from_u64(config.seed)));
        Ok(PeerLink {
            state: Arc::new(Mutex::new(LinkState {
                socket,
                rx: HashMap::new(),
                consolidated: HashMap::new(),
                tx: HashMap::new(),
                fault,
                sends_paused: false,
                stats: LinkStats::default(),
                recv_buf: vec![0; 64 * 1024],
                staging: BTreeMap::new(),
            })),
            local,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    fn lock(&self) -> MutexGuard<'_, LinkState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn stats(&self) -> LinkStats {
        self.lock().stats
    }

    /// Sending half of channel `channel_id` with a local send buffer of
    /// `capacity` datagrams.
    pub fn sender<T: WirePayload>(&self, channel_id: u64, capacity: usize) -> ProcessTx<T> {
        self.reserve_tx(channel_id, capacity);
        ProcessTx {
            link: self.clone(),
            channel_id,
            scratch: Vec::new(),
            _payload: PhantomData,
        }
    }

    pub fn receiver<T: WirePayload>(&self, channel_id: u64) -> ProcessRx<T> {
        self.lock().rx.entry(channel_id).or_default();
        ProcessRx {
            link: self.clone(),
            channel_id,
            _payload: PhantomData,
        }
    }

    /// Registers (or resizes) the local send buffer for `id`.
    pub fn reserve_tx(&self, id: u64, capacity: usize) {
        assert!(capacity > 0, "send buffer capacity must be positive");
        self.lock()
            .tx
            .entry(id)
            .and_modify(|q| q.capacity = capacity)
            .or_insert_with(|| TxQueue {
                capacity,
                pending: VecDeque::new(),
                next_frame_sequence: 0,
            });
    }

    /// Declares how consolidated frames arriving under `id` unpack: member
    /// slot `i` routes to channel `members[i]`.
    pub fn register_consolidated_rx(&self, id: u64, members: Vec<u64>) {
        let mut state = self.lock();
        for &m in &members {
            state.rx.entry(m).or_default();
        }
        state.consolidated.insert(
            id,
            ConsolidatedLayout {
                members,
                next_expected: 0,
            },
        );
    }

    /// Queues one consolidated frame on the send buffer for `id`. Returns
    /// `false` when the buffer is full and the frame was not queued.
    pub fn send_frame(&self, id: u64, kind: FrameKind, body: &[u8]) -> Result<bool, ChannelError> {
        let mut state = self.lock();
        state.flush(id)?;
        let queue = state
            .tx
            .get_mut(&id)
            .expect("send_frame on an id without a reserved send buffer");
        if queue.pending.len() >= queue.capacity {
            return Ok(false);
        }
        let mut bytes = Vec::new();
        wire::encode_frame(kind, id, queue.next_frame_sequence, body, &mut bytes)?;
        queue.next_frame_sequence += 1;
        queue.pending.push_back(bytes);
        state.flush(id)?;
        Ok(true)
    }

    /// Pushes pending datagrams to the socket and ingests everything
    /// readable.
    pub fn pump(&self) -> Result<(), ChannelError> {
        let mut state = self.lock();
        state.flush_all()?;
        state.ingest()
    }

    /// While paused the socket is treated as unwritable, so datagrams back
    /// up in the local send buffers as they would under kernel backpressure.
    pub fn set_sends_paused(&self, paused: bool) {
        self.lock().sends_paused = paused;
    }

    /// Number of datagrams waiting in the local send buffer for `id`.
    pub fn pending(&self, id: u64) -> usize {
        self.lock().tx.get(&id).map_or(0, |q| q.pending.len())
    }
}

impl LinkState {
    fn flush(&mut self, id: u64) -> Result<(), ChannelError> {
        if self.sends_paused {
            return Ok(());
        }
        let Some(queue) = self.tx.get_mut(&id) else {
            return Ok(());
        };
        while let Some(front) = queue.pending.front() {
            if let Some((p, rng)) = &mut self.fault {
                if rng.random_bool(*p) {
                    queue.pending.pop_front();
                    self.stats.injected_drops += 1;
                    continue;
                }
            }
            match self.socket.send(front) {
                Ok(_) => {
                    queue.pending.pop_front();
                    self.stats.wire_transfers += 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                    queue.pending.pop_front();
                    self.stats.refused_sends += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn flush_all(&mut self) -> Result<(), ChannelError> {
        let ids: Vec<u64> = self
            .tx
            .iter()
            .filter(|(_, q)| !q.pending.is_empty())
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.flush(id)?;
        }
        Ok(())
    }

    fn ingest(&mut self) -> Result<(), ChannelError> {
        loop {
            let n = match self.socket.recv(&mut self.recv_buf) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e.into()),
            };
            self.stats.datagrams_received += 1;
            let (key, staged) = match wire::decode(&self.recv_buf[..n]) {
                Ok(Decoded::Datagram(d)) => (
                    (d.channel_id, d.sequence_number),
                    Staged::Message(RawMessage {
                        sequence_number: d.sequence_number,
                        bundled_touch_count: d.bundled_touch_count,
                        payload: d.payload.to_vec(),
                    }),
                ),
                Ok(Decoded::Frame(f)) => (
                    (f.channel_id, f.sequence_number),
                    Staged::Frame(f.kind, f.body.to_vec()),
                ),
                Err(_) => {
                    self.stats.corrupt_discards += 1;
                    continue;
                }
            };
            if self.staging.insert(key, staged).is_some() {
                self.stats.stale_discards += 1;
            }
        }
        let staging = std::mem::take(&mut self.staging);
        for ((id, seq), staged) in staging {
            match staged {
                Staged::Message(msg) => self.release(id, msg),
                Staged::Frame(kind, body) => self.unpack(id, seq, kind, &body),
            }
        }
        Ok(())
    }

    fn release(&mut self, channel_id: u64, msg: RawMessage) {
        let channel = self.rx.entry(channel_id).or_default();
        if msg.sequence_number < channel.next_expected {
            self.stats.stale_discards += 1;
            return;
        }
        channel.next_expected = msg.sequence_number + 1;
        channel.ready.push_back(msg);
        self.stats.messages_released += 1;
    }

    fn unpack(&mut self, id: u64, seq: u64, kind: FrameKind, body: &[u8]) {
        let Some(layout) = self.consolidated.get_mut(&id) else {
            self.stats.unroutable_discards += 1;
            return;
        };
        if seq < layout.next_expected {
            self.stats.stale_discards += 1;
            return;
        }
        layout.next_expected = seq + 1;
        let routed = match kind {
            FrameKind::Pooled => unpack_pooled(&layout.members, body),
            FrameKind::Aggregated => unpack_aggregated(&layout.members, body),
        };
        match routed {
            Ok(messages) => {
                for (channel_id, msg) in messages {
                    self.release(channel_id, msg);
                }
            }
            Err(_) => self.stats.corrupt_discards += 1,
        }
    }
}

fn envelope(bytes: &[u8]) -> Result<RawMessage, WireError> {
    let (sequence_number, bundled_touch_count, payload) =
        wire::decode_envelope(bytes).ok_or(WireError::MalformedBody)?;
    Ok(RawMessage {
        sequence_number,
        bundled_touch_count,
        payload: payload.to_vec(),
    })
}

fn unpack_pooled(members: &[u64], body: &[u8]) -> Result<Vec<(u64, RawMessage)>, WireError> {
    if members.is_empty() || !body.len().is_multiple_of(members.len()) {
        return Err(WireError::MalformedBody);
    }
    let width = body.len() / members.len();
    if width < ENVELOPE_HEADER_LEN {
        return Err(WireError::MalformedBody);
    }
    members
        .iter()
        .zip(body.chunks_exact(width))
        .map(|(&id, chunk)| Ok((id, envelope(chunk)?)))
        .collect()
}

fn unpack_aggregated(members: &[u64], mut body: &[u8]) -> Result<Vec<(u64, RawMessage)>, WireError> {
    let mut out = Vec::new();
    while !body.is_empty() {
        if body.len() < 4 {
            return Err(WireError::MalformedBody);
        }
        let index = u16::from_le_bytes([body[0], body[1]]) as usize;
        let len = u16::from_le_bytes([body[2], body[3]]) as usize;
        let entry = body.get(4..4 + len).ok_or(WireError::MalformedBody)?;
        let id = *members.get(index).ok_or(WireError::MalformedBody)?;
        out.push((id, envelope(entry)?));
        body = &body[4 + len..];
    }
    Ok(out)
}

/// Sending half of a channel carried by a [`PeerLink`].
pub struct ProcessTx<T> {
    link: PeerLink,
    channel_id: u64,
    scratch: Vec<u8>,
    _payload: PhantomData<fn(T)>,
}

impl<T> ProcessTx<T> {
    pub fn channel_id(&self) -> u64 {
        self.channel_id
    }

    pub fn link(&self) -> &PeerLink {
        &self.link
    }
}

impl<T: WirePayload> DuctTx<T> for ProcessTx<T> {
    fn enqueue(&mut self, msg: ChannelMessage<T>) -> Result<Enqueue<T>, ChannelError> {
        self.scratch.clear();
        msg.payload.encode(&mut self.scratch);
        if self.scratch.len() > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge {
                len: self.scratch.len(),
                max: MAX_PAYLOAD,
            }
            .into());
        }
        let mut state = self.link.lock();
        state.flush(self.channel_id)?;
        let queue = state
            .tx
            .get_mut(&self.channel_id)
            .expect("sender registered its queue");
        if queue.pending.len() >= queue.capacity {
            return Ok(Enqueue::Full(msg));
        }
        let mut bytes = Vec::with_capacity(wire::DATAGRAM_HEADER_LEN + self.scratch.len());
        wire::encode_datagram(
            self.channel_id,
            msg.sequence_number,
            msg.bundled_touch_count,
            &self.scratch,
            &mut bytes,
        )?;
        queue.pending.push_back(bytes);
        state.flush(self.channel_id)?;
        Ok(Enqueue::Accepted)
    }

    fn is_closed(&self) -> bool {
        false
    }
}

/// Receiving half of a channel carried by a [`PeerLink`]. Also receives the
/// member traffic of consolidated pools registered on the link.
pub struct ProcessRx<T> {
    link: PeerLink,
    channel_id: u64,
    _payload: PhantomData<fn() -> T>,
}

impl<T> ProcessRx<T> {
    pub fn channel_id(&self) -> u64 {
        self.channel_id
    }

    pub fn link(&self) -> &PeerLink {
        &self.link
    }
}

impl<T: WirePayload> DuctRx<T> for ProcessRx<T> {
    fn drain(
        &mut self,
        max: Option<usize>,
        out: &mut Vec<ChannelMessage<T>>,
    ) -> Result<usize, ChannelError> {
        let mut state = self.link.lock();
        state.flush_all()?;
        state.ingest()?;
        let LinkState { rx, stats, .. } = &mut *state;
        let channel = rx.entry(self.channel_id).or_default();
        let mut moved = 0;
        while max.is_none_or(|m| moved < m) {
            let Some(raw) = channel.ready.pop_front() else {
                break;
            };
            match T::decode(&raw.payload) {
                Some(payload) => {
                    out.push(ChannelMessage {
                        payload,
                        bundled_touch_count: raw.bundled_touch_count,
                        sequence_number: raw.sequence_number,
                    });
                    moved += 1;
                }
                None => stats.corrupt_discards += 1,
            }
        }
        Ok(moved)
    }

    fn is_closed(&self) -> bool {
        false
    }
}

/// Two links on loopback pointed at each other; the first gets `config`.
pub fn loopback_pair(config: LinkConfig) -> io::Result<(PeerLink, PeerLink)> {
    let any: SocketAddr = (std::net::Ipv4Addr::LOCALHOST, 0).into();
    let a = UdpSocket::bind(any)?;
    let b = UdpSocket::bind(any)?;
    let (a_addr, b_addr) = (a.local_addr()?, b.local_addr()?);
    drop((a, b));
    Ok((
        PeerLink::bind(a_addr, b_addr, config)?,
        PeerLink::bind(b_addr, a_addr, LinkConfig::default())?,
    ))
}
