//! Reliable barrier and gather across processes over UDP.
//!
//! Rank 0 is the root. Other ranks retransmit `Arrive` until the root's
//! `Release` for that generation comes back, so the barrier survives lost
//! datagrams. Gathers are stop-and-wait per chunk with acknowledgments.

use std::collections::HashSet;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, UdpSocket};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::{Release, SyncBarrier, SyncError};

const MAGIC: &[u8; 4] = b"BECT";
const HEADER_LEN: usize = 4 + 1 + 4 + 8 + 8 + 1 + 4;
const CHUNK: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Arrive = 0,
    Release = 1,
    Chunk = 2,
    Ack = 3,
    Abort = 4,
    Done = 5,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Kind> {
        Some(match v {
            0 => Kind::Arrive,
            1 => Kind::Release,
            2 => Kind::Chunk,
            3 => Kind::Ack,
            4 => Kind::Abort,
            5 => Kind::Done,
            _ => return None,
        })
    }
}

/// `a` and `b` are kind-specific: generation and root timestamp for
/// barrier messages, gather tag and chunk index / chunk total for gathers.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Msg {
    kind: Kind,
    rank: u32,
    a: u64,
    b: u64,
    flag: u8,
    data: Vec<u8>,
}

impl Msg {
    fn new(kind: Kind, rank: u32, a: u64, b: u64, flag: u8) -> Msg {
        Msg {
            kind,
            rank,
            a,
            b,
            flag,
            data: Vec::new(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.a.to_le_bytes());
        out.extend_from_slice(&self.b.to_le_bytes());
        out.push(self.flag);
        out.extend_from_slice(&self.data);
        let crc = crc32fast::hash(&out);
        out.splice(HEADER_LEN - 4..HEADER_LEN - 4, crc.to_le_bytes());
        out
    }

    fn decode(buf: &[u8]) -> Option<Msg> {
        if buf.len() < HEADER_LEN || &buf[..4] != MAGIC {
            return None;
        }
        let crc = u32::from_le_bytes(buf[HEADER_LEN - 4..HEADER_LEN].try_into().ok()?);
        let mut body = buf[..HEADER_LEN - 4].to_vec();
        body.extend_from_slice(&buf[HEADER_LEN..]);
        if crc32fast::hash(&body) != crc {
            return None;
        }
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        Some(Msg {
            kind: Kind::from_u8(buf[4])?,
            rank: u32::from_le_bytes(buf[5..9].try_into().unwrap()),
            a: u64_at(9),
            b: u64_at(17),
            flag: buf[25],
            data: buf[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NetBarrierConfig {
    /// Control address of every rank, indexed by rank.
    pub addrs: Vec<SocketAddr>,
    pub rank: usize,
    pub retry: Duration,
    /// Upper bound on any single barrier or gather.
    pub timeout: Duration,
    /// How long the root keeps answering stragglers in [`NetBarrier::finish`].
    pub linger: Duration,
}

impl NetBarrierConfig {
    pub fn new(addrs: Vec<SocketAddr>, rank: usize) -> Self {
        NetBarrierConfig {
            addrs,
            rank,
            retry: Duration::from_millis(10),
            timeout: Duration::from_secs(120),
            linger: Duration::from_secs(2),
        }
    }
}

struct Inner {
    socket: UdpSocket,
    generation: u64,
    last_release: Option<(u64, bool, u64)>,
    gather_tag: u64,
    broken: bool,
    buf: Vec<u8>,
}

pub struct NetBarrier {
    config: NetBarrierConfig,
    inner: Mutex<Inner>,
}

fn unix_nanos() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn transport(e: io::Error) -> SyncError {
    SyncError::Transport(e.to_string())
}

impl NetBarrier {
    pub fn bind(config: NetBarrierConfig) -> Result<Self, SyncError> {
        if config.rank >= config.addrs.len() {
            return Err(SyncError::Transport(format!(
                "rank {} outside peer list of {}",
                config.rank,
                config.addrs.len()
            )));
        }
        let socket = UdpSocket::bind(config.addrs[config.rank]).map_err(transport)?;
        Self::from_socket(config, socket)
    }

    /// Uses an already bound socket; the address at `config.rank` is
    /// ignored.
    pub fn from_socket(config: NetBarrierConfig, socket: UdpSocket) -> Result<Self, SyncError> {
        socket
            .set_read_timeout(Some(config.retry))
            .map_err(transport)?;
        Ok(NetBarrier {
            config,
            inner: Mutex::new(Inner {
                socket,
                generation: 0,
                last_release: None,
                gather_tag: 0,
                broken: false,
                buf: vec![0u8; 65536],
            }),
        })
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn size(&self) -> usize {
        self.config.addrs.len()
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.lock().socket.local_addr()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn root(&self) -> SocketAddr {
        self.config.addrs[0]
    }

    fn send(inner: &Inner, to: SocketAddr, msg: &Msg) -> Result<(), SyncError> {
        match inner.socket.send_to(&msg.encode(), to) {
            Ok(_) => Ok(()),
            // A peer that is not up yet; retransmission covers it.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => Ok(()),
            Err(e) => Err(transport(e)),
        }
    }

    fn recv(inner: &mut Inner) -> Result<Option<(Msg, SocketAddr)>, SyncError> {
        let Inner { socket, buf, .. } = inner;
        match socket.recv_from(buf) {
            Ok((n, from)) => Ok(Msg::decode(&buf[..n]).map(|m| (m, from))),
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::ConnectionRefused
                ) =>
            {
                Ok(None)
            }
            Err(e) => Err(transport(e)),
        }
    }

    /// Root-side replies to retransmissions from ranks that missed an
    /// earlier release or acknowledgment.
    fn answer_stale(&self, inner: &mut Inner, msg: &Msg) -> Result<(), SyncError> {
        let to = match self.config.addrs.get(msg.rank as usize) {
            Some(&a) => a,
            None => return Ok(()),
        };
        match msg.kind {
            Kind::Arrive => {
                if let Some((g, stop, stamp)) = inner.last_release {
                    if msg.a == g {
                        Self::send(inner, to, &Msg::new(Kind::Release, 0, g, stamp, stop as u8))?;
                    }
                }
            }
            Kind::Chunk if msg.a < inner.gather_tag => {
                Self::send(inner, to, &Msg::new(Kind::Ack, 0, msg.a, msg.b, 0))?;
            }
            Kind::Abort => self.broadcast_abort(inner),
            _ => {}
        }
        Ok(())
    }

    fn broadcast_abort(&self, inner: &mut Inner) {
        inner.broken = true;
        let me = self.config.rank as u32;
        let targets: Vec<SocketAddr> = if self.config.rank == 0 {
            self.config.addrs[1..].to_vec()
        } else {
            vec![self.root()]
        };
        for _ in 0..3 {
            for &t in &targets {
                let _ = Self::send(inner, t, &Msg::new(Kind::Abort, me, 0, 0, 0));
            }
        }
    }

    /// Barrier that also returns the root's wall-clock time at release, in
    /// nanoseconds since the Unix epoch.
    pub fn wait_stamped(&self, stop_vote: bool) -> Result<(Release, u64), SyncError> {
        let mut inner = self.lock();
        if inner.broken {
            return Err(SyncError::BarrierBroken);
        }
        let generation = inner.generation;
        let deadline = Instant::now() + self.config.timeout;
        let result = if self.config.rank == 0 {
            self.root_wait(&mut inner, generation, stop_vote, deadline)
        } else {
            self.member_wait(&mut inner, generation, stop_vote, deadline)
        };
        if result.is_ok() {
            inner.generation += 1;
        }
        result
    }

    fn root_wait(
        &self,
        inner: &mut Inner,
        generation: u64,
        mut stop: bool,
        deadline: Instant,
    ) -> Result<(Release, u64), SyncError> {
        let mut arrived: HashSet<u32> = HashSet::from([0]);
        while arrived.len() < self.size() {
            if Instant::now() >= deadline {
                return Err(SyncError::Timeout);
            }
            let Some((msg, _)) = Self::recv(inner)? else {
                continue;
            };
            match msg.kind {
                Kind::Arrive if msg.a == generation => {
                    if (msg.rank as usize) < self.size() {
                        arrived.insert(msg.rank);
                        stop |= msg.flag != 0;
                    }
                }
                Kind::Abort => {
                    self.broadcast_abort(inner);
                    return Err(SyncError::BarrierBroken);
                }
                _ => self.answer_stale(inner, &msg)?,
            }
        }
        let stamp = unix_nanos();
        inner.last_release = Some((generation, stop, stamp));
        for &to in &self.config.addrs[1..] {
            Self::send(inner, to, &Msg::new(Kind::Release, 0, generation, stamp, stop as u8))?;
        }
        Ok((Release { generation, stop }, stamp))
    }

    fn member_wait(
        &self,
        inner: &mut Inner,
        generation: u64,
        stop: bool,
        deadline: Instant,
    ) -> Result<(Release, u64), SyncError> {
        let me = self.config.rank as u32;
        let arrive = Msg::new(Kind::Arrive, me, generation, 0, stop as u8);
        let mut next_send = Instant::now();
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(SyncError::Timeout);
            }
            if now >= next_send {
                Self::send(inner, self.root(), &arrive)?;
                next_send = now + self.config.retry;
            }
            let Some((msg, _)) = Self::recv(inner)? else {
                continue;
            };
            match msg.kind {
                Kind::Release if msg.a == generation => {
                    return Ok((
                        Release {
                            generation,
                            stop: msg.flag != 0,
                        },
                        msg.b,
                    ));
                }
                Kind::Abort => {
                    inner.broken = true;
                    return Err(SyncError::BarrierBroken);
                }
                _ => {}
            }
        }
    }

    /// Collects `data` from every rank at the root. The root gets
    /// `Some(per_rank)`, other ranks get `None` once the root has
    /// acknowledged all of their chunks. Every rank must call this in the
    /// same order.
    pub fn gather(&self, data: &[u8]) -> Result<Option<Vec<Vec<u8>>>, SyncError> {
        let mut inner = self.lock();
        if inner.broken {
            return Err(SyncError::BarrierBroken);
        }
        let tag = inner.gather_tag;
        let deadline = Instant::now() + self.config.timeout;
        let result = if self.config.rank == 0 {
            self.root_gather(&mut inner, tag, data, deadline).map(Some)
        } else {
            self.member_gather(&mut inner, tag, data, deadline).map(|_| None)
        };
        inner.gather_tag += 1;
        result
    }

    fn root_gather(
        &self,
        inner: &mut Inner,
        tag: u64,
        own: &[u8],
        deadline: Instant,
    ) -> Result<Vec<Vec<u8>>, SyncError> {
        let n = self.size();
        // Per rank: received chunks and expected total.
        let mut parts: Vec<Vec<Option<Vec<u8>>>> = vec![Vec::new(); n];
        let mut complete = vec![false; n];
        complete[0] = true;
        while complete.iter().any(|c| !c) {
            if Instant::now() >= deadline {
                return Err(SyncError::Timeout);
            }
            let Some((msg, _)) = Self::recv(inner)? else {
                continue;
            };
            let rank = msg.rank as usize;
            match msg.kind {
                Kind::Chunk if msg.a == tag && rank > 0 && rank < n => {
                    let (index, total) = ((msg.b >> 32) as usize, (msg.b & 0xffff_ffff) as usize);
                    if index >= total {
                        continue;
                    }
                    if parts[rank].is_empty() {
                        parts[rank] = vec![None; total];
                    }
                    if total == parts[rank].len() {
                        parts[rank][index] = Some(msg.data);
                        complete[rank] = parts[rank].iter().all(Option::is_some);
                        let to = self.config.addrs[rank];
                        Self::send(inner, to, &Msg::new(Kind::Ack, 0, tag, msg.b, 0))?;
                    }
                }
                Kind::Abort => {
                    self.broadcast_abort(inner);
                    return Err(SyncError::BarrierBroken);
                }
                _ => self.answer_stale(inner, &msg)?,
            }
        }
        let mut out = Vec::with_capacity(n);
        out.push(own.to_vec());
        for p in parts.into_iter().skip(1) {
            out.push(p.into_iter().flatten().flatten().collect());
        }
        Ok(out)
    }

    fn member_gather(
        &self,
        inner: &mut Inner,
        tag: u64,
        data: &[u8],
        deadline: Instant,
    ) -> Result<(), SyncError> {
        let me = self.config.rank as u32;
        let chunks: Vec<&[u8]> = if data.is_empty() {
            vec![&[]]
        } else {
            data.chunks(CHUNK).collect()
        };
        let total = chunks.len() as u64;
        for (i, chunk) in chunks.iter().enumerate() {
            let id = (i as u64) << 32 | total;
            let mut msg = Msg::new(Kind::Chunk, me, tag, id, 0);
            msg.data = chunk.to_vec();
            let mut next_send = Instant::now();
            loop {
                let now = Instant::now();
                if now >= deadline {
                    return Err(SyncError::Timeout);
                }
                if now >= next_send {
                    Self::send(inner, self.root(), &msg)?;
                    next_send = now + self.config.retry;
                }
                match Self::recv(inner)? {
                    Some((ack, _)) if ack.kind == Kind::Ack && ack.a == tag && ack.b == id => break,
                    Some((m, _)) if m.kind == Kind::Abort => {
                        inner.broken = true;
                        return Err(SyncError::BarrierBroken);
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Root: keeps answering retransmissions until every rank reports done
    /// or the linger time runs out. Other ranks: announce completion.
    pub fn finish(&self) -> Result<(), SyncError> {
        let mut inner = self.lock();
        let me = self.config.rank as u32;
        if self.config.rank != 0 {
            for _ in 0..3 {
                Self::send(&inner, self.root(), &Msg::new(Kind::Done, me, 0, 0, 0))?;
            }
            return Ok(());
        }
        let deadline = Instant::now() + self.config.linger;
        let mut done: HashSet<u32> = HashSet::from([0]);
        while done.len() < self.size() && Instant::now() < deadline {
            if let Some((msg, _)) = Self::recv(&mut inner)? {
                if msg.kind == Kind::Done {
                    done.insert(msg.rank);
                } else {
                    self.answer_stale(&mut inner, &msg)?;
                }
            }
        }
        Ok(())
    }
}

impl SyncBarrier for NetBarrier {
    fn wait(&self, stop_vote: bool) -> Result<Release, SyncError> {
        self.wait_stamped(stop_vote).map(|(r, _)| r)
    }

    fn abandon(&self) {
        let mut inner = self.lock();
        self.broadcast_abort(&mut inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{Ipv4Addr, SocketAddrV4};
    use std::sync::Arc;
    use std::thread;

    fn group(n: usize) -> Vec<NetBarrier> {
        let sockets: Vec<UdpSocket> = (0..n)
            .map(|_| UdpSocket::bind(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0)).unwrap())
            .collect();
        let addrs: Vec<SocketAddr> = sockets.iter().map(|s| s.local_addr().unwrap()).collect();
        sockets
            .into_iter()
            .enumerate()
            .map(|(r, s)| {
                let mut config = NetBarrierConfig::new(addrs.clone(), r);
                config.timeout = Duration::from_secs(20);
                config.linger = Duration::from_millis(500);
                NetBarrier::from_socket(config, s).unwrap()
            })
            .collect()
    }

    #[test]
    fn message_round_trip_and_corruption() {
        let mut m = Msg::new(Kind::Chunk, 3, 7, 9, 1);
        m.data = b"hello".to_vec();
        let bytes = m.encode();
        assert_eq!(Msg::decode(&bytes), Some(m));
        let mut bad = bytes.clone();
        bad[HEADER_LEN] ^= 1;
        assert_eq!(Msg::decode(&bad), None);
        assert_eq!(Msg::decode(&bytes[..HEADER_LEN - 1]), None);
    }

    #[test]
    fn generations_advance_in_lockstep() {
        let barriers = group(3);
        let handles: Vec<_> = barriers
            .into_iter()
            .enumerate()
            .map(|(r, b)| {
                thread::spawn(move || {
                    let mut out = Vec::new();
                    for g in 0..30u64 {
                        if r == 2 {
                            thread::sleep(Duration::from_micros(200));
                        }
                        let rel = b.wait(r == 1 && g == 29).unwrap();
                        out.push((rel.generation, rel.stop));
                    }
                    b.finish().unwrap();
                    out
                })
            })
            .collect();
        for h in handles {
            let seen = h.join().unwrap();
            assert_eq!(seen.len(), 30);
            for (g, (gen, stop)) in seen.into_iter().enumerate() {
                assert_eq!(gen, g as u64);
                assert_eq!(stop, g == 29);
            }
        }
    }

    #[test]
    fn stamps_agree_across_ranks() {
        let barriers = group(2);
        let handles: Vec<_> = barriers
            .into_iter()
            .map(|b| thread::spawn(move || b.wait_stamped(false).map(|(_, s)| s).unwrap()))
            .collect();
        let stamps: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(stamps[0], stamps[1]);
        assert!(stamps[0] > 0);
    }

    #[test]
    fn gather_reassembles_multi_chunk_payloads() {
        let barriers = group(3);
        let payload = |r: usize| -> Vec<u8> { (0..(r * 3000 + 5)).map(|i| (i * 7 + r) as u8).collect() };
        let handles: Vec<_> = barriers
            .into_iter()
            .enumerate()
            .map(|(r, b)| {
                thread::spawn(move || {
                    let first = b.gather(&payload(r)).unwrap();
                    let second = b.gather(&[]).unwrap();
                    b.finish().unwrap();
                    (first, second)
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let (root_first, root_second) = &results[0];
        let root_first = root_first.as_ref().unwrap();
        for r in 0..3 {
            assert_eq!(root_first[r], payload(r));
        }
        assert_eq!(root_second.as_ref().unwrap(), &vec![Vec::<u8>::new(); 3]);
        assert!(results[1].0.is_none() && results[2].0.is_none());
    }

    #[test]
    fn abandon_breaks_remote_waiters() {
        let mut barriers = group(2);
        let member = Arc::new(barriers.pop().unwrap());
        let root = barriers.pop().unwrap();
        let waiter = {
            let member = Arc::clone(&member);
            thread::spawn(move || member.wait(false))
        };
        thread::sleep(Duration::from_millis(30));
        root.abandon();
        assert_eq!(waiter.join().unwrap(), Err(SyncError::BarrierBroken));
        assert_eq!(root.wait(false), Err(SyncError::BarrierBroken));
    }

    #[test]
    fn times_out_without_peers() {
        let mut barriers = group(2);
        let _member = barriers.pop();
        let root = barriers.pop().unwrap();
        let mut config = root.config.clone();
        config.timeout = Duration::from_millis(100);
        let root = NetBarrier::from_socket(config, root.inner.into_inner().unwrap().socket).unwrap();
        assert_eq!(root.wait(false), Err(SyncError::Timeout));
    }
}
