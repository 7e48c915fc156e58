//! Toroidal grid topologies, block partitioning across workers, and channel
//! wiring.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::Mutex;

use thiserror::Error;

use crate::channel::{Inlet, Outlet};
use crate::consolidation::{pooled_tx, ChannelPool, SharedPool};
use crate::duct::{
    inter_thread_duct, intra_thread_duct, AnyRx, AnyTx, DuctKind, InterRx, InterTx, LinkConfig,
    PeerLink,
};
use crate::wire::WirePayload;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("torus dimensions must be positive (got {width}x{height})")]
    InvalidDimensions { width: usize, height: usize },
    #[error("cannot bind {addr}: {source}")]
    AddressUnreachable {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("worker {worker} is not in process {process}")]
    ForeignWorker { worker: usize, process: usize },
    #[error("no address configured for process {0}")]
    MissingAddress(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Two-dimensional grid with wraparound; node ids are row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusTopology {
    width: usize,
    height: usize,
}

pub fn build_torus(width: usize, height: usize) -> Result<TorusTopology, TopologyError> {
    if width == 0 || height == 0 {
        return Err(TopologyError::InvalidDimensions { width, height });
    }
    Ok(TorusTopology { width, height })
}

impl TorusTopology {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    /// Undirected edges, one per (node, right) and (node, down) pair.
    pub fn edge_count(&self) -> usize {
        2 * self.node_count()
    }

    pub fn coords(&self, node: NodeId) -> (usize, usize) {
        (node % self.width, node / self.width)
    }

    pub fn node_at(&self, x: usize, y: usize) -> NodeId {
        y * self.width + x
    }

    pub fn neighbor(&self, node: NodeId, dir: Direction) -> NodeId {
        let (x, y) = self.coords(node);
        let (w, h) = (self.width, self.height);
        match dir {
            Direction::Up => self.node_at(x, (y + h - 1) % h),
            Direction::Down => self.node_at(x, (y + 1) % h),
            Direction::Left => self.node_at((x + w - 1) % w, y),
            Direction::Right => self.node_at((x + 1) % w, y),
        }
    }

    pub fn neighbors(&self, node: NodeId) -> [NodeId; 4] {
        Direction::ALL.map(|d| self.neighbor(node, d))
    }

    pub fn undirected_edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.node_count()).flat_map(move |n| {
            [
                (n, self.neighbor(n, Direction::Right)),
                (n, self.neighbor(n, Direction::Down)),
            ]
        })
    }

    /// True when some node is its own neighbor (a dimension of length 1).
    pub fn has_self_edges(&self) -> bool {
        self.width == 1 || self.height == 1
    }
}

/// Where a worker executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Locus {
    pub process: usize,
    pub thread: usize,
}

#[derive(Debug, Clone)]
pub struct PartitionAssignment {
    node_worker: Vec<usize>,
    node_slot: Vec<usize>,
    worker_nodes: Vec<Vec<NodeId>>,
    worker_locus: Vec<Locus>,
}

/// Splits row-major node ids into `num_workers` contiguous blocks whose sizes
/// differ by at most one. When a block size is a multiple of the width the
/// blocks are horizontal bands of rows. All workers start out as threads of
/// process 0.
pub fn partition_block(topology: &TorusTopology, num_workers: usize) -> PartitionAssignment {
    assert!(num_workers >= 1, "need at least one worker");
    let n = topology.node_count();
    let (base, extra) = (n / num_workers, n % num_workers);
    let mut node_worker = Vec::with_capacity(n);
    let mut node_slot = Vec::with_capacity(n);
    let mut worker_nodes = Vec::with_capacity(num_workers);
    let mut next = 0;
    for w in 0..num_workers {
        let size = base + usize::from(w < extra);
        worker_nodes.push((next..next + size).collect::<Vec<_>>());
        for slot in 0..size {
            node_worker.push(w);
            node_slot.push(slot);
        }
        next += size;
    }
    PartitionAssignment {
        node_worker,
        node_slot,
        worker_nodes,
        worker_locus: (0..num_workers)
            .map(|t| Locus { process: 0, thread: t })
            .collect(),
    }
}

impl PartitionAssignment {
    /// Places each worker in its own process.
    pub fn with_process_per_worker(mut self) -> Self {
        for (w, locus) in self.worker_locus.iter_mut().enumerate() {
            *locus = Locus { process: w, thread: 0 };
        }
        self
    }

    pub fn num_workers(&self) -> usize {
        self.worker_nodes.len()
    }

    pub fn worker_of(&self, node: NodeId) -> usize {
        self.node_worker[node]
    }

    pub fn slot_of(&self, node: NodeId) -> usize {
        self.node_slot[node]
    }

    pub fn nodes_of(&self, worker: usize) -> &[NodeId] {
        &self.worker_nodes[worker]
    }

    pub fn locus(&self, worker: usize) -> Locus {
        self.worker_locus[worker]
    }

    pub fn num_processes(&self) -> usize {
        self.worker_locus.iter().map(|l| l.process).max().map_or(0, |p| p + 1)
    }
}

/// Identifies one directed channel: messages from `source` to its neighbor
/// in direction `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelKey {
    pub source: NodeId,
    pub dir: Direction,
}

impl ChannelKey {
    pub fn channel_id(&self) -> u64 {
        (self.source as u64) * 4 + self.dir.index() as u64
    }
}

pub fn pool_id(source_worker: usize, dest_worker: usize) -> u64 {
    (1 << 63) | ((source_worker as u64) << 32) | dest_worker as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolMembership {
    pub pool_id: u64,
    pub member: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    pub key: ChannelKey,
    pub dest: NodeId,
    pub source_worker: usize,
    pub dest_worker: usize,
    pub kind: DuctKind,
    pub pool: Option<PoolMembership>,
}

#[derive(Debug, Clone, Copy)]
pub struct DuctConfig {
    pub buffer_capacity: usize,
}

/// Wiring for every directed edge of a partitioned topology. The plan is
/// fixed at construction; inter-thread duct halves are handed out once to
/// the workers that own them.
/// Inter-thread duct halves waiting for their workers to claim them.
type InterHalves<T> = (Option<InterTx<T>>, Option<InterRx<T>>);

pub struct ChannelRegistry<T> {
    topology: TorusTopology,
    assignment: PartitionAssignment,
    config: DuctConfig,
    plans: BTreeMap<ChannelKey, ChannelPlan>,
    pools: BTreeMap<(usize, usize), Vec<ChannelKey>>,
    inter_thread: Mutex<HashMap<ChannelKey, InterHalves<T>>>,
}

pub fn instantiate_channels<T>(
    topology: &TorusTopology,
    assignment: &PartitionAssignment,
    config: DuctConfig,
) -> ChannelRegistry<T> {
    let mut plans = BTreeMap::new();
    let mut pools: BTreeMap<(usize, usize), Vec<ChannelKey>> = BTreeMap::new();
    let mut inter_thread = HashMap::new();
    for source in 0..topology.node_count() {
        for dir in Direction::ALL {
            let key = ChannelKey { source, dir };
            let dest = topology.neighbor(source, dir);
            let (sw, dw) = (assignment.worker_of(source), assignment.worker_of(dest));
            let kind = if sw == dw {
                DuctKind::IntraThread
            } else if assignment.locus(sw).process == assignment.locus(dw).process {
                DuctKind::InterThread
            } else {
                DuctKind::InterProcess
            };
            let pool = (kind == DuctKind::InterProcess).then(|| {
                let members = pools.entry((sw, dw)).or_default();
                members.push(key);
                PoolMembership {
                    pool_id: pool_id(sw, dw),
                    member: members.len() - 1,
                }
            });
            if kind == DuctKind::InterThread {
                let (tx, rx) = inter_thread_duct(config.buffer_capacity);
                inter_thread.insert(key, (Some(tx), Some(rx)));
            }
            plans.insert(
                key,
                ChannelPlan {
                    key,
                    dest,
                    source_worker: sw,
                    dest_worker: dw,
                    kind,
                    pool,
                },
            );
        }
    }
    ChannelRegistry {
        topology: *topology,
        assignment: assignment.clone(),
        config,
        plans,
        pools,
        inter_thread: Mutex::new(inter_thread),
    }
}

/// Socket addressing for inter-process links. Process `p` listens for peer
/// `q` on `addrs[p]` with port offset `q`.
#[derive(Debug, Clone)]
pub struct NetAddressing {
    pub addrs: Vec<SocketAddr>,
    pub link: LinkConfig,
}

impl NetAddressing {
    pub fn link_addr(&self, process: usize, peer: usize) -> Result<SocketAddr, TopologyError> {
        let mut addr = *self
            .addrs
            .get(process)
            .ok_or(TopologyError::MissingAddress(process))?;
        addr.set_port(addr.port() + peer as u16);
        Ok(addr)
    }
}

/// All endpoints owned by one worker. Indexing is `slot * 4 + direction`:
/// `inlets[i]` sends from the node in `slot` toward `direction`, and
/// `outlets[i]` receives at that node from its neighbor in `direction`.
pub struct WorkerEndpoints<T> {
    pub worker: usize,
    pub nodes: Vec<NodeId>,
    pub inlets: Vec<Inlet<T, AnyTx<T>>>,
    pub outlets: Vec<Outlet<T, AnyRx<T>>>,
    pub pools: Vec<SharedPool>,
    pub links: Vec<PeerLink>,
}

impl<T> WorkerEndpoints<T> {
    pub fn index(slot: usize, dir: Direction) -> usize {
        slot * 4 + dir.index()
    }
}

impl<T: WirePayload + Clone> ChannelRegistry<T> {
    pub fn topology(&self) -> &TorusTopology {
        &self.topology
    }

    pub fn assignment(&self) -> &PartitionAssignment {
        &self.assignment
    }

    pub fn plan(&self, key: ChannelKey) -> &ChannelPlan {
        &self.plans[&key]
    }

    pub fn plans(&self) -> impl Iterator<Item = &ChannelPlan> {
        self.plans.values()
    }

    /// Pools by ordered (source worker, dest worker) with members in slot
    /// order.
    pub fn pools(&self) -> &BTreeMap<(usize, usize), Vec<ChannelKey>> {
        &self.pools
    }

    /// Builds the endpoints for `worker`. Must run on the thread that will
    /// use them. `net` is required when any of the worker's channels cross
    /// processes.
    pub fn worker_endpoints(
        &self,
        worker: usize,
        initial: T,
        net: Option<&NetAddressing>,
    ) -> Result<WorkerEndpoints<T>, TopologyError> {
        let nodes = self.assignment.nodes_of(worker).to_vec();
        let me = self.assignment.locus(worker).process;
        let mut inlets: Vec<Option<Inlet<T, AnyTx<T>>>> = (0..nodes.len() * 4).map(|_| None).collect();
        let mut outlets: Vec<Option<Outlet<T, AnyRx<T>>>> = (0..nodes.len() * 4).map(|_| None).collect();

        let mut links: BTreeMap<usize, PeerLink> = BTreeMap::new();
        let mut link_to = |peer_worker: usize| -> Result<PeerLink, TopologyError> {
            let peer = self.assignment.locus(peer_worker).process;
            if let Some(link) = links.get(&peer) {
                return Ok(link.clone());
            }
            let net = net.ok_or(TopologyError::MissingAddress(peer))?;
            let local = net.link_addr(me, peer)?;
            let remote = net.link_addr(peer, me)?;
            let link = PeerLink::bind(local, remote, net.link)
                .map_err(|source| TopologyError::AddressUnreachable { addr: local, source })?;
            links.insert(peer, link.clone());
            Ok(link)
        };

        let mut pools: BTreeMap<usize, SharedPool> = BTreeMap::new();
        for (&(sw, dw), members) in &self.pools {
            if sw == worker {
                let link = link_to(dw)?;
                let pool = ChannelPool::new(link, pool_id(sw, dw), members.len(), self.config.buffer_capacity);
                pools.insert(dw, pool.shared());
            } else if dw == worker {
                let link = link_to(sw)?;
                link.register_consolidated_rx(
                    pool_id(sw, dw),
                    members.iter().map(ChannelKey::channel_id).collect(),
                );
            }
        }

        let mut inter = self.inter_thread.lock().unwrap_or_else(|e| e.into_inner());
        for plan in self.plans.values() {
            let local_src = plan.source_worker == worker;
            let local_dst = plan.dest_worker == worker;
            if !local_src && !local_dst {
                continue;
            }
            let in_idx = WorkerEndpoints::<T>::index(self.assignment.slot_of(plan.key.source), plan.key.dir);
            let out_idx =
                WorkerEndpoints::<T>::index(self.assignment.slot_of(plan.dest), plan.key.dir.opposite());
            match plan.kind {
                DuctKind::IntraThread => {
                    let (tx, rx) = intra_thread_duct(self.config.buffer_capacity);
                    inlets[in_idx] = Some(Inlet::new(AnyTx::Intra(tx)));
                    outlets[out_idx] = Some(Outlet::new(AnyRx::Intra(rx), initial.clone()));
                }
                DuctKind::InterThread => {
                    let halves = inter.get_mut(&plan.key).expect("inter-thread duct planned");
                    if local_src {
                        let tx = halves.0.take().expect("inlet half already claimed");
                        inlets[in_idx] = Some(Inlet::new(AnyTx::Inter(tx)));
                    } else {
                        let rx = halves.1.take().expect("outlet half already claimed");
                        outlets[out_idx] = Some(Outlet::new(AnyRx::Inter(rx), initial.clone()));
                    }
                }
                DuctKind::InterProcess => {
                    if local_src {
                        let member = plan.pool.expect("inter-process channels are pooled").member;
                        let pool = &pools[&plan.dest_worker];
                        let inlet = Inlet::new(AnyTx::Pooled(pooled_tx(pool, member)));
                        pool.borrow_mut().attach_counters(member, inlet.counters().clone());
                        inlets[in_idx] = Some(inlet);
                    } else {
                        let link = link_to(plan.source_worker)?;
                        let rx = link.receiver::<T>(plan.key.channel_id());
                        outlets[out_idx] = Some(Outlet::new(AnyRx::Process(rx), initial.clone()));
                    }
                }
            }
        }
        drop(inter);

        let mut inlets: Vec<_> = inlets.into_iter().map(|i| i.expect("every edge wired")).collect();
        let outlets: Vec<_> = outlets.into_iter().map(|o| o.expect("every edge wired")).collect();
        for (inlet, outlet) in inlets.iter_mut().zip(&outlets) {
            inlet.bind_touch(outlet.counters().clone());
        }
        Ok(WorkerEndpoints {
            worker,
            nodes,
            inlets,
            outlets,
            pools: pools.into_values().collect(),
            links: links.into_values().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::PutOutcome;
    use std::collections::HashSet;

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(build_torus(0, 3), Err(TopologyError::InvalidDimensions { .. })));
        assert!(matches!(build_torus(3, 0), Err(TopologyError::InvalidDimensions { .. })));
    }

    #[test]
    fn single_node_is_its_own_neighbor() {
        let t = build_torus(1, 1).unwrap();
        assert_eq!(t.neighbors(0), [0, 0, 0, 0]);
        assert!(t.has_self_edges());
    }

    #[test]
    fn wraparound() {
        let t = build_torus(4, 3).unwrap();
        assert_eq!(t.neighbor(t.node_at(0, 0), Direction::Left), t.node_at(3, 0));
        assert_eq!(t.neighbor(t.node_at(0, 0), Direction::Up), t.node_at(0, 2));
        assert_eq!(t.neighbor(t.node_at(3, 2), Direction::Right), t.node_at(0, 2));
        assert_eq!(t.neighbor(t.node_at(3, 2), Direction::Down), t.node_at(3, 0));
    }

    #[test]
    fn edge_count_matches_enumeration() {
        for (w, h) in [(4, 4), (3, 5), (2, 2), (7, 1)] {
            let t = build_torus(w, h).unwrap();
            // Count every (node, direction) slot once per endpoint pair.
            let directed: usize = (0..t.node_count()).map(|n| t.neighbors(n).len()).sum();
            assert_eq!(directed / 2, t.edge_count());
            assert_eq!(t.undirected_edges().count(), 2 * w * h);
        }
        assert_eq!(build_torus(4, 4).unwrap().edge_count(), 32);
    }

    #[test]
    fn neighbor_relation_is_symmetric() {
        let t = build_torus(5, 3).unwrap();
        for n in 0..t.node_count() {
            for d in Direction::ALL {
                assert_eq!(t.neighbor(t.neighbor(n, d), d.opposite()), n);
            }
        }
    }

    #[test]
    fn two_workers_get_row_bands() {
        let t = build_torus(4, 4).unwrap();
        let p = partition_block(&t, 2);
        assert_eq!(p.nodes_of(0), &(0..8).collect::<Vec<_>>()[..]);
        assert_eq!(p.nodes_of(1), &(8..16).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn uneven_partition_is_balanced() {
        let t = build_torus(5, 3).unwrap();
        let p = partition_block(&t, 4);
        let sizes: Vec<usize> = (0..4).map(|w| p.nodes_of(w).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 15);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = HashSet::new();
        for w in 0..4 {
            for &n in p.nodes_of(w) {
                assert!(seen.insert(n));
                assert_eq!(p.worker_of(n), w);
                assert_eq!(p.nodes_of(w)[p.slot_of(n)], n);
            }
        }
    }

    #[test]
    fn four_bands_each_cut_eight_edges() {
        let t = build_torus(4, 4).unwrap();
        let p = partition_block(&t, 4);
        for w in 0..4 {
            let cut = t
                .undirected_edges()
                .filter(|&(a, b)| (p.worker_of(a) == w) != (p.worker_of(b) == w))
                .count();
            assert_eq!(cut, 8, "worker {w}");
        }
    }

    #[test]
    fn single_worker_is_all_intra_thread() {
        let t = build_torus(4, 4).unwrap();
        let reg = instantiate_channels::<u32>(&t, &partition_block(&t, 1), DuctConfig { buffer_capacity: 2 });
        assert!(reg.plans().all(|p| p.kind == DuctKind::IntraThread));
        assert_eq!(reg.plans().count(), 64);
    }

    #[test]
    fn threads_use_inter_thread_ducts_on_cut_edges() {
        let t = build_torus(4, 4).unwrap();
        let p = partition_block(&t, 2);
        let reg = instantiate_channels::<u32>(&t, &p, DuctConfig { buffer_capacity: 2 });
        for plan in reg.plans() {
            let expect = if plan.source_worker == plan.dest_worker {
                DuctKind::IntraThread
            } else {
                DuctKind::InterThread
            };
            assert_eq!(plan.kind, expect);
        }
        assert!(reg.pools().is_empty());
    }

    #[test]
    fn processes_pool_cut_edges_per_ordered_pair() {
        let t = build_torus(4, 4).unwrap();
        let p = partition_block(&t, 4).with_process_per_worker();
        let reg = instantiate_channels::<u32>(&t, &p, DuctConfig { buffer_capacity: 2 });
        let mut expected: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for plan in reg.plans().filter(|p| p.kind == DuctKind::InterProcess) {
            *expected.entry((plan.source_worker, plan.dest_worker)).or_default() += 1;
            let m = plan.pool.unwrap();
            assert_eq!(m.pool_id, pool_id(plan.source_worker, plan.dest_worker));
            assert_eq!(reg.pools()[&(plan.source_worker, plan.dest_worker)][m.member], plan.key);
        }
        // Each band sends 4 channels up and 4 down to two distinct neighbors.
        assert_eq!(expected.len(), 8);
        assert!(expected.values().all(|&n| n == 4));
        assert_eq!(reg.pools().len(), 8);
    }

    #[test]
    fn every_channel_has_a_reverse() {
        let t = build_torus(6, 4).unwrap();
        let reg = instantiate_channels::<u32>(&t, &partition_block(&t, 3), DuctConfig { buffer_capacity: 2 });
        for plan in reg.plans() {
            let back = reg.plan(ChannelKey { source: plan.dest, dir: plan.key.dir.opposite() });
            assert_eq!(back.dest, plan.key.source);
        }
    }

    #[test]
    fn worker_endpoints_wire_intra_and_inter_thread() {
        let t = build_torus(4, 4).unwrap();
        let p = partition_block(&t, 2);
        let reg = instantiate_channels::<u32>(&t, &p, DuctConfig { buffer_capacity: 2 });
        let mut w0 = reg.worker_endpoints(0, u32::MAX, None).unwrap();
        let mut w1 = reg.worker_endpoints(1, u32::MAX, None).unwrap();
        // Node 0 sends up (wraps to node 12 in worker 1).
        let up = WorkerEndpoints::<u32>::index(0, Direction::Up);
        assert_eq!(w0.inlets[up].duct().kind(), DuctKind::InterThread);
        assert_eq!(w0.inlets[up].try_put(7).unwrap(), PutOutcome::Queued);
        let down_of_12 = WorkerEndpoints::<u32>::index(p.slot_of(12), Direction::Down);
        assert_eq!(*w1.outlets[down_of_12].jump().unwrap(), 7);
        // Node 0 sends right to node 1 in the same worker.
        let right = WorkerEndpoints::<u32>::index(0, Direction::Right);
        assert_eq!(w0.inlets[right].duct().kind(), DuctKind::IntraThread);
        w0.inlets[right].try_put(9).unwrap();
        let left_of_1 = WorkerEndpoints::<u32>::index(1, Direction::Left);
        assert_eq!(*w0.outlets[left_of_1].jump().unwrap(), 9);
    }

    #[test]
    fn worker_endpoints_over_processes() {
        use std::net::{Ipv4Addr, UdpSocket};
        let t = build_torus(4, 2).unwrap();
        let p = partition_block(&t, 2).with_process_per_worker();
        let reg = instantiate_channels::<u32>(&t, &p, DuctConfig { buffer_capacity: 4 });
        // Reserve two port ranges on loopback.
        let base: Vec<SocketAddr> = (0..2)
            .map(|_| {
                let s = UdpSocket::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
                s.local_addr().unwrap()
            })
            .collect();
        let net = NetAddressing { addrs: base, link: LinkConfig::default() };
        let Ok(mut w0) = reg.worker_endpoints(0, u32::MAX, Some(&net)) else {
            // Adjacent port busy; nothing to assert about wiring.
            return;
        };
        let Ok(mut w1) = reg.worker_endpoints(1, u32::MAX, Some(&net)) else {
            return;
        };
        assert_eq!(w0.pools.len(), 1);
        assert_eq!(w0.pools[0].borrow().members(), 8);
        for (i, inlet) in w0.inlets.iter_mut().enumerate() {
            if inlet.duct().kind() == DuctKind::InterProcess {
                inlet.try_put(100 + i as u32).unwrap();
            }
        }
        w0.pools[0].borrow_mut().try_flush().unwrap();
        assert_eq!(w0.links[0].stats().wire_transfers, 1);
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        // Node 0 up -> node 4 (worker 1, slot 0) receiving from below.
        let idx = WorkerEndpoints::<u32>::index(0, Direction::Down);
        while *w1.outlets[idx].jump().unwrap() == u32::MAX && std::time::Instant::now() < deadline {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        assert_eq!(*w1.outlets[idx].last_received(), 100 + WorkerEndpoints::<u32>::index(0, Direction::Up) as u32);
    }
}
