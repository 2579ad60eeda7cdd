//! Link timing model, topologies and routing, and the simulator's event
//! queue.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("node {dst} is unreachable from node {src}")]
    Unreachable { src: NodeId, dst: NodeId },
    #[error("route requested from node {0} to itself")]
    SelfRoute(NodeId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid link config: {0}")]
    InvalidLink(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub bytes_per_cycle: u64,
    pub clock_hz: f64,
    pub hop_latency_cycles: u64,
    pub packet_overhead_bytes: u64,
    pub min_packet_period_cycles: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            bytes_per_cycle: 16,
            clock_hz: 250e6,
            hop_latency_cycles: 44,
            packet_overhead_bytes: 16,
            min_packet_period_cycles: 12,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        if self.bytes_per_cycle == 0 {
            return Err(TransportError::InvalidLink("bytes_per_cycle must be positive"));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(TransportError::InvalidLink("clock_hz must be positive"));
        }
        if self.hop_latency_cycles == 0 || self.packet_overhead_bytes == 0 || self.min_packet_period_cycles == 0 {
            return Err(TransportError::InvalidLink("latency, overhead and packet period must be positive"));
        }
        Ok(())
    }

    pub fn serialization_cycles(&self, frag_len: usize) -> u64 {
        (frag_len as u64 + self.packet_overhead_bytes).div_ceil(self.bytes_per_cycle)
    }

    /// Link occupancy charged per packet.
    pub fn period_cycles(&self, frag_len: usize) -> u64 {
        self.serialization_cycles(frag_len).max(self.min_packet_period_cycles)
    }

    /// Theoretical peak in MB/s (10^6 bytes per second).
    pub fn peak_mbs(&self) -> f64 {
        self.bytes_per_cycle as f64 * self.clock_hz / 1e6
    }

    pub fn cycles_to_us(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_hz * 1e6
    }
}

/// Timing of one packet on one link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transit {
    pub depart: u64,
    pub serialization: u64,
    pub arrival: u64,
}

impl Transit {
    /// When the last byte has left the sender.
    pub fn injected(&self) -> u64 {
        self.depart + self.serialization
    }
}

/// A directed point-to-point link.
#[derive(Debug, Clone)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    free_at: u64,
    busy_cycles: u64,
    packets: u64,
}

impl Link {
    pub fn new(from: NodeId, to: NodeId) -> Self {
        Link { from, to, free_at: 0, busy_cycles: 0, packets: 0 }
    }

    /// Books the link for one packet requested at `request`.
    pub fn send_packet(&mut self, config: &LinkConfig, frag_len: usize, request: u64) -> Transit {
        let serialization = config.serialization_cycles(frag_len);
        let depart = request.max(self.free_at);
        let period = config.period_cycles(frag_len);
        self.free_at = depart + period;
        self.busy_cycles += period;
        self.packets += 1;
        Transit { depart, serialization, arrival: depart + serialization + config.hop_latency_cycles }
    }

    pub fn free_at(&self) -> u64 {
        self.free_at
    }

    pub fn busy_cycles(&self) -> u64 {
        self.busy_cycles
    }

    pub fn packets(&self) -> u64 {
        self.packets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    #[default]
    Ring,
    Mesh,
}

/// Directed links between nodes. Link ids index [`Topology::links`].
#[derive(Debug, Clone)]
pub struct Topology {
    kind: TopologyKind,
    node_count: usize,
    links: Vec<(NodeId, NodeId)>,
    adjacency: Vec<Vec<(NodeId, usize)>>,
}

impl Topology {
    pub fn build(kind: TopologyKind, node_count: usize) -> Result<Self, TransportError> {
        match kind {
            TopologyKind::Ring => Self::ring(node_count),
            TopologyKind::Mesh => Self::mesh(node_count),
        }
    }

    /// Bidirectional ring. Two nodes share one pair of antiparallel links.
    pub fn ring(node_count: usize) -> Result<Self, TransportError> {
        let mut edges = Vec::new();
        if node_count == 2 {
            edges = vec![(0, 1), (1, 0)];
        } else if node_count > 2 {
            for i in 0..node_count {
                let next = (i + 1) % node_count;
                edges.push((i, next));
                edges.push((next, i));
            }
        }
        Self::from_edges(TopologyKind::Ring, node_count, &edges)
    }

    /// Every ordered pair of distinct nodes has a direct link.
    pub fn mesh(node_count: usize) -> Result<Self, TransportError> {
        let edges: Vec<_> =
            (0..node_count).flat_map(|a| (0..node_count).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        Self::from_edges(TopologyKind::Mesh, node_count, &edges)
    }

    fn from_edges(kind: TopologyKind, node_count: usize, edges: &[(usize, usize)]) -> Result<Self, TransportError> {
        if node_count == 0 || node_count > u16::MAX as usize {
            return Err(TransportError::InvalidTopology(format!("{node_count} nodes")));
        }
        let mut adjacency = vec![Vec::new(); node_count];
        let mut links = Vec::new();
        for &(a, b) in edges {
            if a >= node_count || b >= node_count || a == b {
                return Err(TransportError::InvalidTopology(format!("edge {a}->{b}")));
            }
            adjacency[a].push((NodeId(b as u16), links.len()));
            links.push((NodeId(a as u16), NodeId(b as u16)));
        }
        for adj in &mut adjacency {
            adj.sort();
        }
        let topo = Topology { kind, node_count, links, adjacency };
        for dst in 1..node_count {
            topo.bfs(NodeId(0), NodeId(dst as u16))?;
            topo.bfs(NodeId(dst as u16), NodeId(0))?;
        }
        Ok(topo)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn links(&self) -> &[(NodeId, NodeId)] {
        &self.links
    }

    pub fn link_between(&self, from: NodeId, to: NodeId) -> Option<usize> {
        self.adjacency
            .get(from.index())?
            .iter()
            .find(|(n, _)| *n == to)
            .map(|&(_, id)| id)
    }

    /// Link ids from `src` to `dst`. On a ring this is the shorter
    /// direction, ties going toward increasing node id.
    pub fn route(&self, src: NodeId, dst: NodeId) -> Result<Vec<usize>, TransportError> {
        if src == dst {
            return Err(TransportError::SelfRoute(src));
        }
        for n in [src, dst] {
            if n.index() >= self.node_count {
                return Err(TransportError::Unreachable { src, dst });
            }
        }
        if self.kind == TopologyKind::Ring {
            let n = self.node_count;
            let forward = (dst.index() + n - src.index()) % n;
            let step = if forward <= n - forward { 1 } else { n - 1 };
            let mut path = Vec::new();
            let mut at = src.index();
            while at != dst.index() {
                let next = (at + step) % n;
                path.push(
                    self.link_between(NodeId(at as u16), NodeId(next as u16))
                        .ok_or(TransportError::Unreachable { src, dst })?,
                );
                at = next;
            }
            return Ok(path);
        }
        self.bfs(src, dst)
    }

    fn bfs(&self, src: NodeId, dst: NodeId) -> Result<Vec<usize>, TransportError> {
        let mut via: Vec<Option<usize>> = vec![None; self.node_count];
        let mut seen = vec![false; self.node_count];
        seen[src.index()] = true;
        let mut frontier = VecDeque::from([src]);
        while let Some(at) = frontier.pop_front() {
            if at == dst {
                let mut path = Vec::new();
                let mut cur = dst;
                while let Some(link) = via[cur.index()] {
                    path.push(link);
                    cur = self.links[link].0;
                }
                path.reverse();
                return Ok(path);
            }
            for &(next, link) in &self.adjacency[at.index()] {
                if !seen[next.index()] {
                    seen[next.index()] = true;
                    via[next.index()] = Some(link);
                    frontier.push_back(next);
                }
            }
        }
        Err(TransportError::Unreachable { src, dst })
    }
}

/// Min-queue of timed events. Equal times pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<(u64, u64, Slot<E>)>>,
    next_seq: u64,
}

#[derive(Debug)]
struct Slot<E>(E);

impl<E> PartialEq for Slot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<E> Eq for Slot<E> {}
impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Slot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn push(&mut self, time: u64, event: E) {
        self.heap.push(Reverse((time, self.next_seq, Slot(event))));
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        self.heap.pop().map(|Reverse((t, _, Slot(e)))| (t, e))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
