//! Deterministic discrete-event simulation of a job: per-node cores,
//! memories and accelerators joined by timed links.
//!
//! Each node has one sequencer. A grant occupies it for
//! `sequencer_cycles` (plus the DMA read latency if the message carries a
//! payload); all packets of the message are then handed to the first link
//! of its route at once and the link serializes them in order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;

use crate::addressing::NodeId;
use crate::am::{
    Command, CommandKind, CoreError, CoreState, Effect, Handle, HandlerFn, Outgoing, QueueClass, Queued,
};
use crate::compute::{ComputeCommand, ComputeEngine, ComputeError, Job};
use crate::config::JobConfig;
use crate::memory::NodeMemory;
use crate::transport::{EventQueue, Link, Topology, TransportError};
use crate::wire::{encode_message, packetize, MessageHeader, MessageKind, Packet, Variant, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("livelock guard tripped after {0} events")]
    Livelock(u64),
    #[error("simulation stalled: {0}")]
    Stalled(String),
    #[error("node {node}: {source}")]
    Core { node: NodeId, source: CoreError },
    #[error("node {node}: {source}")]
    Compute { node: NodeId, source: ComputeError },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum HandleState {
    Pending,
    Done { at: u64 },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    CommandSubmitted { handle: Option<Handle>, queue: QueueClass, kind: CommandKind },
    Granted { queue: QueueClass, kind: CommandKind, handle: Option<Handle> },
    MessageSent {
        seq: u64,
        dst: NodeId,
        opcode: u8,
        kind: MessageKind,
        variant: Variant,
        payload_len: u32,
        packets: usize,
    },
    PacketDeparted { link: usize, origin: NodeId, seq: u64, index: u32, count: u32, frag_len: u16, depart: u64 },
    PacketArrived { link: usize, origin: NodeId, seq: u64, index: u32, count: u32, final_hop: bool },
    MessageDelivered { origin: NodeId, opcode: u8, kind: MessageKind, payload_len: u32 },
    Effect(Effect),
    ComputeStarted { handle: Option<Handle>, cycles: u64, chunks: usize },
    ArtEmitted { chunk: u64, results: u64, valid_at: u64, bytes: u64 },
    ComputeFinished { handle: Option<Handle>, macs: u64, cycles: u64 },
    HandleCompleted { handle: Handle },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub time: u64,
    pub node: NodeId,
    pub kind: TraceKind,
}

#[derive(Debug)]
enum Event {
    Kick(NodeId),
    Inject { node: NodeId, out: Outgoing },
    Arrive { origin: NodeId, packet: Packet, path: Arc<[usize]>, hop: usize },
    Deliver { node: NodeId, origin: NodeId, header: MessageHeader, payload: Bytes },
    Complete(Handle),
    ComputeChunk { node: NodeId, index: u64 },
    ComputeFinish(NodeId),
}

struct Delivery {
    origin: NodeId,
    header: MessageHeader,
    payload: Bytes,
}

struct SimNode {
    core: CoreState,
    memory: NodeMemory,
    engine: ComputeEngine,
    sequencer_busy: bool,
    kick_pending: bool,
    rx_backlog: VecDeque<Delivery>,
    art_backlog: VecDeque<Queued>,
    running_compute: Option<Handle>,
    barrier_epoch: u32,
    next_handle: u64,
}

#[derive(Debug, Default)]
struct Parent {
    outstanding: usize,
    finished: bool,
}

pub struct Simulator {
    config: JobConfig,
    topology: Topology,
    links: Vec<Link>,
    nodes: Vec<SimNode>,
    events: EventQueue<Event>,
    now: u64,
    handles: BTreeMap<Handle, HandleState>,
    parents: BTreeMap<Handle, Parent>,
    child_parent: BTreeMap<Handle, Handle>,
    trace: Vec<TraceEvent>,
    failure: Option<SimError>,
    processed: u64,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("nodes", &self.nodes.len())
            .field("now", &self.now)
            .field("pending_events", &self.events.len())
            .finish()
    }
}

impl Simulator {
    /// Builds the job. The config must already be valid.
    pub fn new(config: &JobConfig) -> Result<Self, SimError> {
        let topology = Topology::build(config.topology, config.nodes)?;
        let links = topology.links().iter().map(|&(a, b)| Link::new(a, b)).collect();
        let nodes = (0..config.nodes)
            .map(|i| {
                let id = NodeId(i as u16);
                SimNode {
                    core: CoreState::new(id, config.nodes, config.core.queue_depth),
                    memory: NodeMemory::new(&config.segment, config.core.scratch_size),
                    engine: ComputeEngine::new(id, config.dla),
                    sequencer_busy: false,
                    kick_pending: false,
                    rx_backlog: VecDeque::new(),
                    art_backlog: VecDeque::new(),
                    running_compute: None,
                    barrier_epoch: 0,
                    next_handle: 0,
                }
            })
            .collect();
        Ok(Simulator {
            config: config.clone(),
            topology,
            links,
            nodes,
            events: EventQueue::default(),
            now: 0,
            handles: BTreeMap::new(),
            parents: BTreeMap::new(),
            child_parent: BTreeMap::new(),
            trace: Vec::new(),
            failure: None,
            processed: 0,
        })
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn memory(&self, node: NodeId) -> &NodeMemory {
        &self.nodes[node.index()].memory
    }

    pub fn memory_mut(&mut self, node: NodeId) -> &mut NodeMemory {
        &mut self.nodes[node.index()].memory
    }

    pub fn core(&self, node: NodeId) -> &CoreState {
        &self.nodes[node.index()].core
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn failure(&self) -> Option<&SimError> {
        self.failure.as_ref()
    }

    pub fn barrier_epoch(&self, node: NodeId) -> u32 {
        self.nodes[node.index()].barrier_epoch
    }

    pub fn register_handler(&mut self, node: NodeId, opcode: u8, handler: HandlerFn) -> Result<(), CoreError> {
        self.nodes[node.index()].core.register_handler(opcode, handler)
    }

    fn record(&mut self, time: u64, node: NodeId, kind: TraceKind) {
        if self.config.trace {
            self.trace.push(TraceEvent { time, node, kind });
        }
    }

    fn alloc_handle(&mut self, node: NodeId) -> Handle {
        let n = &mut self.nodes[node.index()];
        let h = Handle { node, id: n.next_handle };
        n.next_handle += 1;
        h
    }

    fn kick(&mut self, node: NodeId, at: u64) {
        let n = &mut self.nodes[node.index()];
        if !n.kick_pending {
            n.kick_pending = true;
            self.events.push(at, Event::Kick(node));
        }
    }

    /// Places a host command in `node`'s host queue.
    pub fn submit(&mut self, node: NodeId, command: Command) -> Result<Handle, CoreError> {
        let kind = command.kind();
        let handle = self.alloc_handle(node);
        self.nodes[node.index()].core.submit_command(command, QueueClass::Host, Some(handle))?;
        self.handles.insert(handle, HandleState::Pending);
        self.record(self.now, node, TraceKind::CommandSubmitted { handle: Some(handle), queue: QueueClass::Host, kind });
        self.kick(node, self.now);
        Ok(handle)
    }

    /// Queues a command on `node`'s accelerator, as the host does.
    pub fn enqueue_compute(&mut self, node: NodeId, command: ComputeCommand) -> Result<Handle, ComputeError> {
        let handle = self.alloc_handle(node);
        let n = &mut self.nodes[node.index()];
        n.engine.enqueue(Job { command, handle: Some(handle) }, &n.memory)?;
        self.handles.insert(handle, HandleState::Pending);
        if let Err(e) = self.try_start_compute(node, self.now) {
            self.fail(e);
        }
        Ok(handle)
    }

    pub fn state(&self, handle: Handle) -> Option<&HandleState> {
        self.handles.get(&handle)
    }

    /// Drops a resolved handle from the registry.
    pub fn forget(&mut self, handle: Handle) -> Option<HandleState> {
        self.handles.remove(&handle)
    }

    fn fail(&mut self, e: SimError) {
        log::error!("simulation failed at cycle {}: {e}", self.now);
        if self.failure.is_none() {
            self.failure = Some(e);
        }
    }

    fn check_failed(&self) -> Result<(), SimError> {
        match &self.failure {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Processes one event. Returns false when nothing is left to do.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.check_failed()?;
        let Some((time, event)) = self.events.pop() else { return Ok(false) };
        debug_assert!(time >= self.now, "time went backwards");
        self.now = time;
        self.processed += 1;
        if let Err(e) = self.dispatch(time, event) {
            self.fail(e);
        }
        self.check_failed()?;
        Ok(true)
    }

    /// Runs until `done` holds or no events remain, processing at most
    /// `max_events` events.
    pub fn run_until<F: FnMut(&Simulator) -> bool>(&mut self, mut done: F) -> Result<bool, SimError> {
        let start = self.processed;
        loop {
            if done(self) {
                return Ok(true);
            }
            if self.processed - start >= self.config.max_events {
                let e = SimError::Livelock(self.processed - start);
                self.fail(e.clone());
                return Err(e);
            }
            if !self.step()? {
                return Ok(done(self));
            }
        }
    }

    pub fn run_until_idle(&mut self) -> Result<u64, SimError> {
        self.run_until(|_| false)?;
        if let Some(n) = self.nodes.iter().find(|n| !n.rx_backlog.is_empty() || n.core.has_work()) {
            return Err(SimError::Stalled(format!("node {} has undelivered work", n.core.id())));
        }
        Ok(self.now)
    }

    fn dispatch(&mut self, time: u64, event: Event) -> Result<(), SimError> {
        match event {
            Event::Kick(node) => self.on_kick(node, time),
            Event::Inject { node, out } => self.on_inject(node, out, time),
            Event::Arrive { origin, packet, path, hop } => self.on_arrive(origin, packet, path, hop, time),
            Event::Deliver { node, origin, header, payload } => {
                let n = &mut self.nodes[node.index()];
                let needed = n.core.reply_slots_needed(&header);
                let delivery = Delivery { origin, header, payload };
                if !n.rx_backlog.is_empty() || n.core.free_slots(QueueClass::Reply) < needed {
                    n.rx_backlog.push_back(delivery);
                    return Ok(());
                }
                self.deliver(node, delivery, time)
            }
            Event::Complete(handle) => {
                self.complete(handle, time);
                Ok(())
            }
            Event::ComputeChunk { node, index } => self.on_chunk(node, index, time),
            Event::ComputeFinish(node) => self.on_compute_finish(node, time),
        }
    }

    fn core_err(node: NodeId) -> impl Fn(CoreError) -> SimError {
        move |source| SimError::Core { node, source }
    }

    fn compute_err(node: NodeId) -> impl Fn(ComputeError) -> SimError {
        move |source| SimError::Compute { node, source }
    }

    fn on_kick(&mut self, node: NodeId, time: u64) -> Result<(), SimError> {
        let cfg = self.config.core;
        let n = &mut self.nodes[node.index()];
        n.kick_pending = false;
        while n.core.free_slots(QueueClass::Compute) > 0 {
            let Some(q) = n.art_backlog.pop_front() else { break };
            n.core.submit_command(q.command, QueueClass::Compute, q.handle).map_err(Self::core_err(node))?;
        }
        if n.sequencer_busy {
            return Ok(());
        }
        let Some((queue, queued)) = n.core.schedule() else { return Ok(()) };
        n.sequencer_busy = true;
        let (kind, handle) = (queued.command.kind(), queued.handle);
        let result = n.core.sequence(queued, &n.memory);
        self.record(time, node, TraceKind::Granted { queue, kind, handle });
        match result {
            Ok(out) => {
                let dma = if out.payload.is_empty() { 0 } else { cfg.dma_read_latency_cycles };
                self.events.push(time + cfg.sequencer_cycles + dma, Event::Inject { node, out });
            }
            Err(e) => match handle {
                Some(h) => {
                    self.handles.insert(h, HandleState::Failed(e.to_string()));
                    self.nodes[node.index()].sequencer_busy = false;
                    self.kick(node, time);
                }
                None => return Err(SimError::Core { node, source: e }),
            },
        }
        if queue == QueueClass::Reply {
            self.drain_rx_backlog(node, time)?;
        }
        Ok(())
    }

    fn drain_rx_backlog(&mut self, node: NodeId, time: u64) -> Result<(), SimError> {
        loop {
            let n = &mut self.nodes[node.index()];
            let Some(front) = n.rx_backlog.front() else { return Ok(()) };
            if n.core.free_slots(QueueClass::Reply) < n.core.reply_slots_needed(&front.header) {
                return Ok(());
            }
            let delivery = n.rx_backlog.pop_front().expect("front exists");
            self.deliver(node, delivery, time)?;
        }
    }

    fn on_inject(&mut self, node: NodeId, out: Outgoing, time: u64) -> Result<(), SimError> {
        self.nodes[node.index()].sequencer_busy = false;
        let dst = out.header.dst;
        let message = encode_message(&out.header, &out.payload)?;
        let packets = packetize(&message, out.seq, self.config.packet_size)?;
        self.record(
            time,
            node,
            TraceKind::MessageSent {
                seq: out.seq,
                dst,
                opcode: out.header.opcode,
                kind: out.header.kind,
                variant: out.header.variant,
                payload_len: out.header.payload_len,
                packets: packets.len(),
            },
        );
        let injected = if dst == node {
            let delivery = Event::Deliver { node, origin: node, header: out.header, payload: out.payload };
            self.events.push(time + self.config.core.rx_handler_cycles, delivery);
            time
        } else {
            let path: Arc<[usize]> = self.topology.route(node, dst)?.into();
            let mut injected = time;
            for packet in packets {
                let transit = self.links[path[0]].send_packet(&self.config.link, packet.body.len(), time);
                injected = transit.injected();
                self.record(
                    time,
                    node,
                    TraceKind::PacketDeparted {
                        link: path[0],
                        origin: node,
                        seq: packet.seq,
                        index: packet.index,
                        count: packet.count,
                        frag_len: packet.frag_len(),
                        depart: transit.depart,
                    },
                );
                self.events.push(transit.arrival, Event::Arrive { origin: node, packet, path: path.clone(), hop: 0 });
            }
            injected
        };
        if let (Some(h), true) = (out.handle, out.kind != CommandKind::Get) {
            self.events.push(injected, Event::Complete(h));
        }
        self.kick(node, time);
        Ok(())
    }

    fn on_arrive(
        &mut self,
        origin: NodeId,
        packet: Packet,
        path: Arc<[usize]>,
        hop: usize,
        time: u64,
    ) -> Result<(), SimError> {
        let link = path[hop];
        let here = self.links[link].to;
        let final_hop = hop + 1 == path.len();
        self.record(
            time,
            here,
            TraceKind::PacketArrived {
                link,
                origin,
                seq: packet.seq,
                index: packet.index,
                count: packet.count,
                final_hop,
            },
        );
        if !final_hop {
            let next = path[hop + 1];
            let transit = self.links[next].send_packet(&self.config.link, packet.body.len(), time);
            self.events.push(transit.arrival, Event::Arrive { origin, packet, path, hop: hop + 1 });
            return Ok(());
        }
        let done = self.nodes[here.index()].core.receive_packet(origin, packet).map_err(Self::core_err(here))?;
        if let Some((header, payload)) = done {
            self.events.push(
                time + self.config.core.rx_handler_cycles,
                Event::Deliver { node: here, origin, header, payload },
            );
        }
        Ok(())
    }

    fn deliver(&mut self, node: NodeId, delivery: Delivery, time: u64) -> Result<(), SimError> {
        let Delivery { origin, header, payload } = delivery;
        self.record(
            time,
            node,
            TraceKind::MessageDelivered {
                origin,
                opcode: header.opcode,
                kind: header.kind,
                payload_len: header.payload_len,
            },
        );
        let n = &mut self.nodes[node.index()];
        let effects = n.core.on_message(&header, &payload, &mut n.memory).map_err(Self::core_err(node))?;
        for effect in effects {
            self.record(time, node, TraceKind::Effect(effect.clone()));
            match effect {
                Effect::GetCompleted { handle: Some(h), .. } => self.complete(h, time),
                Effect::ReplyQueued { .. } => self.kick(node, time),
                Effect::ComputeArgs { args } => {
                    let command = ComputeCommand::decode_args(&args).map_err(Self::compute_err(node))?;
                    let n = &mut self.nodes[node.index()];
                    n.engine.enqueue(Job { command, handle: None }, &n.memory).map_err(Self::compute_err(node))?;
                    self.try_start_compute(node, time)?;
                }
                Effect::BarrierReleased { epoch } => {
                    let n = &mut self.nodes[node.index()];
                    n.barrier_epoch = n.barrier_epoch.max(epoch);
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn try_start_compute(&mut self, node: NodeId, time: u64) -> Result<(), SimError> {
        let n = &mut self.nodes[node.index()];
        let Some(started) = n.engine.start_next(time, &n.memory).map_err(Self::compute_err(node))? else {
            return Ok(());
        };
        n.running_compute = started.handle;
        if let Some(h) = started.handle {
            self.parents.insert(h, Parent::default());
        }
        self.record(
            time,
            node,
            TraceKind::ComputeStarted { handle: started.handle, cycles: started.cycles, chunks: started.chunk_times.len() },
        );
        for (index, &at) in started.chunk_times.iter().enumerate() {
            self.events.push(at, Event::ComputeChunk { node, index: index as u64 });
        }
        self.events.push(started.start + started.cycles, Event::ComputeFinish(node));
        Ok(())
    }

    fn on_chunk(&mut self, node: NodeId, index: u64, time: u64) -> Result<(), SimError> {
        let n = &mut self.nodes[node.index()];
        let chunk = n.engine.emit_chunk(index, &mut n.memory).map_err(Self::compute_err(node))?;
        let parent = n.running_compute;
        let bytes = match &chunk.command {
            Command::Put { source, .. } => source.len,
            Command::AmRequest { source, .. } => source.map_or(0, |s| s.len),
            _ => 0,
        };
        self.record(
            time,
            node,
            TraceKind::ArtEmitted { chunk: index, results: chunk.results, valid_at: chunk.valid_at, bytes },
        );
        let handle = parent.map(|p| {
            let child = self.alloc_handle(node);
            self.child_parent.insert(child, p);
            self.parents.entry(p).or_default().outstanding += 1;
            child
        });
        let kind = chunk.command.kind();
        let queued = Queued { command: chunk.command, handle };
        let n = &mut self.nodes[node.index()];
        if n.art_backlog.is_empty() && n.core.free_slots(QueueClass::Compute) > 0 {
            n.core.submit_command(queued.command, QueueClass::Compute, handle).map_err(Self::core_err(node))?;
        } else {
            n.art_backlog.push_back(queued);
        }
        self.record(time, node, TraceKind::CommandSubmitted { handle, queue: QueueClass::Compute, kind });
        self.kick(node, time);
        Ok(())
    }

    fn on_compute_finish(&mut self, node: NodeId, time: u64) -> Result<(), SimError> {
        let n = &mut self.nodes[node.index()];
        let finished = n.engine.finish(&mut n.memory).map_err(Self::compute_err(node))?;
        n.running_compute = None;
        self.record(
            time,
            node,
            TraceKind::ComputeFinished { handle: finished.handle, macs: finished.macs, cycles: finished.cycles },
        );
        if let Some(h) = finished.handle {
            self.parents.entry(h).or_default().finished = true;
            self.maybe_complete_parent(h, time);
        }
        self.try_start_compute(node, time)
    }

    fn maybe_complete_parent(&mut self, parent: Handle, time: u64) {
        if self.parents.get(&parent).is_some_and(|p| p.finished && p.outstanding == 0) {
            self.parents.remove(&parent);
            self.complete(parent, time);
        }
    }

    fn complete(&mut self, handle: Handle, time: u64) {
        if let Some(parent) = self.child_parent.remove(&handle) {
            if let Some(p) = self.parents.get_mut(&parent) {
                p.outstanding -= 1;
            }
            self.maybe_complete_parent(parent, time);
            return;
        }
        if let Some(state) = self.handles.get_mut(&handle) {
            if *state == HandleState::Pending {
                *state = HandleState::Done { at: time };
                self.record(time, handle.node, TraceKind::HandleCompleted { handle });
            }
        }
    }
}
