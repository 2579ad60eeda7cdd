//! User-facing runtime with GASNet-style names, driven by the simulator.

use thiserror::Error;

use crate::addressing::{resolve_range, AddressError, GlobalAddress, NodeId, SegmentLayout};
use crate::am::{opcode, Command, CoreError, Handle, HandlerFn, BARRIER_ROOT};
use crate::compute::{ComputeCommand, ComputeError};
use crate::config::JobConfig;
use crate::memory::{Element, LocalRange, MemoryError, NodeMemory, Region, ELEMENT_SIZE};
use crate::sim::{HandleState, SimError, Simulator, TraceEvent};
use crate::wire::{Token, Variant};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("runtime is not attached")]
    NotAttached,
    #[error("unknown handle {0}")]
    UnknownHandle(Handle),
    #[error("operation {handle} failed: {reason}")]
    Failed { handle: Handle, reason: String },
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T, E = ApiError> = std::result::Result<T, E>;

#[derive(Debug)]
pub struct Runtime {
    config: JobConfig,
    sim: Option<Simulator>,
    barrier_epoch: u32,
}

impl Runtime {
    pub fn init(config: JobConfig) -> Result<Self> {
        config.validate().map_err(ApiError::InvalidConfig)?;
        Ok(Runtime { config, sim: None, barrier_epoch: 0 })
    }

    /// Allocates every node's zeroed segments and connects the topology.
    pub fn attach(&mut self, layout: SegmentLayout) -> Result<()> {
        if self.sim.is_some() {
            return Err(ApiError::InvalidConfig("runtime is already attached".into()));
        }
        let config = JobConfig { segment: layout, ..self.config.clone() };
        config.validate().map_err(ApiError::InvalidConfig)?;
        self.sim = Some(Simulator::new(&config)?);
        self.config = config;
        Ok(())
    }

    /// `init` followed by `attach` with the config's own segment sizes.
    pub fn start(config: JobConfig) -> Result<Self> {
        let layout = config.segment;
        let mut rt = Self::init(config)?;
        rt.attach(layout)?;
        Ok(rt)
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.config.nodes
    }

    pub fn sim(&self) -> Result<&Simulator> {
        self.sim.as_ref().ok_or(ApiError::NotAttached)
    }

    pub fn sim_mut(&mut self) -> Result<&mut Simulator> {
        self.sim.as_mut().ok_or(ApiError::NotAttached)
    }

    /// Current virtual time in link cycles.
    pub fn now(&self) -> u64 {
        self.sim.as_ref().map_or(0, Simulator::now)
    }

    pub fn cycles_to_us(&self, cycles: u64) -> f64 {
        self.config.link.cycles_to_us(cycles)
    }

    fn node(&self, node: impl Into<NodeId>) -> Result<NodeId> {
        Ok(node.into().check(self.config.nodes)?)
    }

    pub fn memory(&self, node: impl Into<NodeId>) -> Result<&NodeMemory> {
        let node = self.node(node)?;
        Ok(self.sim()?.memory(node))
    }

    pub fn memory_mut(&mut self, node: impl Into<NodeId>) -> Result<&mut NodeMemory> {
        let node = self.node(node)?;
        Ok(self.sim_mut()?.memory_mut(node))
    }

    pub fn write_shared(&mut self, node: impl Into<NodeId>, offset: u64, data: &[u8]) -> Result<()> {
        Ok(self.memory_mut(node)?.dma_write(Region::Shared, offset, data)?)
    }

    pub fn read_shared(&self, node: impl Into<NodeId>, offset: u64, len: u64) -> Result<Vec<u8>> {
        Ok(self.memory(node)?.dma_read(Region::Shared, offset, len)?)
    }

    pub fn write_elements(&mut self, node: impl Into<NodeId>, offset: u64, values: &[Element]) -> Result<()> {
        Ok(self.memory_mut(node)?.write_elements(Region::Shared, offset, values)?)
    }

    pub fn read_elements(&self, node: impl Into<NodeId>, offset: u64, count: usize) -> Result<Vec<Element>> {
        let range = LocalRange::shared(offset, (count * ELEMENT_SIZE) as u64);
        Ok(self.memory(node)?.read_elements(range)?)
    }

    pub fn register_handler(&mut self, node: impl Into<NodeId>, op: u8, handler: HandlerFn) -> Result<()> {
        let node = self.node(node)?;
        Ok(self.sim_mut()?.register_handler(node, op, handler)?)
    }

    fn submit(&mut self, node: NodeId, command: Command) -> Result<Handle> {
        Ok(self.sim_mut()?.submit(node, command)?)
    }

    fn check_source(&self, node: NodeId, source: LocalRange) -> Result<()> {
        self.sim()?.memory(node).check(source)?;
        if source.len > u32::MAX as u64 {
            return Err(CoreError::BadCommand(format!("{}-byte transfer exceeds 32 bits", source.len)).into());
        }
        Ok(())
    }

    /// Writes `source` (on `node`) to `dest`. Completes once the data has
    /// been injected into the network.
    pub fn put(&mut self, node: impl Into<NodeId>, dest: GlobalAddress, source: LocalRange) -> Result<Handle> {
        let node = self.node(node)?;
        dest.node.check(self.config.nodes)?;
        resolve_range(dest, source.len, &self.config.segment)?;
        self.check_source(node, source)?;
        self.submit(node, Command::Put { dst: dest.node, source, dest_offset: dest.offset, reply_to: None })
    }

    /// Reads `len` bytes at `src` into `node`'s shared segment at
    /// `dest_offset`. Completes when the reply payload has been written.
    pub fn get(&mut self, node: impl Into<NodeId>, src: GlobalAddress, len: u64, dest_offset: u64) -> Result<Handle> {
        let node = self.node(node)?;
        src.node.check(self.config.nodes)?;
        resolve_range(src, len, &self.config.segment)?;
        self.check_source(node, LocalRange::shared(dest_offset, len))?;
        self.submit(node, Command::Get { src: src.node, src_offset: src.offset, len: len as u32, dest_offset })
    }

    pub fn am_request_short(
        &mut self,
        node: impl Into<NodeId>,
        dst: impl Into<NodeId>,
        op: u8,
        args: &[u32],
    ) -> Result<Handle> {
        let (node, dst) = (self.node(node)?, self.node(dst)?);
        let command =
            Command::AmRequest { dst, variant: Variant::Short, opcode: op, args: args.to_vec(), source: None, dest_offset: 0 };
        self.submit(node, command)
    }

    /// The payload lands in the destination's private scratch buffer.
    pub fn am_request_medium(
        &mut self,
        node: impl Into<NodeId>,
        dst: impl Into<NodeId>,
        op: u8,
        args: &[u32],
        source: LocalRange,
    ) -> Result<Handle> {
        let (node, dst) = (self.node(node)?, self.node(dst)?);
        self.check_source(node, source)?;
        let command = Command::AmRequest {
            dst,
            variant: Variant::Medium,
            opcode: op,
            args: args.to_vec(),
            source: Some(source),
            dest_offset: 0,
        };
        self.submit(node, command)
    }

    /// The payload lands in the destination's shared segment at
    /// `dest_offset`.
    pub fn am_request_long(
        &mut self,
        node: impl Into<NodeId>,
        dst: impl Into<NodeId>,
        op: u8,
        args: &[u32],
        source: LocalRange,
        dest_offset: u64,
    ) -> Result<Handle> {
        let (node, dst) = (self.node(node)?, self.node(dst)?);
        resolve_range(GlobalAddress::new(dst, dest_offset), source.len, &self.config.segment)?;
        self.check_source(node, source)?;
        let command = Command::AmRequest {
            dst,
            variant: Variant::Long,
            opcode: op,
            args: args.to_vec(),
            source: Some(source),
            dest_offset,
        };
        self.submit(node, command)
    }

    /// Replies are only valid inside a handler, through its
    /// [`HandlerContext`](crate::am::HandlerContext).
    pub fn am_reply_short(&mut self, _token: Token, _op: u8, _args: &[u32]) -> Result<()> {
        Err(CoreError::NotInHandler.into())
    }

    pub fn am_reply_medium(&mut self, _token: Token, _op: u8, _args: &[u32], _source: LocalRange) -> Result<()> {
        Err(CoreError::NotInHandler.into())
    }

    pub fn am_reply_long(
        &mut self,
        _token: Token,
        _op: u8,
        _args: &[u32],
        _source: LocalRange,
        _dest_offset: u64,
    ) -> Result<()> {
        Err(CoreError::NotInHandler.into())
    }

    /// Sends a compute command to `dst`'s accelerator as a short request.
    pub fn am_compute(&mut self, node: impl Into<NodeId>, dst: impl Into<NodeId>, command: &ComputeCommand) -> Result<Handle> {
        self.am_request_short(node, dst, opcode::COMPUTE, &command.encode_args())
    }

    pub fn enqueue_compute(&mut self, node: impl Into<NodeId>, command: ComputeCommand) -> Result<Handle> {
        let node = self.node(node)?;
        Ok(self.sim_mut()?.enqueue_compute(node, command)?)
    }

    /// Centralized barrier through node 0. Returns the virtual time at which
    /// the last node was released.
    pub fn barrier(&mut self) -> Result<u64> {
        let nodes = self.config.nodes;
        if nodes == 1 {
            return Ok(self.now());
        }
        self.barrier_epoch += 1;
        let epoch = self.barrier_epoch;
        let mut arrivals = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let node = NodeId(i as u16);
            arrivals.push(self.am_request_short(node, BARRIER_ROOT, opcode::BARRIER_ARRIVE, &[epoch])?);
        }
        let sim = self.sim_mut()?;
        let released =
            sim.run_until(|s| (0..nodes).all(|i| s.barrier_epoch(NodeId(i as u16)) >= epoch))?;
        for h in arrivals {
            sim.forget(h);
        }
        if !released {
            return Err(SimError::Stalled(format!("barrier epoch {epoch} never released")).into());
        }
        Ok(sim.now())
    }

    /// Non-advancing completion check.
    pub fn poll(&self, handle: Handle) -> Result<HandleState> {
        self.sim()?.state(handle).cloned().ok_or(ApiError::UnknownHandle(handle))
    }

    /// Drives the simulation until `handle` resolves. A handle can be waited
    /// on once; it is released afterwards. Returns the completion time.
    pub fn wait(&mut self, handle: Handle) -> Result<u64> {
        let sim = self.sim_mut()?;
        if sim.state(handle).is_none() {
            return Err(ApiError::UnknownHandle(handle));
        }
        let resolved = sim.run_until(|s| s.state(handle) != Some(&HandleState::Pending))?;
        if !resolved {
            return Err(SimError::Stalled(format!("handle {handle} never completed")).into());
        }
        match sim.forget(handle) {
            Some(HandleState::Done { at }) => Ok(at),
            Some(HandleState::Failed(reason)) => Err(ApiError::Failed { handle, reason }),
            _ => Err(ApiError::UnknownHandle(handle)),
        }
    }

    pub fn wait_all(&mut self, handles: &[Handle]) -> Result<u64> {
        let mut last = self.now();
        for &h in handles {
            last = last.max(self.wait(h)?);
        }
        Ok(last)
    }

    pub fn run_until_idle(&mut self) -> Result<u64> {
        Ok(self.sim_mut()?.run_until_idle()?)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.sim.as_ref().map_or(&[], |s| s.trace())
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.sim.as_mut().map_or_else(Vec::new, Simulator::take_trace)
    }
}
