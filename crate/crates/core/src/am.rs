//! Per-node active-message core.
//!
//! Commands enter one of three bounded queues according to who issued them
//! (remote-triggered replies, the host, the compute engine). The scheduler
//! grants them round-robin, the sequencer turns each into a message, and the
//! receive path dispatches incoming messages by opcode. All state here is
//! confined to one node; time is the caller's business.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;

use crate::addressing::NodeId;
use crate::memory::{LocalRange, MemoryError, NodeMemory, Region};
use crate::wire::{MessageHeader, MessageKind, Packet, Reassembler, Token, Variant, WireError, MAX_ARGS};

pub mod opcode {
    pub const PUT: u8 = 0x01;
    pub const GET: u8 = 0x02;
    pub const COMPUTE: u8 = 0x03;
    pub const BARRIER_ARRIVE: u8 = 0x10;
    pub const BARRIER_RELEASE: u8 = 0x11;
    /// First opcode available to user handlers.
    pub const USER_MIN: u8 = 0x80;
    /// Remote element-wise accumulate of 16-bit elements.
    pub const ACCUM: u8 = 0x80;
}

pub const DEFAULT_QUEUE_DEPTH: usize = 64;
pub const BARRIER_ROOT: NodeId = NodeId(0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("{0:?} queue is full")]
    QueueFull(QueueClass),
    #[error("bad command: {0}")]
    BadCommand(String),
    #[error("no handler registered for opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("opcode {0:#04x} is reserved for built-in handlers")]
    ReservedOpcode(u8),
    #[error("opcode {0:#04x} already has a handler")]
    AlreadyRegistered(u8),
    #[error("handler for a request from node {requester} tried to reply to node {target}")]
    ReplyToNonRequester { requester: NodeId, target: NodeId },
    #[error("a reply was already issued for this request")]
    DuplicateReply,
    #[error("replies can only be issued from inside a handler")]
    NotInHandler,
    #[error("no pending request for token {0:?}")]
    UnknownToken(Token),
    #[error("variant violation: {0}")]
    VariantViolation(&'static str),
    #[error("handler failed: {0}")]
    Handler(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Completion identifier, numbered monotonically per issuing node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Handle {
    pub node: NodeId,
    pub id: u64,
}

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.node, self.id)
    }
}

/// Queue a command waits in. The discriminant is the arbitration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum QueueClass {
    Reply = 0,
    Host = 1,
    Compute = 2,
}

const ROTATION: [QueueClass; 3] = [QueueClass::Reply, QueueClass::Host, QueueClass::Compute];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CommandKind {
    Put,
    Get,
    AmRequest,
    AmReply,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Remote write from a local range into `dst`'s shared segment. With a
    /// token it answers a GET and travels as a reply.
    Put { dst: NodeId, source: LocalRange, dest_offset: u64, reply_to: Option<Token> },
    /// Remote read of `len` bytes at `src_offset` on `src` into the local
    /// shared segment at `dest_offset`.
    Get { src: NodeId, src_offset: u64, len: u32, dest_offset: u64 },
    AmRequest {
        dst: NodeId,
        variant: Variant,
        opcode: u8,
        args: Vec<u32>,
        source: Option<LocalRange>,
        dest_offset: u64,
    },
    AmReply {
        token: Token,
        variant: Variant,
        opcode: u8,
        args: Vec<u32>,
        source: Option<LocalRange>,
        dest_offset: u64,
    },
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Put { .. } => CommandKind::Put,
            Command::Get { .. } => CommandKind::Get,
            Command::AmRequest { .. } => CommandKind::AmRequest,
            Command::AmReply { .. } => CommandKind::AmReply,
        }
    }

    pub fn dst(&self) -> NodeId {
        match self {
            Command::Put { dst, .. } | Command::AmRequest { dst, .. } => *dst,
            Command::Get { src, .. } => *src,
            Command::AmReply { token, .. } => token.node(),
        }
    }

    fn validate(&self) -> Result<(), CoreError> {
        let (variant, args, source) = match self {
            Command::Put { .. } | Command::Get { .. } => return Ok(()),
            Command::AmRequest { variant, args, source, .. }
            | Command::AmReply { variant, args, source, .. } => (*variant, args, source),
        };
        if args.len() > MAX_ARGS {
            return Err(CoreError::Wire(WireError::TooManyArgs(args.len())));
        }
        if variant == Variant::Short && source.is_some_and(|s| s.len > 0) {
            return Err(CoreError::VariantViolation("short messages carry no payload"));
        }
        if let Some(s) = source {
            if s.len > u32::MAX as u64 {
                return Err(CoreError::BadCommand(format!("payload of {} bytes too large", s.len)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Queued {
    pub command: Command,
    pub handle: Option<Handle>,
}

/// A message produced by the sequencer, ready for the link.
#[derive(Debug, Clone)]
pub struct Outgoing {
    pub header: MessageHeader,
    pub payload: Bytes,
    pub seq: u64,
    pub handle: Option<Handle>,
    pub kind: CommandKind,
}

/// Where a received payload was placed for the handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PayloadPlacement {
    None,
    Scratch(LocalRange),
    Shared(LocalRange),
}

/// Observable consequence of a delivered message, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Effect {
    DmaWrite { region: Region, offset: u64, len: u64 },
    GetCompleted { token: Token, handle: Option<Handle> },
    ReplyQueued { token: Token, dst: NodeId },
    ComputeArgs { args: Vec<u32> },
    HandlerBegin { opcode: u8 },
    HandlerEnd { opcode: u8 },
    BarrierArrived { epoch: u32, count: usize },
    BarrierReleased { epoch: u32 },
}

/// What a user handler sees while it runs.
pub struct HandlerContext<'a> {
    node: NodeId,
    header: &'a MessageHeader,
    payload: PayloadPlacement,
    memory: &'a mut NodeMemory,
    reply: Option<Command>,
}

impl<'a> HandlerContext<'a> {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn src(&self) -> NodeId {
        self.header.src
    }

    pub fn token(&self) -> Token {
        self.header.token
    }

    pub fn kind(&self) -> MessageKind {
        self.header.kind
    }

    pub fn args(&self) -> &[u32] {
        &self.header.args
    }

    pub fn payload(&self) -> PayloadPlacement {
        self.payload
    }

    pub fn memory(&self) -> &NodeMemory {
        self.memory
    }

    pub fn memory_mut(&mut self) -> &mut NodeMemory {
        self.memory
    }

    pub fn am_reply_short(&mut self, token: Token, opcode: u8, args: &[u32]) -> Result<(), CoreError> {
        self.reply(token, Variant::Short, opcode, args, None, 0)
    }

    pub fn am_reply_medium(
        &mut self,
        token: Token,
        opcode: u8,
        args: &[u32],
        source: LocalRange,
    ) -> Result<(), CoreError> {
        self.reply(token, Variant::Medium, opcode, args, Some(source), 0)
    }

    pub fn am_reply_long(
        &mut self,
        token: Token,
        opcode: u8,
        args: &[u32],
        source: LocalRange,
        dest_offset: u64,
    ) -> Result<(), CoreError> {
        self.reply(token, Variant::Long, opcode, args, Some(source), dest_offset)
    }

    fn reply(
        &mut self,
        token: Token,
        variant: Variant,
        opcode: u8,
        args: &[u32],
        source: Option<LocalRange>,
        dest_offset: u64,
    ) -> Result<(), CoreError> {
        if self.header.kind == MessageKind::Reply {
            return Err(CoreError::BadCommand("replies cannot be answered".into()));
        }
        if token != self.header.token {
            return Err(CoreError::ReplyToNonRequester { requester: self.header.src, target: token.node() });
        }
        if self.reply.is_some() {
            return Err(CoreError::DuplicateReply);
        }
        let cmd = Command::AmReply { token, variant, opcode, args: args.to_vec(), source, dest_offset };
        cmd.validate()?;
        self.reply = Some(cmd);
        Ok(())
    }
}

pub type HandlerFn = Box<dyn FnMut(&mut HandlerContext<'_>) -> Result<(), CoreError> + Send>;

#[derive(Debug, Clone, Copy)]
struct PendingGet {
    handle: Option<Handle>,
    dest_offset: u64,
    len: u32,
}

pub struct CoreState {
    id: NodeId,
    node_count: usize,
    depth: usize,
    queues: [VecDeque<Queued>; 3],
    next_grant: usize,
    handlers: BTreeMap<u8, HandlerFn>,
    reassembly: BTreeMap<NodeId, Reassembler>,
    next_seq: u64,
    next_token: u64,
    pending_gets: BTreeMap<Token, PendingGet>,
    barrier_arrivals: BTreeMap<u32, Vec<Token>>,
}

impl fmt::Debug for CoreState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoreState")
            .field("id", &self.id)
            .field("queued", &self.queues.iter().map(VecDeque::len).collect::<Vec<_>>())
            .field("handlers", &self.handlers.keys().collect::<Vec<_>>())
            .field("pending_gets", &self.pending_gets.len())
            .finish()
    }
}

impl CoreState {
    pub fn new(id: NodeId, node_count: usize, depth: usize) -> Self {
        CoreState {
            id,
            node_count,
            depth,
            queues: Default::default(),
            next_grant: 0,
            handlers: BTreeMap::new(),
            reassembly: BTreeMap::new(),
            next_seq: 0,
            next_token: 0,
            pending_gets: BTreeMap::new(),
            barrier_arrivals: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn queue_len(&self, class: QueueClass) -> usize {
        self.queues[class as usize].len()
    }

    pub fn free_slots(&self, class: QueueClass) -> usize {
        self.depth.saturating_sub(self.queue_len(class))
    }

    pub fn has_work(&self) -> bool {
        self.queues.iter().any(|q| !q.is_empty())
    }

    pub fn pending_gets(&self) -> usize {
        self.pending_gets.len()
    }

    pub fn register_handler(&mut self, op: u8, handler: HandlerFn) -> Result<(), CoreError> {
        if op < opcode::USER_MIN {
            return Err(CoreError::ReservedOpcode(op));
        }
        if self.handlers.contains_key(&op) {
            return Err(CoreError::AlreadyRegistered(op));
        }
        self.handlers.insert(op, handler);
        Ok(())
    }

    pub fn has_handler(&self, op: u8) -> bool {
        self.handlers.contains_key(&op)
    }

    /// Enqueues a host- or compute-issued command.
    pub fn submit_command(&mut self, command: Command, class: QueueClass, handle: Option<Handle>) -> Result<(), CoreError> {
        if class == QueueClass::Reply || command.kind() == CommandKind::AmReply {
            return Err(CoreError::BadCommand("replies need a live request token".into()));
        }
        if let Command::Put { reply_to: Some(_), .. } = command {
            return Err(CoreError::BadCommand("put replies are issued by the receive path".into()));
        }
        if command.dst().index() >= self.node_count {
            return Err(CoreError::BadCommand(format!("destination {} out of range", command.dst())));
        }
        command.validate()?;
        self.push(class, Queued { command, handle })
    }

    fn push(&mut self, class: QueueClass, queued: Queued) -> Result<(), CoreError> {
        let q = &mut self.queues[class as usize];
        if q.len() >= self.depth {
            return Err(CoreError::QueueFull(class));
        }
        q.push_back(queued);
        Ok(())
    }

    /// Round-robin grant over reply, host and compute queues.
    pub fn schedule(&mut self) -> Option<(QueueClass, Queued)> {
        for step in 0..ROTATION.len() {
            let slot = (self.next_grant + step) % ROTATION.len();
            if let Some(q) = self.queues[slot].pop_front() {
                self.next_grant = (slot + 1) % ROTATION.len();
                return Some((ROTATION[slot], q));
            }
        }
        None
    }

    fn fresh_token(&mut self) -> Token {
        let t = Token::new(self.id, self.next_token);
        self.next_token += 1;
        t
    }

    /// Forms the message for a granted command, reading its payload by DMA.
    pub fn sequence(&mut self, queued: Queued, memory: &NodeMemory) -> Result<Outgoing, CoreError> {
        let Queued { command, handle } = queued;
        let kind = command.kind();
        let dst = command.dst();
        let read = |source: Option<LocalRange>| -> Result<Bytes, CoreError> {
            match source {
                Some(r) if r.len > 0 => Ok(Bytes::copy_from_slice(memory.view(r)?)),
                _ => Ok(Bytes::new()),
            }
        };
        let (header, payload) = match command {
            Command::Put { source, dest_offset, reply_to, .. } => {
                let payload = read(Some(source))?;
                let (msg_kind, token) = match reply_to {
                    Some(t) => (MessageKind::Reply, t),
                    None => (MessageKind::Request, self.fresh_token()),
                };
                let mut h = MessageHeader::new(msg_kind, Variant::Long, opcode::PUT, self.id, dst);
                h.dest_offset = dest_offset;
                h.token = token;
                (h, payload)
            }
            Command::Get { src_offset, len, dest_offset, .. } => {
                let token = self.fresh_token();
                self.pending_gets.insert(token, PendingGet { handle, dest_offset, len });
                let mut h = MessageHeader::new(MessageKind::Request, Variant::Short, opcode::GET, self.id, dst);
                h.token = token;
                h.args = vec![
                    src_offset as u32,
                    (src_offset >> 32) as u32,
                    len,
                    dest_offset as u32,
                    (dest_offset >> 32) as u32,
                ];
                (h, Bytes::new())
            }
            Command::AmRequest { variant, opcode, args, source, dest_offset, .. } => {
                let payload = read(source)?;
                let mut h = MessageHeader::new(MessageKind::Request, variant, opcode, self.id, dst);
                h.token = self.fresh_token();
                h.args = args;
                if variant == Variant::Long {
                    h.dest_offset = dest_offset;
                }
                (h, payload)
            }
            Command::AmReply { token, variant, opcode, args, source, dest_offset } => {
                let payload = read(source)?;
                let mut h = MessageHeader::new(MessageKind::Reply, variant, opcode, self.id, dst);
                h.token = token;
                h.args = args;
                if variant == Variant::Long {
                    h.dest_offset = dest_offset;
                }
                (h, payload)
            }
        };
        let mut header = header;
        header.payload_len = payload.len() as u32;
        let seq = self.next_seq;
        self.next_seq += 1;
        Ok(Outgoing { header, payload, seq, handle, kind })
    }

    /// Feeds one packet from `origin`'s in-order stream.
    pub fn receive_packet(
        &mut self,
        origin: NodeId,
        packet: Packet,
    ) -> Result<Option<(MessageHeader, Bytes)>, CoreError> {
        let r = self.reassembly.entry(origin).or_default();
        Ok(r.push(packet)?)
    }

    /// Reply-queue slots the receive path needs free before it may accept
    /// this message.
    pub fn reply_slots_needed(&self, header: &MessageHeader) -> usize {
        if header.opcode == opcode::BARRIER_ARRIVE && self.id == BARRIER_ROOT {
            self.node_count
        } else {
            1
        }
    }

    /// Receive-handler dispatch for a fully reassembled message.
    pub fn on_message(
        &mut self,
        header: &MessageHeader,
        payload: &Bytes,
        memory: &mut NodeMemory,
    ) -> Result<Vec<Effect>, CoreError> {
        let mut effects = Vec::new();
        match header.opcode {
            opcode::PUT => {
                if header.variant != Variant::Long {
                    return Err(CoreError::VariantViolation("PUT must be a long message"));
                }
                memory.dma_write(Region::Shared, header.dest_offset, payload)?;
                effects.push(Effect::DmaWrite {
                    region: Region::Shared,
                    offset: header.dest_offset,
                    len: payload.len() as u64,
                });
                if header.kind == MessageKind::Reply {
                    let pending = self
                        .pending_gets
                        .remove(&header.token)
                        .ok_or(CoreError::UnknownToken(header.token))?;
                    if pending.len as usize != payload.len() || pending.dest_offset != header.dest_offset {
                        return Err(CoreError::BadCommand("GET reply does not match its request".into()));
                    }
                    effects.push(Effect::GetCompleted { token: header.token, handle: pending.handle });
                }
            }
            opcode::GET => {
                if header.kind != MessageKind::Request || header.args.len() < 5 {
                    return Err(CoreError::BadCommand("malformed GET request".into()));
                }
                let src_offset = header.arg(0) as u64 | (header.arg(1) as u64) << 32;
                let len = header.arg(2) as u64;
                let dest_offset = header.arg(3) as u64 | (header.arg(4) as u64) << 32;
                memory.check(LocalRange::shared(src_offset, len))?;
                let reply = Command::Put {
                    dst: header.src,
                    source: LocalRange::shared(src_offset, len),
                    dest_offset,
                    reply_to: Some(header.token),
                };
                self.push(QueueClass::Reply, Queued { command: reply, handle: None })?;
                effects.push(Effect::ReplyQueued { token: header.token, dst: header.src });
            }
            opcode::COMPUTE => {
                self.place_payload(header, payload, memory, &mut effects)?;
                effects.push(Effect::ComputeArgs { args: header.args.clone() });
            }
            opcode::BARRIER_ARRIVE => {
                if self.id != BARRIER_ROOT || header.kind != MessageKind::Request {
                    return Err(CoreError::BadCommand("barrier arrivals go to the root".into()));
                }
                let epoch = header.arg(0);
                let arrivals = self.barrier_arrivals.entry(epoch).or_default();
                arrivals.push(header.token);
                let count = arrivals.len();
                effects.push(Effect::BarrierArrived { epoch, count });
                if count == self.node_count {
                    let tokens = self.barrier_arrivals.remove(&epoch).unwrap_or_default();
                    for token in tokens {
                        let release = Command::AmReply {
                            token,
                            variant: Variant::Short,
                            opcode: opcode::BARRIER_RELEASE,
                            args: vec![epoch],
                            source: None,
                            dest_offset: 0,
                        };
                        self.push(QueueClass::Reply, Queued { command: release, handle: None })?;
                        effects.push(Effect::ReplyQueued { token, dst: token.node() });
                    }
                }
            }
            opcode::BARRIER_RELEASE => {
                effects.push(Effect::BarrierReleased { epoch: header.arg(0) });
            }
            op if op >= opcode::USER_MIN => {
                let placement = self.place_payload(header, payload, memory, &mut effects)?;
                let handler = self.handlers.get_mut(&op).ok_or(CoreError::UnknownOpcode(op))?;
                let mut ctx = HandlerContext { node: self.id, header, payload: placement, memory, reply: None };
                effects.push(Effect::HandlerBegin { opcode: op });
                handler(&mut ctx)?;
                effects.push(Effect::HandlerEnd { opcode: op });
                if let Some(reply) = ctx.reply.take() {
                    let token = header.token;
                    self.push(QueueClass::Reply, Queued { command: reply, handle: None })?;
                    effects.push(Effect::ReplyQueued { token, dst: header.src });
                }
            }
            op => return Err(CoreError::UnknownOpcode(op)),
        }
        Ok(effects)
    }

    fn place_payload(
        &mut self,
        header: &MessageHeader,
        payload: &Bytes,
        memory: &mut NodeMemory,
        effects: &mut Vec<Effect>,
    ) -> Result<PayloadPlacement, CoreError> {
        Ok(match header.variant {
            Variant::Short => PayloadPlacement::None,
            Variant::Medium => {
                let range = memory.stage_medium(payload)?;
                effects.push(Effect::DmaWrite { region: Region::Private, offset: range.offset, len: range.len });
                PayloadPlacement::Scratch(range)
            }
            Variant::Long => {
                memory.dma_write(Region::Shared, header.dest_offset, payload)?;
                let range = LocalRange::shared(header.dest_offset, payload.len() as u64);
                effects.push(Effect::DmaWrite { region: Region::Shared, offset: range.offset, len: range.len });
                PayloadPlacement::Shared(range)
            }
        })
    }
}

/// The remote accumulate handler: adds a medium payload of 16-bit elements
/// into the receiver's shared segment at the byte offset in `args[0..2]`.
pub fn accumulate_handler() -> HandlerFn {
    Box::new(|ctx: &mut HandlerContext<'_>| {
        let PayloadPlacement::Scratch(range) = ctx.payload() else {
            return Err(CoreError::VariantViolation("accumulate expects a medium payload"));
        };
        let dest = ctx.args().first().copied().unwrap_or(0) as u64
            | (ctx.args().get(1).copied().unwrap_or(0) as u64) << 32;
        let incoming = ctx.memory().read_elements(range)?;
        let target = LocalRange::shared(dest, range.len);
        let mut current = ctx.memory().read_elements(target)?;
        for (c, x) in current.iter_mut().zip(&incoming) {
            *c = c
                .checked_add(*x)
                .ok_or_else(|| CoreError::Handler(format!("accumulate overflow at offset {dest:#x}")))?;
        }
        ctx.memory_mut().write_elements(Region::Shared, dest, &current)?;
        Ok(())
    })
}
