//! Active-message runtime for a partitioned global address space, with a
//! cycle-approximate simulator of accelerator nodes joined by serial links.
//!
//! The layers, bottom up:
//!
//! - [`addressing`], [`wire`], [`memory`]: global addresses, the message
//!   byte format, node memories.
//! - [`am`]: the per-node active-message core (queues, arbitration,
//!   sequencer, receive handlers).
//! - [`compute`]: the accelerator model and result streaming.
//! - [`transport`], [`sim`], [`socket`]: links and the event-driven job
//!   simulator, plus a TCP loopback transport.
//! - [`api`]: the user-facing runtime.
//! - [`workloads`], [`bench`]: the matmul/convolution case studies and the
//!   bandwidth/latency harness.

pub mod addressing;
pub mod am;
pub mod api;
pub mod bench;
pub mod compute;
pub mod config;
pub mod memory;
pub mod sim;
pub mod socket;
pub mod transport;
pub mod wire;
pub mod workloads;

pub use addressing::{GlobalAddress, NodeId, SegmentLayout};
pub use am::{opcode, Handle, HandlerContext, HandlerFn};
pub use api::{ApiError, Runtime};
pub use bench::{BenchOp, BenchRow};
pub use compute::{ArtConfig, ComputeCommand, Conv2d, DlaConfig, MatMul};
pub use config::{CoreConfig, JobConfig};
pub use memory::{Element, LocalRange, Region};
pub use sim::{HandleState, TraceEvent, TraceKind};
pub use transport::{LinkConfig, TopologyKind};
pub use wire::{MessageKind, Token, Variant};
