//! Shared fixtures for the criterion benchmarks.

use bytes::Bytes;
use pgasim::wire::{encode_message, MessageHeader};
use pgasim::workloads::{random_elements, INPUT_BOUND};
use pgasim::{Element, JobConfig, MessageKind, NodeId, Variant};

/// An encoded long PUT-style request carrying `payload_len` bytes.
pub fn long_message(payload_len: usize) -> Bytes {
    let mut header = MessageHeader::new(MessageKind::Request, Variant::Long, pgasim::opcode::PUT, NodeId(0), NodeId(1));
    header.payload_len = payload_len as u32;
    let payload: Vec<u8> = (0..payload_len).map(|i| i as u8).collect();
    encode_message(&header, &payload).expect("valid header")
}

/// A square pair of seeded input matrices.
pub fn matrices(n: usize) -> (Vec<Element>, Vec<Element>) {
    (random_elements(n * n, INPUT_BOUND, 1), random_elements(n * n, INPUT_BOUND, 2))
}

/// Default two-node job with `shared` bytes of shared segment.
pub fn job(shared: u64) -> JobConfig {
    let mut cfg = JobConfig { trace: false, ..JobConfig::default() };
    cfg.segment.shared_size = cfg.segment.shared_size.max(shared);
    cfg
}
