//! Bandwidth and latency measurements between two simulated nodes, and
//! their CSV form.
//!
//! Every transfer starts on an idle job. Bandwidth is transfer size over
//! the time from submission to completion: for PUT the remote write of the
//! last byte, for GET the local write of the last reply byte. Latency is
//! the arrival of the header packet at its destination (the reply header
//! for GET).

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::addressing::{GlobalAddress, NodeId};
use crate::api::{ApiError, Runtime};
use crate::config::JobConfig;
use crate::memory::LocalRange;
use crate::sim::TraceKind;

pub const PACKET_SIZES: [usize; 4] = [128, 256, 512, 1024];
pub const MAX_TRANSFER: u64 = 2 << 20;

pub const CSV_HEADER: &str = "op,packet_size,transfer_size,bandwidth_mbs,latency_us";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("no rows to write")]
    NoRows,
    #[error("measurement incomplete: {0}")]
    Incomplete(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Put,
    Get,
}

impl BenchOp {
    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Put => "put",
            BenchOp::Get => "get",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: BenchOp,
    pub packet_size: usize,
    pub transfer_size: u64,
    pub bandwidth_mbs: f64,
    pub latency_us: f64,
}

/// Powers of two from 4 B to 2 MiB.
pub fn transfer_sizes() -> Vec<u64> {
    (2..=21).map(|p| 1u64 << p).collect()
}

/// One measurement's raw timings, in link cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Timing {
    pub start: u64,
    pub header_arrival: u64,
    pub completion: u64,
}

/// Two-node job with room for the largest transfer at both ends.
pub struct Bench {
    rt: Runtime,
    packet_size: usize,
}

impl Bench {
    pub fn new(base: &JobConfig, packet_size: usize) -> Result<Self, BenchError> {
        // Measures between nodes 0 and 1; extra nodes only sit on the ring.
        let mut cfg = JobConfig { nodes: base.nodes.max(2), packet_size, trace: true, ..base.clone() };
        cfg.segment.shared_size = cfg.segment.shared_size.max(MAX_TRANSFER);
        Ok(Bench { rt: Runtime::start(cfg)?, packet_size })
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn time(&mut self, op: BenchOp, transfer: u64) -> Result<Timing, BenchError> {
        let rt = &mut self.rt;
        rt.run_until_idle()?;
        rt.take_trace();
        let start = rt.now();
        let (dst, h) = match op {
            BenchOp::Put => (NodeId(1), rt.put(0, GlobalAddress::new(1, 0), LocalRange::shared(0, transfer))?),
            BenchOp::Get => (NodeId(0), rt.get(0, GlobalAddress::new(1, 0), transfer, 0)?),
        };
        let done = rt.wait(h)?;
        rt.run_until_idle()?;
        let trace = rt.take_trace();
        let header_arrival = trace
            .iter()
            .find(|e| {
                e.node == dst && matches!(e.kind, TraceKind::PacketArrived { index: 0, final_hop: true, .. })
            })
            .map(|e| e.time)
            .ok_or_else(|| BenchError::Incomplete("no header arrival".into()))?;
        let completion = match op {
            BenchOp::Get => done,
            BenchOp::Put => trace
                .iter()
                .find(|e| e.node == dst && matches!(e.kind, TraceKind::MessageDelivered { .. }))
                .map(|e| e.time)
                .ok_or_else(|| BenchError::Incomplete("put never delivered".into()))?,
        };
        Ok(Timing { start, header_arrival, completion })
    }

    pub fn measure(&mut self, op: BenchOp, transfer: u64) -> Result<BenchRow, BenchError> {
        let t = self.time(op, transfer)?;
        let link = &self.rt.config().link;
        let elapsed_s = (t.completion - t.start) as f64 / link.clock_hz;
        Ok(BenchRow {
            op,
            packet_size: self.packet_size,
            transfer_size: transfer,
            bandwidth_mbs: transfer as f64 / elapsed_s / 1e6,
            latency_us: link.cycles_to_us(t.header_arrival - t.start),
        })
    }
}

/// Sweeps transfer sizes for each packet size.
pub fn bench_bandwidth(
    base: &JobConfig,
    op: BenchOp,
    packet_sizes: &[usize],
    transfers: &[u64],
) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for &packet in packet_sizes {
        let mut bench = Bench::new(base, packet)?;
        for &t in transfers {
            rows.push(bench.measure(op, t)?);
        }
    }
    Ok(rows)
}

/// Latency rows at the configured packet size. A payload of 0 is the short
/// (header-only) message.
pub fn bench_latency(base: &JobConfig, op: BenchOp, payloads: &[u64]) -> Result<Vec<BenchRow>, BenchError> {
    let mut bench = Bench::new(base, base.packet_size)?;
    payloads.iter().map(|&p| bench.measure(op, p)).collect()
}

/// Unweighted mean latency over `rows`, in microseconds.
pub fn mean_latency_us(rows: &[BenchRow]) -> f64 {
    rows.iter().map(|r| r.latency_us).sum::<f64>() / rows.len() as f64
}

pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| (a.op, a.packet_size, a.transfer_size).cmp(&(b.op, b.packet_size, b.transfer_size)));
}

/// CSV text with rows in (op, packet, transfer) order.
pub fn csv_string(rows: &[BenchRow]) -> Result<String, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::NoRows);
    }
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &sorted {
        writeln!(out, "{},{},{},{:.3},{:.4}", r.op.name(), r.packet_size, r.transfer_size, r.bandwidth_mbs, r.latency_us)
            .expect("writing to a string");
    }
    Ok(out)
}

pub fn emit_csv(rows: &[BenchRow], path: &Path) -> Result<(), BenchError> {
    let text = csv_string(rows)?;
    std::fs::write(path, text).map_err(|source| BenchError::Io { path: path.display().to_string(), source })
}
