//! Systolic-array accelerator model: command encoding, exact integer
//! kernels, cycle costs, and automatic result transfer (ART).
//!
//! Numerics and timing are decoupled. A command's values are computed when
//! it starts; they land in memory chunk by chunk as the modeled array
//! produces them, at a uniform rate over the command's cycle count.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addressing::{GlobalAddress, NodeId};
use crate::am::{Command, Handle};
use crate::memory::{Element, LocalRange, MemoryError, NodeMemory, Region, ELEMENT_SIZE};
use crate::wire::Variant;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComputeError {
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("malformed compute arguments: {0}")]
    BadArgs(String),
    #[error("result at byte offset {offset:#x} does not fit a 16-bit element")]
    Overflow { offset: u64 },
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlaConfig {
    pub pe_rows: u32,
    pub pe_cols: u32,
    pub macs_per_pe_per_cycle: u32,
    pub clock_hz: f64,
    pub drain_overhead_cycles: u64,
}

impl Default for DlaConfig {
    fn default() -> Self {
        DlaConfig {
            pe_rows: 16,
            pe_cols: 8,
            macs_per_pe_per_cycle: 16,
            clock_hz: 250e6,
            drain_overhead_cycles: 256,
        }
    }
}

impl DlaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pe_rows == 0 || self.pe_cols == 0 || self.macs_per_pe_per_cycle == 0 {
            return Err("DLA array dimensions must be positive".into());
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err("DLA clock must be positive".into());
        }
        Ok(())
    }

    pub fn macs_per_cycle(&self) -> u64 {
        self.pe_rows as u64 * self.pe_cols as u64 * self.macs_per_pe_per_cycle as u64
    }

    pub fn peak_gops(&self) -> f64 {
        self.macs_per_cycle() as f64 * 2.0 * self.clock_hz / 1e9
    }

    pub fn cycles_for_macs(&self, macs: u64) -> u64 {
        macs.div_ceil(self.macs_per_cycle()) + self.drain_overhead_cycles
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.clock_hz
    }

    /// Throughput of `macs` multiply-accumulates done in `cycles`, counting
    /// two operations per MAC.
    pub fn gops(&self, macs: u64, cycles: u64) -> f64 {
        2.0 * macs as f64 / self.seconds(cycles) / 1e9
    }
}

/// Matrix product of row-major `m×k` and `k×n` operands into `m×n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatMul {
    pub m: u32,
    pub k: u32,
    pub n: u32,
    pub a_offset: u32,
    pub b_offset: u32,
    pub c_offset: u32,
}

/// Stride-1 convolution. Input is `c_in×h×w`, weights `kernels×c_in×r×s`,
/// output `kernels×h_out×w_out`, all channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: u32,
    pub h: u32,
    pub w: u32,
    pub kernels: u32,
    pub r: u32,
    pub s: u32,
    pub pad: u32,
    pub in_offset: u32,
    pub w_offset: u32,
    pub out_offset: u32,
}

impl Conv2d {
    /// Same-padded convolution of odd `r×r` kernels.
    pub fn same(c_in: u32, h: u32, w: u32, kernels: u32, r: u32) -> Self {
        Conv2d { c_in, h, w, kernels, r, s: r, pad: r / 2, in_offset: 0, w_offset: 0, out_offset: 0 }
    }

    pub fn h_out(&self) -> u64 {
        (self.h as u64 + 2 * self.pad as u64 + 1).saturating_sub(self.r as u64)
    }

    pub fn w_out(&self) -> u64 {
        (self.w as u64 + 2 * self.pad as u64 + 1).saturating_sub(self.s as u64)
    }
}

/// Element-wise `dst += src` over `len` elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accumulate {
    pub src_offset: u32,
    pub dst_offset: u32,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComputeKind {
    MatMul(MatMul),
    Conv2d(Conv2d),
    Accumulate(Accumulate),
}

/// Streams results to `dest` while the command runs: one transfer per
/// `every_n_results` valid results. Without an opcode the transfer is a
/// PUT; with one it is a medium request whose args carry the destination
/// offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtConfig {
    pub every_n_results: u32,
    pub dest: GlobalAddress,
    pub element_size: u32,
    pub opcode: Option<u8>,
}

impl ArtConfig {
    pub fn put(every_n_results: u32, dest: GlobalAddress) -> Self {
        ArtConfig { every_n_results, dest, element_size: ELEMENT_SIZE as u32, opcode: None }
    }

    pub fn via(every_n_results: u32, dest: GlobalAddress, opcode: u8) -> Self {
        ArtConfig { every_n_results, dest, element_size: ELEMENT_SIZE as u32, opcode: Some(opcode) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCommand {
    pub kind: ComputeKind,
    /// Add results into the existing output instead of overwriting it.
    pub accumulate: bool,
    pub art: Option<ArtConfig>,
}

const KIND_MATMUL: u32 = 1;
const KIND_CONV: u32 = 2;
const KIND_ACCUMULATE: u32 = 3;
const FLAG_ACCUMULATE: u32 = 1 << 8;
const FLAG_ART: u32 = 1 << 9;

impl ComputeCommand {
    pub fn new(kind: ComputeKind) -> Self {
        ComputeCommand { kind, accumulate: false, art: None }
    }

    pub fn matmul(mm: MatMul) -> Self {
        Self::new(ComputeKind::MatMul(mm))
    }

    pub fn conv2d(conv: Conv2d) -> Self {
        Self::new(ComputeKind::Conv2d(conv))
    }

    pub fn accumulate(acc: Accumulate) -> Self {
        Self::new(ComputeKind::Accumulate(acc))
    }

    pub fn with_art(mut self, art: ArtConfig) -> Self {
        self.art = Some(art);
        self
    }

    pub fn accumulating(mut self) -> Self {
        self.accumulate = true;
        self
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            ComputeKind::MatMul(mm) => mm.m as u64 * mm.k as u64 * mm.n as u64,
            ComputeKind::Conv2d(c) => {
                c.kernels as u64 * c.c_in as u64 * c.r as u64 * c.s as u64 * c.h_out() * c.w_out()
            }
            ComputeKind::Accumulate(a) => a.len as u64,
        }
    }

    /// Number of output elements.
    pub fn results(&self) -> u64 {
        match self.kind {
            ComputeKind::MatMul(mm) => mm.m as u64 * mm.n as u64,
            ComputeKind::Conv2d(c) => c.kernels as u64 * c.h_out() * c.w_out(),
            ComputeKind::Accumulate(a) => a.len as u64,
        }
    }

    pub fn output(&self) -> LocalRange {
        let offset = match self.kind {
            ComputeKind::MatMul(mm) => mm.c_offset,
            ComputeKind::Conv2d(c) => c.out_offset,
            ComputeKind::Accumulate(a) => a.dst_offset,
        };
        LocalRange::shared(offset as u64, self.results() * ELEMENT_SIZE as u64)
    }

    fn inputs(&self) -> Vec<LocalRange> {
        let es = ELEMENT_SIZE as u64;
        match self.kind {
            ComputeKind::MatMul(mm) => vec![
                LocalRange::shared(mm.a_offset as u64, mm.m as u64 * mm.k as u64 * es),
                LocalRange::shared(mm.b_offset as u64, mm.k as u64 * mm.n as u64 * es),
            ],
            ComputeKind::Conv2d(c) => vec![
                LocalRange::shared(c.in_offset as u64, c.c_in as u64 * c.h as u64 * c.w as u64 * es),
                LocalRange::shared(
                    c.w_offset as u64,
                    c.kernels as u64 * c.c_in as u64 * c.r as u64 * c.s as u64 * es,
                ),
            ],
            ComputeKind::Accumulate(a) => vec![LocalRange::shared(a.src_offset as u64, a.len as u64 * es)],
        }
    }

    pub fn cycles(&self, dla: &DlaConfig) -> u64 {
        match self.kind {
            ComputeKind::Accumulate(a) => {
                (a.len as u64).div_ceil(dla.pe_rows as u64 * dla.pe_cols as u64) + dla.drain_overhead_cycles
            }
            _ => dla.cycles_for_macs(self.macs()),
        }
    }

    /// Checks dimensions, ART settings and that every operand lies inside
    /// `memory`'s shared segment.
    pub fn validate(&self, memory: &NodeMemory) -> Result<(), ComputeError> {
        match self.kind {
            ComputeKind::MatMul(mm) => {
                if mm.m == 0 || mm.k == 0 || mm.n == 0 {
                    return Err(ComputeError::BadDims(format!("matmul {}x{}x{}", mm.m, mm.k, mm.n)));
                }
            }
            ComputeKind::Conv2d(c) => {
                if c.c_in == 0 || c.h == 0 || c.w == 0 || c.kernels == 0 || c.r == 0 || c.s == 0 {
                    return Err(ComputeError::BadDims("convolution dimensions must be positive".into()));
                }
                if c.r > u16::MAX as u32 || c.s > u16::MAX as u32 {
                    return Err(ComputeError::BadDims("kernel extent exceeds 16 bits".into()));
                }
                if c.pad >= c.r || c.pad >= c.s || c.h_out() == 0 || c.w_out() == 0 {
                    return Err(ComputeError::BadDims(format!(
                        "{}x{} kernel with padding {} on a {}x{} map",
                        c.r, c.s, c.pad, c.h, c.w
                    )));
                }
            }
            ComputeKind::Accumulate(a) => {
                if a.len == 0 {
                    return Err(ComputeError::BadDims("accumulate of zero elements".into()));
                }
            }
        }
        if let Some(art) = self.art {
            if art.every_n_results == 0 {
                return Err(ComputeError::BadArgs("ART chunk size must be positive".into()));
            }
            if art.element_size as usize != ELEMENT_SIZE {
                return Err(ComputeError::BadArgs(format!(
                    "ART element size {} does not match the {ELEMENT_SIZE}-byte element",
                    art.element_size
                )));
            }
        }
        for range in self.inputs().into_iter().chain([self.output()]) {
            memory.check(range)?;
        }
        Ok(())
    }

    /// Flattens the command into compute-message arguments.
    pub fn encode_args(&self) -> Vec<u32> {
        let mut flags = if self.accumulate { FLAG_ACCUMULATE } else { 0 };
        if self.art.is_some() {
            flags |= FLAG_ART;
        }
        let mut args = match self.kind {
            ComputeKind::MatMul(mm) => {
                vec![KIND_MATMUL | flags, mm.m, mm.k, mm.n, mm.a_offset, mm.b_offset, mm.c_offset]
            }
            ComputeKind::Conv2d(c) => vec![
                KIND_CONV | flags,
                c.c_in,
                c.h,
                c.w,
                c.kernels,
                c.r | c.s << 16,
                c.pad,
                c.in_offset,
                c.w_offset,
                c.out_offset,
            ],
            ComputeKind::Accumulate(a) => vec![KIND_ACCUMULATE | flags, a.src_offset, a.dst_offset, a.len],
        };
        if let Some(art) = self.art {
            let (op, has_op) = art.opcode.map_or((0, 0), |o| (o as u32, 1));
            args.extend([
                art.every_n_results,
                art.dest.node.0 as u32 | op << 16 | has_op << 24,
                u32::try_from(art.dest.offset).expect("ART destination offset fits 32 bits"),
                art.element_size,
            ]);
        }
        args
    }

    pub fn decode_args(args: &[u32]) -> Result<Self, ComputeError> {
        let head = *args.first().ok_or_else(|| ComputeError::BadArgs("no arguments".into()))?;
        let need = |n: usize| {
            if args.len() < n {
                Err(ComputeError::BadArgs(format!("expected {n} arguments, got {}", args.len())))
            } else {
                Ok(())
            }
        };
        let (kind, used) = match head & 0xff {
            KIND_MATMUL => {
                need(7)?;
                let mm = MatMul {
                    m: args[1],
                    k: args[2],
                    n: args[3],
                    a_offset: args[4],
                    b_offset: args[5],
                    c_offset: args[6],
                };
                (ComputeKind::MatMul(mm), 7)
            }
            KIND_CONV => {
                need(10)?;
                let c = Conv2d {
                    c_in: args[1],
                    h: args[2],
                    w: args[3],
                    kernels: args[4],
                    r: args[5] & 0xffff,
                    s: args[5] >> 16,
                    pad: args[6],
                    in_offset: args[7],
                    w_offset: args[8],
                    out_offset: args[9],
                };
                (ComputeKind::Conv2d(c), 10)
            }
            KIND_ACCUMULATE => {
                need(4)?;
                (ComputeKind::Accumulate(Accumulate { src_offset: args[1], dst_offset: args[2], len: args[3] }), 4)
            }
            other => return Err(ComputeError::BadArgs(format!("unknown compute kind {other}"))),
        };
        let art = if head & FLAG_ART != 0 {
            need(used + 4)?;
            let route = args[used + 1];
            Some(ArtConfig {
                every_n_results: args[used],
                dest: GlobalAddress::new(NodeId((route & 0xffff) as u16), args[used + 2] as u64),
                element_size: args[used + 3],
                opcode: (route >> 24 & 1 == 1).then_some((route >> 16 & 0xff) as u8),
            })
        } else {
            None
        };
        Ok(ComputeCommand { kind, accumulate: head & FLAG_ACCUMULATE != 0, art })
    }

    /// Exact values of every output element, before accumulation into the
    /// existing output.
    pub fn evaluate(&self, memory: &NodeMemory) -> Result<Vec<i64>, ComputeError> {
        let inputs = self.inputs();
        match self.kind {
            ComputeKind::MatMul(mm) => {
                let a = memory.read_elements(inputs[0])?;
                let b = memory.read_elements(inputs[1])?;
                Ok(matmul_kernel(&a, &b, mm.m as usize, mm.k as usize, mm.n as usize))
            }
            ComputeKind::Conv2d(c) => {
                let input = memory.read_elements(inputs[0])?;
                let weights = memory.read_elements(inputs[1])?;
                Ok(conv2d_kernel(&input, &weights, &c))
            }
            ComputeKind::Accumulate(_) => {
                Ok(memory.read_elements(inputs[0])?.into_iter().map(i64::from).collect())
            }
        }
    }
}

/// Accumulator for the kernels. `i32` is used whenever the worst-case
/// partial sum provably fits, `i64` otherwise.
trait Acc: Copy + Default + Send + Sync + std::ops::AddAssign + std::ops::Mul<Output = Self> + From<i16> + Into<i64> {}
impl Acc for i32 {}
impl Acc for i64 {}

fn max_abs(xs: &[Element]) -> u64 {
    xs.iter().map(|x| x.unsigned_abs() as u64).max().unwrap_or(0)
}

fn fits_i32(a: &[Element], b: &[Element], terms: u64) -> bool {
    max_abs(a)
        .checked_mul(max_abs(b))
        .and_then(|p| p.checked_mul(terms))
        .is_some_and(|bound| bound <= i32::MAX as u64)
}

pub fn matmul_kernel(a: &[Element], b: &[Element], m: usize, k: usize, n: usize) -> Vec<i64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if fits_i32(a, b, k as u64) {
        matmul_with::<i32>(a, b, m, k, n)
    } else {
        matmul_with::<i64>(a, b, m, k, n)
    }
}

fn matmul_with<T: Acc>(a: &[Element], b: &[Element], m: usize, k: usize, n: usize) -> Vec<i64> {
    let mut out = vec![0i64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut acc = vec![T::default(); n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0 {
                continue;
            }
            let x = T::from(x);
            for (c, &y) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *c += x * T::from(y);
            }
        }
        for (o, c) in row.iter_mut().zip(acc) {
            *o = c.into();
        }
    });
    out
}

pub fn conv2d_kernel(input: &[Element], weights: &[Element], c: &Conv2d) -> Vec<i64> {
    let terms = c.c_in as u64 * c.r as u64 * c.s as u64;
    if fits_i32(input, weights, terms) {
        conv2d_with::<i32>(input, weights, c)
    } else {
        conv2d_with::<i64>(input, weights, c)
    }
}

fn conv2d_with<T: Acc>(input: &[Element], weights: &[Element], c: &Conv2d) -> Vec<i64> {
    let (h, w) = (c.h as usize, c.w as usize);
    let (ho, wo) = (c.h_out() as usize, c.w_out() as usize);
    let (r, s, pad) = (c.r as usize, c.s as usize, c.pad as usize);
    let c_in = c.c_in as usize;
    let mut out = vec![0i64; c.kernels as usize * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(kn, plane)| {
        let mut acc = vec![T::default(); ho * wo];
        for ch in 0..c_in {
            let image = &input[ch * h * w..(ch + 1) * h * w];
            for dy in 0..r {
                for dx in 0..s {
                    let wv = weights[((kn * c_in + ch) * r + dy) * s + dx];
                    if wv == 0 {
                        continue;
                    }
                    let wv = T::from(wv);
                    // Output column ox reads input column ox + dx - pad.
                    let x0 = pad.saturating_sub(dx);
                    let x1 = (w + pad).saturating_sub(dx).min(wo);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy + dy;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let src = &image[(iy - pad) * w + x0 + dx - pad..(iy - pad) * w + x1 + dx - pad];
                        let dst = &mut acc[oy * wo + x0..oy * wo + x1];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += wv * T::from(v);
                        }
                    }
                }
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = a.into();
        }
    });
    out
}

/// One ART transfer, ready to enter the compute queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtChunk {
    pub index: u64,
    pub results: u64,
    pub valid_at: u64,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Started {
    pub handle: Option<Handle>,
    pub start: u64,
    pub cycles: u64,
    /// Time at which each ART chunk's last result becomes valid.
    pub chunk_times: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finished {
    pub handle: Option<Handle>,
    pub macs: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone)]
pub struct Job {
    pub command: ComputeCommand,
    pub handle: Option<Handle>,
}

#[derive(Debug)]
struct Active {
    job: Job,
    start: u64,
    cycles: u64,
    values: Vec<i64>,
    written: u64,
}

/// The per-node compute command scheduler and accelerator.
#[derive(Debug)]
pub struct ComputeEngine {
    node: NodeId,
    config: DlaConfig,
    queue: VecDeque<Job>,
    active: Option<Active>,
}

impl ComputeEngine {
    pub fn new(node: NodeId, config: DlaConfig) -> Self {
        ComputeEngine { node, config, queue: VecDeque::new(), active: None }
    }

    pub fn config(&self) -> &DlaConfig {
        &self.config
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn enqueue(&mut self, job: Job, memory: &NodeMemory) -> Result<(), ComputeError> {
        job.command.validate(memory)?;
        self.queue.push_back(job);
        Ok(())
    }

    /// Starts the next queued command if the array is idle.
    pub fn start_next(&mut self, now: u64, memory: &NodeMemory) -> Result<Option<Started>, ComputeError> {
        if self.active.is_some() {
            return Ok(None);
        }
        let Some(job) = self.queue.pop_front() else { return Ok(None) };
        let command = job.command;
        let values = command.evaluate(memory)?;
        let cycles = command.cycles(&self.config);
        let results = command.results();
        let chunk_times = match command.art {
            Some(art) => {
                let n = art.every_n_results as u64;
                (0..results.div_ceil(n))
                    .map(|i| now + valid_time(cycles, ((i + 1) * n).min(results), results))
                    .collect()
            }
            None => Vec::new(),
        };
        let started = Started { handle: job.handle, start: now, cycles, chunk_times };
        self.active = Some(Active { job, start: now, cycles, values, written: 0 });
        Ok(Some(started))
    }

    fn write_through(active: &mut Active, end: u64, memory: &mut NodeMemory) -> Result<(), ComputeError> {
        let out = active.job.command.output();
        let add = active.job.command.accumulate
            || matches!(active.job.command.kind, ComputeKind::Accumulate(_));
        let es = ELEMENT_SIZE as u64;
        let range = LocalRange::shared(out.offset + active.written * es, (end - active.written) * es);
        let current = if add { Some(memory.read_elements(range)?) } else { None };
        let mut next = Vec::with_capacity((end - active.written) as usize);
        for (i, &v) in active.values[active.written as usize..end as usize].iter().enumerate() {
            let total = v + current.as_ref().map_or(0, |c| c[i] as i64);
            let e = Element::try_from(total)
                .map_err(|_| ComputeError::Overflow { offset: range.offset + i as u64 * es })?;
            next.push(e);
        }
        memory.write_elements(Region::Shared, range.offset, &next)?;
        active.written = end;
        Ok(())
    }

    /// Commits chunk `index` of the running command to memory and returns
    /// the transfer that ships it.
    pub fn emit_chunk(&mut self, index: u64, memory: &mut NodeMemory) -> Result<ArtChunk, ComputeError> {
        let active = self.active.as_mut().ok_or_else(|| ComputeError::BadArgs("no command running".into()))?;
        let art = active.job.command.art.ok_or_else(|| ComputeError::BadArgs("command has no ART".into()))?;
        let results = active.job.command.results();
        let n = art.every_n_results as u64;
        let first = index * n;
        let end = ((index + 1) * n).min(results);
        if first != active.written || first >= results {
            return Err(ComputeError::BadArgs(format!("ART chunk {index} out of order")));
        }
        Self::write_through(active, end, memory)?;
        let es = ELEMENT_SIZE as u64;
        let out = active.job.command.output();
        let source = LocalRange::shared(out.offset + first * es, (end - first) * es);
        let dest_offset = art.dest.offset + first * es;
        let command = match art.opcode {
            Some(opcode) => Command::AmRequest {
                dst: art.dest.node,
                variant: Variant::Medium,
                opcode,
                args: vec![dest_offset as u32, (dest_offset >> 32) as u32],
                source: Some(source),
                dest_offset: 0,
            },
            None => Command::Put { dst: art.dest.node, source, dest_offset, reply_to: None },
        };
        Ok(ArtChunk {
            index,
            results: end - first,
            valid_at: active.start + valid_time(active.cycles, end, results),
            command,
        })
    }

    /// Retires the running command: flushes any unwritten results and bumps
    /// the completion flag.
    pub fn finish(&mut self, memory: &mut NodeMemory) -> Result<Finished, ComputeError> {
        let mut active = self.active.take().ok_or_else(|| ComputeError::BadArgs("no command running".into()))?;
        let results = active.job.command.results();
        if active.written < results {
            Self::write_through(&mut active, results, memory)?;
        }
        memory.bump_completion_count();
        log::debug!("node {} finished compute in {} cycles", self.node, active.cycles);
        Ok(Finished { handle: active.job.handle, macs: active.job.command.macs(), cycles: active.cycles })
    }
}

/// Cycles after start at which the first `produced` of `total` results are
/// valid.
pub fn valid_time(cycles: u64, produced: u64, total: u64) -> u64 {
    ((cycles as u128 * produced as u128).div_ceil(total as u128)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::SegmentLayout;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[Element], b: &[Element], m: usize, k: usize, n: usize) -> Vec<i64> {
        let mut c = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] as i64 * b[p * n + j] as i64;
                }
            }
        }
        c
    }

    fn naive_conv(input: &[Element], weights: &[Element], c: &Conv2d) -> Vec<i64> {
        let (h, w, r, s, pad) = (c.h as i64, c.w as i64, c.r as usize, c.s as usize, c.pad as i64);
        let (ho, wo) = (c.h_out() as usize, c.w_out() as usize);
        let mut out = vec![0i64; c.kernels as usize * ho * wo];
        for k in 0..c.kernels as usize {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut sum = 0i64;
                    for ch in 0..c.c_in as usize {
                        for dy in 0..r {
                            for dx in 0..s {
                                let iy = oy as i64 + dy as i64 - pad;
                                let ix = ox as i64 + dx as i64 - pad;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let x = input[(ch * c.h as usize + iy as usize) * c.w as usize + ix as usize];
                                let wv = weights[((k * c.c_in as usize + ch) * r + dy) * s + dx];
                                sum += x as i64 * wv as i64;
                            }
                        }
                    }
                    out[(k * ho + oy) * wo + ox] = sum;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, len: usize, bound: i16) -> Vec<Element> {
        (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
    }

    fn memory() -> NodeMemory {
        NodeMemory::new(&SegmentLayout { shared_size: 1 << 20, private_size: 1 << 16 }, 4096)
    }

    #[test]
    fn peak_and_cycle_examples() {
        let dla = DlaConfig { drain_overhead_cycles: 512, ..DlaConfig::default() };
        assert_eq!(dla.macs_per_cycle(), 2048);
        assert!((dla.peak_gops() - 1024.0).abs() < 1e-9);
        let cmd = ComputeCommand::matmul(MatMul { m: 1024, k: 1024, n: 1024, a_offset: 0, b_offset: 0, c_offset: 0 });
        assert_eq!(cmd.cycles(&dla), 524_800);
        assert!((dla.seconds(524_800) - 2.0992e-3).abs() < 1e-12);
        let gops = dla.gops(cmd.macs(), 524_800);
        assert!((gops - 1023.0).abs() < 0.1, "{gops}");
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 4, 100);
        let id = [1, 0, 0, 1];
        let got = matmul_kernel(&id, &a, 2, 2, 2);
        assert_eq!(got, a.iter().map(|&x| x as i64).collect::<Vec<_>>());
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 64, 50);
        let b = random(&mut rng, 64, 50);
        assert_eq!(matmul_kernel(&a, &b, 8, 8, 8), naive_matmul(&a, &b, 8, 8, 8));
    }

    #[test]
    fn wide_operands_take_the_64_bit_path() {
        let a = vec![i16::MAX; 4];
        let b = vec![i16::MIN; 4];
        assert_eq!(matmul_kernel(&a, &b, 1, 4, 1), vec![4 * i16::MAX as i64 * i16::MIN as i64]);
    }

    #[test]
    fn identity_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&mut rng, 36, 1000);
        let c = Conv2d { c_in: 1, h: 6, w: 6, kernels: 1, r: 1, s: 1, pad: 0, in_offset: 0, w_offset: 0, out_offset: 0 };
        let got = conv2d_kernel(&input, &[1], &c);
        assert_eq!(got, input.iter().map(|&x| x as i64).collect::<Vec<_>>());
    }

    #[test]
    fn random_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Conv2d::same(4, 8, 8, 3, 3);
        let input = random(&mut rng, 4 * 64, 20);
        let weights = random(&mut rng, 3 * 4 * 9, 20);
        assert_eq!(conv2d_kernel(&input, &weights, &c), naive_conv(&input, &weights, &c));
    }

    #[test]
    fn conv_mac_count() {
        let c = Conv2d::same(256, 64, 64, 256, 3);
        assert_eq!(ComputeCommand::conv2d(c).macs(), 256 * 256 * 9 * 64 * 64);
    }

    #[test]
    fn bad_dims_and_bounds() {
        let mem = memory();
        let zero = ComputeCommand::matmul(MatMul { m: 0, k: 4, n: 4, a_offset: 0, b_offset: 0, c_offset: 0 });
        assert!(matches!(zero.validate(&mem), Err(ComputeError::BadDims(_))));
        let big = ComputeCommand::matmul(MatMul { m: 1024, k: 1024, n: 4, a_offset: 0, b_offset: 0, c_offset: 0 });
        assert!(matches!(big.validate(&mem), Err(ComputeError::Memory(MemoryError::OutOfBounds { .. }))));
        let mut bad_pad = Conv2d::same(1, 4, 4, 1, 3);
        bad_pad.pad = 3;
        assert!(matches!(ComputeCommand::conv2d(bad_pad).validate(&mem), Err(ComputeError::BadDims(_))));
    }

    #[test]
    fn art_chunk_counts() {
        let chunks = |results: u32, n: u32| {
            let mut mem = memory();
            let cmd = ComputeCommand::accumulate(Accumulate { src_offset: 0, dst_offset: 8192, len: results })
                .with_art(ArtConfig::put(n, GlobalAddress::new(1, 0)));
            let mut engine = ComputeEngine::new(NodeId(0), DlaConfig::default());
            engine.enqueue(Job { command: cmd, handle: None }, &mem).unwrap();
            let started = engine.start_next(0, &mem).unwrap().unwrap();
            let out: Vec<_> = (0..started.chunk_times.len() as u64)
                .map(|i| engine.emit_chunk(i, &mut mem).unwrap().results)
                .collect();
            engine.finish(&mut mem).unwrap();
            out
        };
        assert_eq!(chunks(1024, 256), vec![256; 4]);
        assert_eq!(chunks(1000, 256), vec![256, 256, 256, 232]);
    }

    #[test]
    fn fifo_execution_and_completion_flag() {
        let mut mem = memory();
        mem.write_elements(Region::Shared, 0, &[1, 2, 3, 4]).unwrap();
        let mut engine = ComputeEngine::new(NodeId(0), DlaConfig::default());
        let first = ComputeCommand::accumulate(Accumulate { src_offset: 0, dst_offset: 100, len: 4 });
        let second = ComputeCommand::accumulate(Accumulate { src_offset: 100, dst_offset: 200, len: 4 });
        let h = |id| Some(Handle { node: NodeId(0), id });
        engine.enqueue(Job { command: first, handle: h(1) }, &mem).unwrap();
        engine.enqueue(Job { command: second, handle: h(2) }, &mem).unwrap();
        let s = engine.start_next(0, &mem).unwrap().unwrap();
        assert_eq!(s.handle, h(1));
        assert!(engine.start_next(1, &mem).unwrap().is_none(), "array busy");
        assert_eq!(engine.finish(&mut mem).unwrap().handle, h(1));
        let s = engine.start_next(s.cycles, &mem).unwrap().unwrap();
        assert_eq!(s.handle, h(2));
        engine.finish(&mut mem).unwrap();
        assert_eq!(mem.read_elements(LocalRange::shared(200, 8)).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(mem.completion_count(), 2);
    }

    #[test]
    fn overflow_is_reported() {
        let mut mem = memory();
        mem.write_elements(Region::Shared, 0, &[i16::MAX, i16::MAX]).unwrap();
        let cmd = ComputeCommand::matmul(MatMul { m: 1, k: 2, n: 1, a_offset: 0, b_offset: 0, c_offset: 64 });
        let mut engine = ComputeEngine::new(NodeId(0), DlaConfig::default());
        engine.enqueue(Job { command: cmd, handle: None }, &mem).unwrap();
        engine.start_next(0, &mem).unwrap();
        assert_eq!(engine.finish(&mut mem).unwrap_err(), ComputeError::Overflow { offset: 64 });
    }

    fn arb_command() -> impl Strategy<Value = ComputeCommand> {
        let mm = (1u32..64, 1u32..64, 1u32..64, any::<u32>(), any::<u32>(), any::<u32>())
            .prop_map(|(m, k, n, a, b, c)| ComputeKind::MatMul(MatMul { m, k, n, a_offset: a, b_offset: b, c_offset: c }));
        let conv = (1u32..8, 1u32..32, 1u32..32, 1u32..8, 1u32..8, 1u32..8, 0u32..4, any::<u32>())
            .prop_map(|(c_in, h, w, kernels, r, s, pad, off)| {
                ComputeKind::Conv2d(Conv2d { c_in, h, w, kernels, r, s, pad, in_offset: off, w_offset: off / 2, out_offset: off / 3 })
            });
        let acc = (any::<u32>(), any::<u32>(), any::<u32>())
            .prop_map(|(s, d, l)| ComputeKind::Accumulate(Accumulate { src_offset: s, dst_offset: d, len: l }));
        let art = proptest::option::of((1u32..5000, any::<u16>(), 0u32..1 << 30, proptest::option::of(any::<u8>())).prop_map(
            |(n, node, off, opcode)| ArtConfig { every_n_results: n, dest: GlobalAddress::new(node, off as u64), element_size: 2, opcode },
        ));
        (prop_oneof![mm, conv, acc], any::<bool>(), art)
            .prop_map(|(kind, accumulate, art)| ComputeCommand { kind, accumulate, art })
    }

    proptest! {
        #[test]
        fn args_round_trip(cmd in arb_command()) {
            let args = cmd.encode_args();
            prop_assert!(args.len() <= crate::wire::MAX_ARGS);
            prop_assert_eq!(ComputeCommand::decode_args(&args).unwrap(), cmd);
        }

        #[test]
        fn art_conserves_bytes_and_respects_valid_times(len in 1u32..5000, n in 1u32..700, start in 0u64..1000) {
            let mut mem = memory();
            let cmd = ComputeCommand::accumulate(Accumulate { src_offset: 0, dst_offset: 16384, len })
                .with_art(ArtConfig::put(n, GlobalAddress::new(1, 0)));
            let mut engine = ComputeEngine::new(NodeId(0), DlaConfig::default());
            engine.enqueue(Job { command: cmd, handle: None }, &mem).unwrap();
            let started = engine.start_next(start, &mem).unwrap().unwrap();
            prop_assert_eq!(started.chunk_times.len() as u64, (len as u64).div_ceil(n as u64));
            let mut bytes = 0;
            let mut next_dest = 0;
            for (i, &t) in started.chunk_times.iter().enumerate() {
                let chunk = engine.emit_chunk(i as u64, &mut mem).unwrap();
                prop_assert_eq!(chunk.valid_at, t);
                let produced = (i as u64 + 1) * n as u64;
                let proportional = start as f64 + started.cycles as f64 * produced.min(len as u64) as f64 / len as f64;
                prop_assert!(t as f64 >= proportional - 1e-9);
                let Command::Put { source, dest_offset, .. } = chunk.command else { panic!("expected put") };
                prop_assert_eq!(dest_offset, next_dest);
                next_dest += source.len;
                bytes += source.len;
            }
            prop_assert_eq!(bytes, len as u64 * 2);
            prop_assert_eq!(*started.chunk_times.last().unwrap(), start + started.cycles);
        }

        #[test]
        fn numerics_independent_of_art(m in 1u32..12, k in 1u32..12, n in 1u32..12, chunk in 1u32..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, (m * k) as usize, 20);
            let b = random(&mut rng, (k * n) as usize, 20);
            let run = |art: Option<ArtConfig>| {
                let mut mem = memory();
                mem.write_elements(Region::Shared, 0, &a).unwrap();
                mem.write_elements(Region::Shared, 4096, &b).unwrap();
                let mut cmd = ComputeCommand::matmul(MatMul { m, k, n, a_offset: 0, b_offset: 4096, c_offset: 8192 });
                cmd.art = art;
                let mut engine = ComputeEngine::new(NodeId(0), DlaConfig::default());
                engine.enqueue(Job { command: cmd, handle: None }, &mem).unwrap();
                let s = engine.start_next(0, &mem).unwrap().unwrap();
                for i in 0..s.chunk_times.len() as u64 {
                    engine.emit_chunk(i, &mut mem).unwrap();
                }
                engine.finish(&mut mem).unwrap();
                mem.read_elements(LocalRange::shared(8192, (m * n * 2) as u64)).unwrap()
            };
            let plain = run(None);
            let streamed = run(Some(ArtConfig::put(chunk, GlobalAddress::new(1, 0))));
            prop_assert_eq!(&plain, &streamed);
            let oracle: Vec<Element> = naive_matmul(&a, &b, m as usize, k as usize, n as usize).into_iter().map(|v| v as Element).collect();
            prop_assert_eq!(plain, oracle);
        }
    }
}
