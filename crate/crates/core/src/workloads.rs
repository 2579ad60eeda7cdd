//! Two-node case studies: a block-partitioned matrix multiply and a
//! kernel-split convolution layer, plus the serial oracles that check them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addressing::{GlobalAddress, NodeId};
use crate::am::{accumulate_handler, opcode, Handle};
use crate::api::{ApiError, Runtime};
use crate::compute::{Accumulate, ArtConfig, ComputeCommand, ComputeError, Conv2d, MatMul};
use crate::config::JobConfig;
use crate::memory::{Element, LocalRange, ELEMENT_SIZE};

/// Results per ART transfer (4 KiB of 16-bit elements).
pub const ART_CHUNK_RESULTS: u32 = 2048;
/// Bound on generated input magnitudes, small enough that every case-study
/// result fits a 16-bit element.
pub const INPUT_BOUND: i16 = 2;

const ES: u64 = ELEMENT_SIZE as u64;

pub fn random_elements(len: usize, bound: i16, seed: u64) -> Vec<Element> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Textbook `m×k · k×n` product with 64-bit accumulation.
pub fn serial_matmul_oracle(a: &[Element], b: &[Element], m: usize, k: usize, n: usize) -> Result<Vec<i64>, ComputeError> {
    if m == 0 || k == 0 || n == 0 || a.len() != m * k || b.len() != k * n {
        return Err(ComputeError::BadDims(format!("{m}x{k} · {k}x{n} with {} and {} elements", a.len(), b.len())));
    }
    let mut c = vec![0i64; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p] as i64;
            for j in 0..n {
                c[i * n + j] += x * b[p * n + j] as i64;
            }
        }
    }
    Ok(c)
}

/// Direct convolution: every output sums input × weight over channels and
/// kernel taps, skipping taps that fall in the zero padding.
pub fn serial_conv_oracle(input: &[Element], weights: &[Element], conv: &Conv2d) -> Result<Vec<i64>, ComputeError> {
    let (c_in, h, w) = (conv.c_in as usize, conv.h as usize, conv.w as usize);
    let (kernels, r, s, pad) = (conv.kernels as usize, conv.r as usize, conv.s as usize, conv.pad as i64);
    if c_in == 0 || h == 0 || w == 0 || kernels == 0 || r == 0 || s == 0 {
        return Err(ComputeError::BadDims("convolution dimensions must be positive".into()));
    }
    if input.len() != c_in * h * w || weights.len() != kernels * c_in * r * s {
        return Err(ComputeError::BadDims("operand sizes do not match the convolution".into()));
    }
    let (ho, wo) = (conv.h_out() as usize, conv.w_out() as usize);
    if ho == 0 || wo == 0 {
        return Err(ComputeError::BadDims("empty output".into()));
    }
    let mut out = vec![0i64; kernels * ho * wo];
    for k in 0..kernels {
        for c in 0..c_in {
            for dy in 0..r {
                for dx in 0..s {
                    let wv = weights[((k * c_in + c) * r + dy) * s + dx] as i64;
                    for oy in 0..ho {
                        let iy = oy as i64 + dy as i64 - pad;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as i64 + dx as i64 - pad;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            out[(k * ho + oy) * wo + ox] += wv * input[(c * h + iy as usize) * w + ix as usize] as i64;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn narrow(values: &[i64]) -> Option<Vec<Element>> {
    values.iter().map(|&v| Element::try_from(v).ok()).collect()
}

fn job(base: &JobConfig, nodes: usize, shared_bytes: u64) -> JobConfig {
    let mut cfg = JobConfig { nodes, ..base.clone() };
    cfg.segment.shared_size = cfg.segment.shared_size.max(shared_bytes);
    // The case studies only need timestamps, not the full event log.
    cfg.trace = false;
    cfg
}

fn as_u32(offset: u64) -> u32 {
    u32::try_from(offset).expect("operand offsets fit 32 bits")
}

/// Square `size×size` matrices split into four `size/2` blocks. Node `k`
/// holds the column-`k` blocks of M and C and the row-`k` blocks of N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatmulPlan {
    pub size: usize,
}

impl MatmulPlan {
    pub fn new(size: usize) -> Result<Self, ComputeError> {
        if size == 0 || size % 2 != 0 {
            return Err(ComputeError::BadDims(format!("matrix size {size} is not a positive even number")));
        }
        Ok(MatmulPlan { size })
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }

    fn column_bytes(&self) -> u64 {
        (self.size * self.half()) as u64 * ES
    }

    fn block_bytes(&self) -> u64 {
        (self.half() * self.half()) as u64 * ES
    }

    /// `size × size/2` column block of M: rows of M restricted to
    /// columns `[k·h, (k+1)·h)`.
    pub const M_COLUMN: u64 = 0;

    pub fn n_own(&self) -> u64 {
        self.column_bytes()
    }

    pub fn n_other(&self) -> u64 {
        self.n_own() + self.block_bytes()
    }

    pub fn c_column(&self) -> u64 {
        self.n_other() + self.block_bytes()
    }

    pub fn staging(&self) -> u64 {
        self.c_column() + self.column_bytes()
    }

    pub fn inbox(&self) -> u64 {
        self.staging() + self.column_bytes()
    }

    pub fn shared_bytes(&self) -> u64 {
        self.inbox() + self.column_bytes()
    }

    /// Column block `k` of a row-major `size×size` matrix.
    pub fn column_block(&self, matrix: &[Element], k: usize) -> Vec<Element> {
        let (s, h) = (self.size, self.half());
        (0..s).flat_map(|i| matrix[i * s + k * h..i * s + (k + 1) * h].iter().copied()).collect()
    }

    /// Block `(i, j)` of a row-major `size×size` matrix.
    pub fn block(&self, matrix: &[Element], i: usize, j: usize) -> Vec<Element> {
        let (s, h) = (self.size, self.half());
        (0..h).flat_map(|r| matrix[(i * h + r) * s + j * h..(i * h + r) * s + (j + 1) * h].iter().copied()).collect()
    }

    /// Reassembles C from the two nodes' column blocks.
    pub fn assemble(&self, columns: [&[Element]; 2]) -> Vec<Element> {
        let (s, h) = (self.size, self.half());
        let mut c = vec![0; s * s];
        for (k, col) in columns.iter().enumerate() {
            for i in 0..s {
                c[i * s + k * h..i * s + (k + 1) * h].copy_from_slice(&col[i * h..(i + 1) * h]);
            }
        }
        c
    }

    fn partial(&self, b_offset: u64, c_offset: u64) -> ComputeCommand {
        let h = self.half() as u32;
        ComputeCommand::matmul(MatMul {
            m: self.size as u32,
            k: h,
            n: h,
            a_offset: as_u32(Self::M_COLUMN),
            b_offset: as_u32(b_offset),
            c_offset: as_u32(c_offset),
        })
    }
}

/// How the remote-destined partial sums reach their owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Exchange {
    /// Streamed by ART while computing; the receiver's accumulate handler
    /// adds each chunk into its C block.
    Art,
    /// One PUT after all local compute, then an accelerator accumulate.
    PutAfterCompute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatmulRun {
    pub cycles: u64,
    pub c: Vec<Element>,
    pub exchanged_bytes: u64,
}

/// C = M·N on one node as a single accelerator command.
pub fn single_node_matmul(base: &JobConfig, a: &[Element], b: &[Element], size: usize) -> Result<MatmulRun, ApiError> {
    let bytes = (size * size) as u64 * ES;
    let mut rt = Runtime::start(job(base, 1, 3 * bytes))?;
    rt.write_elements(0, 0, a)?;
    rt.write_elements(0, bytes, b)?;
    let t0 = rt.now();
    let s = size as u32;
    let h = rt.enqueue_compute(
        0,
        ComputeCommand::matmul(MatMul { m: s, k: s, n: s, a_offset: 0, b_offset: as_u32(bytes), c_offset: as_u32(2 * bytes) }),
    )?;
    let end = rt.wait(h)?;
    Ok(MatmulRun { cycles: end - t0, c: rt.read_elements(0, 2 * bytes, size * size)?, exchanged_bytes: 0 })
}

/// C = M·N on two nodes. Each node first computes the partial product
/// its peer owns, then its own; the first is exchanged while the second
/// runs. Timing ends when both nodes leave the closing barrier.
pub fn parallel_matmul(
    base: &JobConfig,
    a: &[Element],
    b: &[Element],
    size: usize,
    exchange: Exchange,
) -> Result<MatmulRun, ApiError> {
    let plan = MatmulPlan::new(size)?;
    let mut rt = Runtime::start(job(base, 2, plan.shared_bytes()))?;
    for k in 0..2 {
        rt.write_elements(k as u16, MatmulPlan::M_COLUMN, &plan.column_block(a, k))?;
        rt.write_elements(k as u16, plan.n_own(), &plan.block(b, k, k))?;
        rt.write_elements(k as u16, plan.n_other(), &plan.block(b, k, 1 - k))?;
        rt.register_handler(k as u16, opcode::ACCUM, accumulate_handler())?;
    }
    let t0 = rt.now();
    let mut handles: Vec<Handle> = Vec::new();
    for k in 0..2u16 {
        let peer = NodeId(1 - k);
        let mut remote = plan.partial(plan.n_other(), plan.staging());
        if exchange == Exchange::Art {
            remote = remote.with_art(ArtConfig::via(
                ART_CHUNK_RESULTS,
                GlobalAddress::new(peer, plan.c_column()),
                opcode::ACCUM,
            ));
        }
        handles.push(rt.enqueue_compute(k, remote)?);
        handles.push(rt.enqueue_compute(k, plan.partial(plan.n_own(), plan.c_column()).accumulating())?);
    }
    rt.wait_all(&handles)?;
    if exchange == Exchange::PutAfterCompute {
        let puts = (0..2u16)
            .map(|k| {
                let dest = GlobalAddress::new(1 - k, plan.inbox());
                rt.put(k, dest, LocalRange::shared(plan.staging(), plan.column_bytes()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rt.wait_all(&puts)?;
        rt.barrier()?;
        let len = (plan.size * plan.half()) as u32;
        let adds = (0..2u16)
            .map(|k| {
                let add = Accumulate { src_offset: as_u32(plan.inbox()), dst_offset: as_u32(plan.c_column()), len };
                rt.enqueue_compute(k, ComputeCommand::accumulate(add))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rt.wait_all(&adds)?;
    }
    let end = rt.barrier()?;
    let count = plan.size * plan.half();
    let c0 = rt.read_elements(0, plan.c_column(), count)?;
    let c1 = rt.read_elements(1, plan.c_column(), count)?;
    Ok(MatmulRun { cycles: end - t0, c: plan.assemble([&c0, &c1]), exchanged_bytes: plan.column_bytes() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub macs: u64,
    pub one_node_cycles: u64,
    pub two_node_cycles: u64,
    pub one_node_gops: f64,
    pub two_node_gops: f64,
    pub speedup: f64,
    /// Bytes each node sends its peer.
    pub exchanged_bytes: u64,
    /// Whether every result matched the serial oracle.
    pub verified: bool,
}

impl CaseReport {
    fn new(base: &JobConfig, name: String, macs: u64, one: u64, two: u64, exchanged: u64, verified: bool) -> Self {
        CaseReport {
            name,
            macs,
            one_node_cycles: one,
            two_node_cycles: two,
            one_node_gops: base.dla.gops(macs, one),
            two_node_gops: base.dla.gops(macs, two),
            speedup: one as f64 / two as f64,
            exchanged_bytes: exchanged,
            verified,
        }
    }
}

/// Runs the matmul case study at `size` on seeded inputs, on one node and
/// on two, and checks both against the serial oracle.
pub fn matmul_case(base: &JobConfig, size: usize, seed: u64) -> Result<CaseReport, ApiError> {
    MatmulPlan::new(size)?;
    let a = random_elements(size * size, INPUT_BOUND, seed);
    let b = random_elements(size * size, INPUT_BOUND, seed.wrapping_add(1));
    let one = single_node_matmul(base, &a, &b, size)?;
    let two = parallel_matmul(base, &a, &b, size, Exchange::Art)?;
    let oracle = narrow(&serial_matmul_oracle(&a, &b, size, size, size)?);
    let verified = oracle.as_ref().is_some_and(|o| *o == one.c && *o == two.c);
    let macs = (size * size * size) as u64;
    Ok(CaseReport::new(base, format!("matmul-{size}"), macs, one.cycles, two.cycles, two.exchanged_bytes, verified))
}

/// A convolution layer from the case study: `kernels` kernels of
/// `r×r×kernels` over a 64×64 map with as many channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvPreset {
    pub name: &'static str,
    pub kernels: u32,
    pub r: u32,
}

pub const CONV_PRESETS: [ConvPreset; 3] = [
    ConvPreset { name: "k256r3", kernels: 256, r: 3 },
    ConvPreset { name: "k192r5", kernels: 192, r: 5 },
    ConvPreset { name: "k128r7", kernels: 128, r: 7 },
];

pub const CONV_MAP_SIZE: u32 = 64;

impl ConvPreset {
    pub fn find(name: &str) -> Option<Self> {
        CONV_PRESETS.iter().copied().find(|p| p.name == name)
    }

    pub fn conv(&self) -> Conv2d {
        Conv2d::same(self.kernels, CONV_MAP_SIZE, CONV_MAP_SIZE, self.kernels, self.r)
    }
}

/// Input replicated on both nodes, kernels split into two equal groups.
/// Node `k` computes output channels `[k·K/2, (k+1)·K/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvPlan {
    pub conv: Conv2d,
}

impl ConvPlan {
    pub fn new(conv: Conv2d) -> Result<Self, ComputeError> {
        if conv.kernels == 0 || conv.kernels % 2 != 0 {
            return Err(ComputeError::BadDims(format!("{} kernels cannot be split evenly", conv.kernels)));
        }
        Ok(ConvPlan { conv })
    }

    pub fn group(&self) -> u32 {
        self.conv.kernels / 2
    }

    fn input_bytes(&self) -> u64 {
        (self.conv.c_in * self.conv.h * self.conv.w) as u64 * ES
    }

    fn kernel_bytes(&self) -> u64 {
        (self.conv.c_in * self.conv.r * self.conv.s) as u64 * ES
    }

    pub fn plane_elements(&self) -> u64 {
        self.conv.h_out() * self.conv.w_out()
    }

    /// Output bytes each node computes and sends to its peer.
    pub fn exchanged_bytes(&self) -> u64 {
        self.group() as u64 * self.plane_elements() * ES
    }

    fn weights_at(&self) -> u64 {
        self.input_bytes()
    }

    fn output_at(&self, kernels: u32) -> u64 {
        self.weights_at() + kernels as u64 * self.kernel_bytes()
    }

    fn shared_bytes(&self, kernels: u32) -> u64 {
        self.output_at(kernels) + self.conv.kernels as u64 * self.plane_elements() * ES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvRun {
    pub cycles: u64,
    /// Full output as held by each node.
    pub outputs: Vec<Vec<Element>>,
    pub exchanged_bytes: u64,
}

pub fn single_node_conv(base: &JobConfig, input: &[Element], weights: &[Element], conv: Conv2d) -> Result<ConvRun, ApiError> {
    let plan = ConvPlan { conv };
    let mut rt = Runtime::start(job(base, 1, plan.shared_bytes(conv.kernels)))?;
    rt.write_elements(0, 0, input)?;
    rt.write_elements(0, plan.weights_at(), weights)?;
    let cmd = Conv2d {
        in_offset: 0,
        w_offset: as_u32(plan.weights_at()),
        out_offset: as_u32(plan.output_at(conv.kernels)),
        ..conv
    };
    let t0 = rt.now();
    let h = rt.enqueue_compute(0, ComputeCommand::conv2d(cmd))?;
    let end = rt.wait(h)?;
    let total = (conv.kernels as u64 * plan.plane_elements()) as usize;
    let out = rt.read_elements(0, plan.output_at(conv.kernels), total)?;
    Ok(ConvRun { cycles: end - t0, outputs: vec![out], exchanged_bytes: 0 })
}

/// Both nodes convolve the shared input with their kernel group and stream
/// their output channels into the peer's copy of the output as they are
/// produced; a barrier closes the exchange.
pub fn parallel_conv(base: &JobConfig, input: &[Element], weights: &[Element], conv: Conv2d) -> Result<ConvRun, ApiError> {
    let plan = ConvPlan::new(conv)?;
    let group = plan.group();
    let mut rt = Runtime::start(job(base, 2, plan.shared_bytes(group)))?;
    let per_kernel = (conv.c_in * conv.r * conv.s) as usize;
    let out_at = plan.output_at(group);
    let mut handles = Vec::new();
    for k in 0..2u16 {
        rt.write_elements(k, 0, input)?;
        let mine = &weights[k as usize * group as usize * per_kernel..(k as usize + 1) * group as usize * per_kernel];
        rt.write_elements(k, plan.weights_at(), mine)?;
    }
    let t0 = rt.now();
    for k in 0..2u16 {
        let my_out = out_at + k as u64 * plan.exchanged_bytes();
        let cmd = Conv2d {
            kernels: group,
            in_offset: 0,
            w_offset: as_u32(plan.weights_at()),
            out_offset: as_u32(my_out),
            ..conv
        };
        let art = ArtConfig::put(ART_CHUNK_RESULTS, GlobalAddress::new(1 - k, my_out));
        handles.push(rt.enqueue_compute(k, ComputeCommand::conv2d(cmd).with_art(art))?);
    }
    rt.wait_all(&handles)?;
    let end = rt.barrier()?;
    let total = (conv.kernels as u64 * plan.plane_elements()) as usize;
    let outputs = (0..2u16).map(|k| rt.read_elements(k, out_at, total)).collect::<Result<_, _>>()?;
    Ok(ConvRun { cycles: end - t0, outputs, exchanged_bytes: plan.exchanged_bytes() })
}

pub fn conv_case(base: &JobConfig, preset: ConvPreset, seed: u64) -> Result<CaseReport, ApiError> {
    let conv = preset.conv();
    let input = random_elements((conv.c_in * conv.h * conv.w) as usize, INPUT_BOUND, seed);
    let weights = random_elements((conv.kernels * conv.c_in * conv.r * conv.s) as usize, INPUT_BOUND, seed.wrapping_add(1));
    let one = single_node_conv(base, &input, &weights, conv)?;
    let two = parallel_conv(base, &input, &weights, conv)?;
    let oracle = narrow(&serial_conv_oracle(&input, &weights, &conv)?);
    let verified = oracle.as_ref().is_some_and(|o| one.outputs.iter().chain(&two.outputs).all(|out| out == o));
    let macs = ComputeCommand::conv2d(conv).macs();
    Ok(CaseReport::new(base, format!("conv-{}", preset.name), macs, one.cycles, two.cycles, two.exchanged_bytes, verified))
}
