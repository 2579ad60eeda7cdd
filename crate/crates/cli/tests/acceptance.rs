//! Acceptance suite. Runs without the test harness so every criterion
//! prints one line, pass or fail, even under captured output.

use std::process::{Command, ExitCode};
use std::time::Instant;

use pgasim::bench::{bench_bandwidth, bench_latency, mean_latency_us, transfer_sizes, Bench, BenchOp, BenchRow};
use pgasim::wire::{packet_count, HEADER_LEN};
use pgasim::workloads::{
    conv_case, matmul_case, parallel_matmul, random_elements, serial_matmul_oracle, single_node_matmul, Exchange,
    CONV_PRESETS, INPUT_BOUND,
};
use pgasim::{
    ArtConfig, ComputeCommand, GlobalAddress, JobConfig, LocalRange, MatMul, MessageKind, Runtime, TraceKind,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const MIB: u64 = 1 << 20;

fn protocol_correctness() -> Outcome {
    let started = Instant::now();
    let mut cfg = JobConfig { trace: true, ..JobConfig::default() };
    cfg.segment.shared_size = 2 * MIB;
    let mut rt = Runtime::start(cfg).map_err(fmt_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut bad = Vec::new();
    let trips = 1000;
    for trip in 0..trips {
        let n = rng.random_range(0..=MIB);
        let mut data = vec![0u8; n as usize];
        rng.fill_bytes(&mut data);
        let src = rng.random_range(0..=MIB - n);
        let remote = rng.random_range(0..=2 * MIB - n);
        let back = MIB + rng.random_range(0..=MIB - n);
        rt.write_shared(0, src, &data).map_err(fmt_err)?;
        rt.take_trace();
        let h = rt.put(0, GlobalAddress::new(1, remote), LocalRange::shared(src, n)).map_err(fmt_err)?;
        rt.wait(h).map_err(fmt_err)?;
        rt.run_until_idle().map_err(fmt_err)?;
        rt.take_trace();
        let h = rt.get(0, GlobalAddress::new(1, remote), n, back).map_err(fmt_err)?;
        rt.wait(h).map_err(fmt_err)?;
        rt.run_until_idle().map_err(fmt_err)?;
        let packets: Vec<(MessageKind, usize)> = rt
            .trace()
            .iter()
            .filter_map(|e| match e.kind {
                TraceKind::MessageSent { kind, packets, .. } => Some((kind, packets)),
                _ => None,
            })
            .collect();
        let law = vec![(MessageKind::Request, 1), (MessageKind::Reply, packet_count(HEADER_LEN + n as usize, 512))];
        let landed = rt.read_shared(1, remote, n).map_err(fmt_err)? == data;
        let returned = rt.read_shared(0, back, n).map_err(fmt_err)? == data;
        if !(landed && returned && packets == law) {
            bad.push(trip);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        bad.is_empty() && secs < 10.0,
        format!("{trips} put/get round trips, {} mismatched, {secs:.2} s", bad.len()),
    )
}

fn find(rows: &[BenchRow], packet: usize, transfer: u64) -> f64 {
    rows.iter().find(|r| r.packet_size == packet && r.transfer_size == transfer).map_or(f64::NAN, |r| r.bandwidth_mbs)
}

fn peak(rows: &[BenchRow], packet: usize) -> f64 {
    rows.iter().filter(|r| r.packet_size == packet).map(|r| r.bandwidth_mbs).fold(0.0, f64::max)
}

fn peak_bandwidth(put: &[BenchRow]) -> Outcome {
    let p512 = find(put, 512, 2 * MIB);
    let p1024 = find(put, 1024, 2 * MIB);
    let p128 = peak(put, 128);
    let ceiling = JobConfig::default().link.peak_mbs();
    let under = put.iter().all(|r| r.bandwidth_mbs <= ceiling);
    let ordered = [128, 256, 512, 1024].windows(2).all(|w| peak(put, w[0]) <= peak(put, w[1]));
    check(
        p512 >= 3800.0 && p1024 >= 3800.0 && (2400.0..=2900.0).contains(&p128) && under && ordered,
        format!(
            "put 2 MiB: {p512:.1} MB/s at 512 B, {p1024:.1} MB/s at 1024 B; 128 B peak {p128:.1} MB/s; all rows under {ceiling} MB/s: {under}; peaks ordered by packet size: {ordered}"
        ),
    )
}

fn curve_shape(put: &[BenchRow]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for packet in [128, 256, 512, 1024] {
        let top = peak(put, packet);
        let half = put
            .iter()
            .filter(|r| r.packet_size == packet)
            .find(|r| r.bandwidth_mbs >= top / 2.0)
            .map_or(0, |r| r.transfer_size);
        let ratio = find(put, packet, 32 << 10) / find(put, packet, 2 * MIB);
        ok &= (1024..=4096).contains(&half) && ratio >= 0.95;
        parts.push(format!("{packet} B: half-max {half} B, 32K/2M {ratio:.3}"));
    }
    check(ok, parts.join("; "))
}

fn put_get_gap(put: &[BenchRow], get: &[BenchRow]) -> Outcome {
    let gap = |t: u64| 1.0 - find(get, 512, t) / find(put, 512, t);
    let (g2k, g8k, g2m) = (gap(2048), gap(8192), gap(2 * MIB));
    check(
        (0.10..=0.30).contains(&g2k) && (0.03..=0.15).contains(&g8k) && g2m <= 0.02,
        format!("512 B packets, get below put by {:.1}% at 2 KiB, {:.1}% at 8 KiB, {:.2}% at 2 MiB", g2k * 100.0, g8k * 100.0, g2m * 100.0),
    )
}

fn latency() -> Outcome {
    let cfg = JobConfig::default();
    let sizes = transfer_sizes();
    let put = bench_latency(&cfg, BenchOp::Put, &sizes).map_err(fmt_err)?;
    let get = bench_latency(&cfg, BenchOp::Get, &sizes).map_err(fmt_err)?;
    let short = |op| -> Result<f64, String> {
        let mut b = Bench::new(&cfg, cfg.packet_size).map_err(fmt_err)?;
        Ok(b.measure(op, 0).map_err(fmt_err)?.latency_us)
    };
    let (ps, gs) = (short(BenchOp::Put)?, short(BenchOp::Get)?);
    let (pl, gl) = (mean_latency_us(&put), mean_latency_us(&get));
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() <= target * tol;
    let get_slower = put.iter().zip(&get).all(|(p, g)| g.latency_us > p.latency_us) && gs > ps;
    check(
        within(ps, 0.21, 0.10) && within(gs, 0.45, 0.10) && within(pl, 0.35, 0.20) && within(gl, 0.59, 0.20) && get_slower,
        format!("short put {ps:.3} µs, get {gs:.3} µs; long mean put {pl:.3} µs, get {gl:.3} µs; get slower at every size: {get_slower}"),
    )
}

fn single_node_compute() -> Outcome {
    let cfg = JobConfig::default();
    let n = 1024;
    let a = random_elements(n * n, INPUT_BOUND, 11);
    let b = random_elements(n * n, INPUT_BOUND, 12);
    let run = single_node_matmul(&cfg, &a, &b, n).map_err(fmt_err)?;
    let gops = cfg.dla.gops((n * n * n) as u64, run.cycles);
    check((950.0..=1024.0).contains(&gops), format!("1024³ matmul on one node: {gops:.1} GOPS ({} cycles)", run.cycles))
}

fn speedups() -> Outcome {
    let cfg = JobConfig::default();
    let mut verified = true;
    let mut mm = Vec::new();
    for size in [256, 512, 1024] {
        let r = matmul_case(&cfg, size, 7).map_err(fmt_err)?;
        verified &= r.verified;
        mm.push(r.speedup);
    }
    let mut cv = Vec::new();
    for preset in CONV_PRESETS {
        let r = conv_case(&cfg, preset, 7).map_err(fmt_err)?;
        verified &= r.verified;
        cv.push(r.speedup);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mm_mean, cv_mean) = (mean(&mm), mean(&cv));
    let monotone = mm.windows(2).all(|w| w[0] <= w[1]);
    check(
        (1.85..=2.00).contains(&mm_mean)
            && monotone
            && (1.90..2.00).contains(&cv_mean)
            && cv.iter().all(|&s| s < 2.0)
            && verified,
        format!(
            "matmul {mm:.4?} mean {mm_mean:.4}; conv {cv:.5?} mean {cv_mean:.5}; all bit-equal to serial oracles: {verified}"
        ),
    )
}

fn cli_output(args: &[&str]) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(fmt_err)?;
    let out = dir.path().join("out.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_pgasim"))
        .args(args)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(fmt_err)?;
    if !status.status.success() {
        return Err(format!("{args:?} exited with {}", status.status));
    }
    std::fs::read(&out).map_err(fmt_err)
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 3] =
        [&["bench", "bw", "--packet-size", "256"], &["bench", "lat"], &["app", "matmul", "--size", "256"]];
    let mut same = Vec::new();
    for args in commands {
        let first = cli_output(args)?;
        let second = cli_output(args)?;
        same.push(first == second && !first.is_empty());
    }
    check(same.iter().all(|&s| s), format!("byte-identical CSV across reruns of `bench bw`, `bench lat`, `app matmul`: {same:?}"))
}

fn art_properties() -> Outcome {
    let mut conserved = true;
    for every in [1u32, 7, 300, 3200, 5000] {
        let mut rt = Runtime::start(JobConfig::default()).map_err(fmt_err)?;
        let (m, k, n) = (64u32, 32u32, 50u32);
        let a = random_elements((m * k) as usize, 20, 1);
        let b = random_elements((k * n) as usize, 20, 2);
        rt.write_elements(0, 0, &a).map_err(fmt_err)?;
        rt.write_elements(0, 8192, &b).map_err(fmt_err)?;
        let cmd = ComputeCommand::matmul(MatMul { m, k, n, a_offset: 0, b_offset: 8192, c_offset: 16384 })
            .with_art(ArtConfig::put(every, GlobalAddress::new(1, 32768)));
        let h = rt.enqueue_compute(0, cmd).map_err(fmt_err)?;
        rt.wait(h).map_err(fmt_err)?;
        rt.run_until_idle().map_err(fmt_err)?;
        let results = (m * n) as u64;
        let (mut chunks, mut bytes) = (0u64, 0u64);
        for e in rt.trace() {
            if let TraceKind::ArtEmitted { bytes: b, .. } = e.kind {
                chunks += 1;
                bytes += b;
            }
        }
        let remote = rt.read_elements(1, 32768, results as usize).map_err(fmt_err)?;
        let local = rt.read_elements(0, 16384, results as usize).map_err(fmt_err)?;
        conserved &= chunks == results.div_ceil(every as u64) && bytes == results * 2 && remote == local;
    }

    let cfg = JobConfig::default();
    let size = 1024;
    let a = random_elements(size * size, INPUT_BOUND, 21);
    let b = random_elements(size * size, INPUT_BOUND, 22);
    let art = parallel_matmul(&cfg, &a, &b, size, Exchange::Art).map_err(fmt_err)?;
    let single = parallel_matmul(&cfg, &a, &b, size, Exchange::PutAfterCompute).map_err(fmt_err)?;
    let oracle: Vec<i16> = serial_matmul_oracle(&a, &b, size, size, size)
        .map_err(fmt_err)?
        .into_iter()
        .map(|v| v as i16)
        .collect();
    let correct = art.c == oracle && single.c == oracle;
    check(
        conserved && correct && art.cycles < single.cycles,
        format!(
            "chunk count and streamed bytes conserved: {conserved}; 1024 two-node: ART {} cycles vs one PUT after compute {} cycles; both correct: {correct}",
            art.cycles, single.cycles
        ),
    )
}

fn main() -> ExitCode {
    let cfg = JobConfig::default();
    let sweep = |op| bench_bandwidth(&cfg, op, &[128, 256, 512, 1024], &transfer_sizes());
    let (put, get) = match (sweep(BenchOp::Put), sweep(BenchOp::Get)) {
        (Ok(p), Ok(g)) => (p, g),
        (Err(e), _) | (_, Err(e)) => {
            println!("FAIL bandwidth sweep could not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 protocol correctness", Box::new(protocol_correctness)),
        ("2 peak bandwidth", Box::new(|| peak_bandwidth(&put))),
        ("3 curve shape", Box::new(|| curve_shape(&put))),
        ("4 put/get gap", Box::new(|| put_get_gap(&put, &get))),
        ("5 latency", Box::new(latency)),
        ("6 single-node compute", Box::new(single_node_compute)),
        ("7 case-study speedups", Box::new(speedups)),
        ("8 determinism", Box::new(determinism)),
        ("9 result streaming", Box::new(art_properties)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
