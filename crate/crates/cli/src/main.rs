use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgasim::bench::{self, BenchOp, BenchRow, PACKET_SIZES};
use pgasim::socket::socket_bandwidth;
use pgasim::workloads::{conv_case, matmul_case, CaseReport, ConvPreset, CONV_PRESETS};
use pgasim::JobConfig;

#[derive(Parser, Debug)]
#[command(name = "pgasim", version, about = "Active-message PGAS simulator: benchmarks and case studies")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON job configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Packet size in bytes. Bandwidth sweeps use all four standard sizes
    /// when this is absent.
    #[arg(long, global = true)]
    packet_size: Option<usize>,
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Write results as CSV here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Transport {
    Sim,
    Socket,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bandwidth and latency sweeps between two nodes.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Two-node case studies against one node.
    #[command(subcommand)]
    App(AppCmd),
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Bandwidth over transfer sizes 4 B to 2 MiB.
    Bw {
        #[arg(long, value_enum, default_value_t = OpChoice::Both)]
        op: OpChoice,
    },
    /// Header latency for a short message and for every swept payload.
    Lat {
        #[arg(long, value_enum, default_value_t = OpChoice::Both)]
        op: OpChoice,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OpChoice {
    Put,
    Get,
    Both,
}

impl OpChoice {
    fn ops(self) -> Vec<BenchOp> {
        match self {
            OpChoice::Put => vec![BenchOp::Put],
            OpChoice::Get => vec![BenchOp::Get],
            OpChoice::Both => vec![BenchOp::Put, BenchOp::Get],
        }
    }
}

#[derive(Subcommand, Debug)]
enum AppCmd {
    Matmul {
        #[arg(long, value_parser = ["256", "512", "1024"])]
        size: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    Conv {
        #[arg(long, value_parser = CONV_PRESETS.map(|p| p.name))]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn config(common: &Common) -> Result<JobConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => JobConfig::load(path).map_err(Failure::Usage)?,
        None => JobConfig::default(),
    };
    if let Some(n) = common.nodes {
        cfg.nodes = n;
    }
    if let Some(p) = common.packet_size {
        cfg.packet_size = p;
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Bench(cmd) => {
            if cfg.nodes < 2 {
                return Err(Failure::Usage("benchmarks need at least 2 nodes".into()));
            }
            run_bench(&cli.common, &cfg, cmd)
        }
        Command::App(cmd) => {
            if cli.common.transport != Transport::Sim {
                return Err(Failure::Usage("case studies run on the simulated transport only".into()));
            }
            if cfg.nodes != 2 {
                return Err(Failure::Usage("case studies compare one node against exactly 2".into()));
            }
            run_app(&cli.common, &cfg, cmd)
        }
    }
}

fn run_bench(common: &Common, cfg: &JobConfig, cmd: BenchCmd) -> Result<(), Failure> {
    let mut rows = Vec::new();
    match cmd {
        BenchCmd::Bw { op } => {
            let packets = common.packet_size.map_or(PACKET_SIZES.to_vec(), |p| vec![p]);
            let sizes = bench::transfer_sizes();
            for op in op.ops() {
                log::info!("{} bandwidth over packet sizes {packets:?}", op.name());
                rows.extend(match common.transport {
                    Transport::Sim => bench::bench_bandwidth(cfg, op, &packets, &sizes)?,
                    Transport::Socket => socket_bandwidth(cfg, op, &packets, &sizes)?,
                });
            }
            bench::sort_rows(&mut rows);
            if common.transport == Transport::Sim {
                check_peak(cfg, &rows)?;
            }
            print!("{}", bandwidth_summary(&rows));
        }
        BenchCmd::Lat { op } => {
            let mut payloads = vec![0];
            payloads.extend(bench::transfer_sizes());
            for op in op.ops() {
                rows.extend(match common.transport {
                    Transport::Sim => bench::bench_latency(cfg, op, &payloads)?,
                    Transport::Socket => socket_bandwidth(cfg, op, &[cfg.packet_size], &payloads)?,
                });
            }
            bench::sort_rows(&mut rows);
            print!("{}", latency_summary(&rows));
        }
    }
    if let Some(path) = &common.out {
        bench::emit_csv(&rows, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn check_peak(cfg: &JobConfig, rows: &[BenchRow]) -> Result<(), Failure> {
    let peak = cfg.link.peak_mbs();
    match rows.iter().find(|r| r.bandwidth_mbs > peak) {
        Some(r) => Err(Failure::Runtime(format!(
            "{} {} B over {} B packets reports {:.3} MB/s, above the {peak} MB/s link peak",
            r.op.name(),
            r.transfer_size,
            r.packet_size,
            r.bandwidth_mbs
        ))),
        None => Ok(()),
    }
}

fn groups(rows: &[BenchRow]) -> Vec<(BenchOp, usize, Vec<&BenchRow>)> {
    let mut out: Vec<(BenchOp, usize, Vec<&BenchRow>)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((op, p, g)) if *op == r.op && *p == r.packet_size => g.push(r),
            _ => out.push((r.op, r.packet_size, vec![r])),
        }
    }
    out
}

fn bandwidth_summary(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<4} {:>7} {:>12} {:>14} {:>13}\n", "op", "packet", "peak MB/s", "half-max at", "32K/peak");
    for (op, packet, g) in groups(rows) {
        let peak = g.iter().map(|r| r.bandwidth_mbs).fold(0.0, f64::max);
        let half = g.iter().find(|r| r.bandwidth_mbs >= peak / 2.0).map_or(0, |r| r.transfer_size);
        let at32 = g.iter().find(|r| r.transfer_size == 32 << 10).map_or(f64::NAN, |r| r.bandwidth_mbs / peak);
        let _ = writeln!(s, "{:<4} {packet:>7} {peak:>12.1} {:>14} {at32:>13.3}", op.name(), format!("{half} B"));
    }
    s
}

fn latency_summary(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<4} {:>7} {:>12} {:>15}\n", "op", "packet", "short µs", "long mean µs");
    for (op, packet, g) in groups(rows) {
        let short = g.iter().find(|r| r.transfer_size == 0).map_or(f64::NAN, |r| r.latency_us);
        let long: Vec<BenchRow> = g.iter().filter(|r| r.transfer_size > 0).map(|r| (*r).clone()).collect();
        let _ = writeln!(s, "{:<4} {packet:>7} {short:>12.4} {:>15.4}", op.name(), bench::mean_latency_us(&long));
    }
    s
}

const APP_HEADER: &str = "case,macs,one_node_cycles,two_node_cycles,one_node_gops,two_node_gops,speedup,exchanged_bytes,verified";

fn run_app(common: &Common, cfg: &JobConfig, cmd: AppCmd) -> Result<(), Failure> {
    let report = match cmd {
        AppCmd::Matmul { size, seed } => {
            let size: usize = size.parse().map_err(|_| Failure::Usage(format!("bad size {size}")))?;
            matmul_case(cfg, size, seed)?
        }
        AppCmd::Conv { preset, seed } => {
            let preset = ConvPreset::find(&preset).ok_or_else(|| Failure::Usage(format!("unknown preset {preset}")))?;
            conv_case(cfg, preset, seed)?
        }
    };
    println!("{:<14} {:>12} {:>12} {:>9} {:>9}", "case", "1-node GOPS", "2-node GOPS", "speedup", "verified");
    println!(
        "{:<14} {:>12.1} {:>12.1} {:>9.4} {:>9}",
        report.name, report.one_node_gops, report.two_node_gops, report.speedup, report.verified
    );
    if let Some(path) = &common.out {
        write_app_csv(&report, path)?;
        println!("wrote {}", path.display());
    }
    if !report.verified {
        return Err(Failure::Runtime("distributed result differs from the serial oracle".into()));
    }
    Ok(())
}

fn write_app_csv(r: &CaseReport, path: &Path) -> std::io::Result<()> {
    let text = format!(
        "{APP_HEADER}\n{},{},{},{},{:.3},{:.3},{:.6},{},{}\n",
        r.name,
        r.macs,
        r.one_node_cycles,
        r.two_node_cycles,
        r.one_node_gops,
        r.two_node_gops,
        r.speedup,
        r.exchanged_bytes,
        r.verified
    );
    std::fs::write(path, text)
}
