use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pgasim::wire::{decode_message, packetize, reassemble};
use pgasim_bench::long_message;

fn codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("wire");
    for len in [0usize, 4096, 1 << 20] {
        let message = long_message(len);
        g.throughput(Throughput::Bytes(message.len() as u64));
        g.bench_with_input(BenchmarkId::new("decode", len), &message, |b, m| b.iter(|| decode_message(m).unwrap()));
        g.bench_with_input(BenchmarkId::new("packetize_reassemble_512", len), &message, |b, m| {
            b.iter(|| reassemble(packetize(m, 1, 512).unwrap()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
