use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pgasim::{GlobalAddress, LocalRange, Runtime};
use pgasim_bench::job;

// Host-side cost of simulating one PUT and one GET of each size.
fn transfers(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    for len in [64u64, 65536, 1 << 20] {
        g.throughput(Throughput::Bytes(len));
        g.bench_with_input(BenchmarkId::new("put", len), &len, |b, &len| {
            let mut rt = Runtime::start(job(len)).unwrap();
            b.iter(|| {
                let h = rt.put(0, GlobalAddress::new(1, 0), LocalRange::shared(0, len)).unwrap();
                rt.wait(h).unwrap();
                rt.run_until_idle().unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("get", len), &len, |b, &len| {
            let mut rt = Runtime::start(job(len)).unwrap();
            b.iter(|| {
                let h = rt.get(0, GlobalAddress::new(1, 0), len, 0).unwrap();
                rt.wait(h).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, transfers);
criterion_main!(benches);
