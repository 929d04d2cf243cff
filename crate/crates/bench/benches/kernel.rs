use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use parflow_bench::argument_tree;
use parflow_core::app::builtins;
use parflow_core::executor::protocol::{Frame, FrameKind};
use parflow_core::{scan_dependencies, wait_all, ExecutorSpec, KernelBuilder, ShutdownMode};

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan_dependencies");
    for futures in [0usize, 16, 256] {
        let args = argument_tree(16, futures);
        let kwargs = BTreeMap::new();
        g.bench_function(format!("{futures}_futures"), |b| {
            b.iter(|| scan_dependencies(black_box(&args), black_box(&kwargs)))
        });
    }
    g.finish();
}

fn frames(c: &mut Criterion) {
    let mut g = c.benchmark_group("frame");
    for size in [64usize, 64 * 1024] {
        let frame = Frame::new(FrameKind::Task, 42, vec![7u8; size]);
        let bytes = frame.encode();
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_function(format!("encode_{size}"), |b| b.iter(|| black_box(&frame).encode()));
        g.bench_function(format!("decode_{size}"), |b| {
            b.iter(|| Frame::decode(black_box(&bytes)).unwrap())
        });
    }
    g.finish();
}

fn noops(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let k = KernelBuilder::new()
        .run_dir(dir.path())
        .executor(ExecutorSpec::in_process("threads", 4))
        .build()
        .unwrap();
    let noop = builtins::noop();
    let mut g = c.benchmark_group("kernel");
    g.throughput(Throughput::Elements(1000));
    g.sample_size(20);
    g.bench_function("1000_noops_in_process", |b| {
        b.iter(|| {
            let fs: Vec<_> = (0..1000).map(|_| k.call(&noop, vec![]).unwrap()).collect();
            wait_all(&fs, None).unwrap()
        })
    });
    g.finish();
    k.shutdown(ShutdownMode::Drain);
}

criterion_group!(benches, scan, frames, noops);
criterion_main!(benches);
