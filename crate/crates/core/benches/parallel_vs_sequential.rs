//! Compares the rayon-parallel hot paths against the forced-sequential
//! fallback (`parallel::run_sequential`). On a multi-core host the parallel
//! column should win on the larger shapes; on a single core the two should be
//! within noise of each other since the work items are identical.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvscost::parallel::run_sequential;
use mvscost::{Tape, Tensor};

fn matmul_case(tape: &Tape, n: usize) -> (mvscost::Var, mvscost::Var) {
    let a = tape.leaf(Tensor::from_fn(&[1, n, n], |i| (i as f32 * 0.13).sin()));
    let b = tape.leaf(Tensor::from_fn(&[1, n, n], |i| (i as f32 * 0.29).cos()));
    (a, b)
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, &n| {
            let tape = Tape::new();
            let (a, b) = matmul_case(&tape, n);
            bch.iter(|| tape.bmm_nn(a, b).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, &n| {
            let tape = Tape::new();
            let (a, b) = matmul_case(&tape, n);
            bch.iter(|| run_sequential(|| tape.bmm_nn(a, b).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
