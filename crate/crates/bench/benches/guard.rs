use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use pathguard::fixtures::Vulnerability;
use pathguard::guard::{run_detection, train};
use pathguard::pathset::{build_mpht, DEFAULT_LAMBDA, DEFAULT_SEED};
use pathguard::vm::execute_transaction;
use pathguard::Width;
use pathguard_bench::prepare;

fn mpht(c: &mut Criterion) {
    let mut g = c.benchmark_group("mpht");
    for n in [10u64, 100, 1000, 10000] {
        let keys: Vec<u64> = (0..n).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).collect();
        g.bench_with_input(BenchmarkId::new("build", n), &keys, |b, k| {
            b.iter(|| build_mpht(black_box(k), DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap())
        });
        let t = build_mpht(&keys, DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap();
        g.bench_with_input(BenchmarkId::new("contains", n), &keys, |b, k| {
            b.iter(|| k.iter().filter(|&&x| t.contains(black_box(x))).count())
        });
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let mut g = c.benchmark_group("index");
    for kind in [Vulnerability::Reentrancy, Vulnerability::Delegatecall, Vulnerability::Overflow] {
        let bundle = kind.bundle();
        g.bench_function(kind.name(), |b| b.iter(|| black_box(&bundle).index().unwrap()));
    }
    g.finish();
}

fn workflow(c: &mut Criterion) {
    let p = prepare(Vulnerability::Reentrancy, 100);
    let s = &p.scenario;
    c.bench_function("train/reentrancy/100", |b| b.iter(|| train(&s.bundle, &s.training, &p.config).unwrap()));
    c.bench_function("detect/reentrancy/100", |b| b.iter(|| run_detection(&p.guarded, &s.test, &p.config.gas).unwrap()));

    // one transaction, original versus instrumented
    let tx = &s.training[0];
    let mut g = c.benchmark_group("execute");
    let original = s.bundle.deploy(&p.config.gas).unwrap();
    let (guarded, _) = p.guarded.deploy(&p.config.gas).unwrap();
    for (name, world) in [("original", original), ("instrumented", guarded)] {
        g.bench_function(name, |b| {
            b.iter_batched(|| world.clone(), |mut w| execute_transaction(&mut w, tx, &p.config.gas).unwrap(), BatchSize::SmallInput)
        });
    }
    g.finish();
}

criterion_group!(benches, mpht, analysis, workflow);
criterion_main!(benches);
