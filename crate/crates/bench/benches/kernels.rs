use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nmspmm::planner::DEFAULT_FAST_MEMORY;
use nmspmm::rng::random_matrix;
use nmspmm::*;

const DIM: usize = 512;
const CONFIGS: [&str; 4] = ["2:4:8", "3:8:8", "1:4:8", "1:8:8"];

fn setup(config: NmConfig) -> (DenseMatrix, NmCompressed, BlockPlan) {
    let wl = Workload {
        id: String::new(),
        m: DIM,
        n: DIM,
        k: DIM,
        config,
        seed: 1,
        mask_mode: MaskMode::Random,
    };
    let (a, bc) = wl.materialize().unwrap();
    let plan = select_plan(DIM, DIM, DIM, config, DEFAULT_FAST_MEMORY).unwrap();
    (a, bc, plan)
}

fn multiply(c: &mut Criterion) {
    let mut g = c.benchmark_group("multiply");
    g.sample_size(10);

    let dense = NmConfig::dense();
    let a = random_matrix(DIM, DIM, 1, 1);
    let b = random_matrix(DIM, DIM, 1, 2);
    let plan = select_plan(DIM, DIM, DIM, dense, DEFAULT_FAST_MEMORY).unwrap();
    g.throughput(Throughput::Elements((2 * DIM * DIM * DIM) as u64));
    g.bench_function("gemm_blocked", |bch| bch.iter(|| gemm_blocked(black_box(&a), &b, &plan).unwrap()));

    for name in CONFIGS {
        let config: NmConfig = name.parse().unwrap();
        let (a, bc, plan) = setup(config);
        let pack = PackPlan::build(&bc, &plan).unwrap();
        g.throughput(Throughput::Elements((2 * DIM * DIM * bc.w()) as u64));
        g.bench_with_input(BenchmarkId::new("spmm_blocked", name), &config, |bch, _| {
            bch.iter(|| spmm_blocked(black_box(&a), &bc, &plan, SpmmOptions::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spmm_packed", name), &config, |bch, _| {
            bch.iter(|| spmm_packed(black_box(&a), &bc, &pack, &plan, SpmmOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn preprocess(c: &mut Criterion) {
    let mut g = c.benchmark_group("preprocess");
    g.sample_size(20);
    let b = random_matrix(1024, 1024, 3, 2);
    for name in ["2:4:8", "1:8:8"] {
        let config: NmConfig = name.parse().unwrap();
        g.bench_with_input(BenchmarkId::new("prune_magnitude", name), &config, |bch, &cfg| {
            bch.iter(|| prune_magnitude(black_box(&b), cfg).unwrap())
        });
        let pruned = prune_magnitude(&b, config).unwrap();
        g.bench_with_input(BenchmarkId::new("compress", name), &config, |bch, &cfg| {
            bch.iter(|| compress(black_box(&pruned), cfg).unwrap())
        });
        let bc = compress(&pruned, config).unwrap();
        let plan = select_plan(1024, 1024, 1024, config, DEFAULT_FAST_MEMORY).unwrap();
        g.bench_with_input(BenchmarkId::new("pack_plan", name), &config, |bch, _| {
            bch.iter(|| PackPlan::build(black_box(&bc), &plan).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, multiply, preprocess);
criterion_main!(benches);
