//! Sequential versus parallel execution of the hot pipeline stages.
//!
//! `jobs = 1` takes the plain-iterator path (the same code the crate runs
//! when built without the `parallel` feature); the other case uses one
//! worker per core.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lpr_core::bev::make_bev_stack;
use lpr_core::config::RunConfig;
use lpr_core::model::Model;
use lpr_core::par;
use lpr_core::preprocess::preprocess;
use lpr_core::synth::synthesize;

fn job_counts() -> Vec<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut v = vec![1, cores.max(2)];
    v.dedup();
    v
}

fn stages(c: &mut Criterion) {
    let mut cfg = RunConfig::toy();
    cfg.synth.sequences.truncate(1);
    cfg.synth.sequences[0].trajectory.loop_radius = 8.0;
    let (_, submaps) = synthesize(0, &cfg.synth).expect("synthesize");
    let clouds: Vec<_> = submaps.iter().take(8).map(|s| s.cloud.clone()).collect();
    let prepared: Vec<_> = clouds
        .iter()
        .map(|c| preprocess(c, &cfg.preprocess).unwrap())
        .collect();
    let size = (cfg.backbone.height, cfg.backbone.width);
    let stacks: Vec<_> = prepared
        .iter()
        .map(|c| make_bev_stack(c, &cfg.bev, size).unwrap())
        .collect();
    let model = Model::init(cfg.backbone.clone(), cfg.head.clone(), 0).unwrap();

    let mut g = c.benchmark_group("preprocess_8_submaps");
    g.sample_size(10);
    for jobs in job_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| {
                par::with_jobs(jobs, || {
                    par::map(&clouds, |c| preprocess(c, &cfg.preprocess).unwrap())
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("describe_8_submaps");
    g.sample_size(10);
    for jobs in job_counts() {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || par::map(&stacks, |s| model.describe(s).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
