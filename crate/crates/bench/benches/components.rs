use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use histune_bench::synthetic_traces;
use histune_core::bus::{decode, encode, Bus, Envelope, Payload, Topic};
use histune_core::engine::StreamEngine;
use histune_core::graph::{ChangeSet, NodeKind, PropertySnapshot, TemporalGraph};
use histune_core::harness::TrainingConfig;
use histune_core::pipeline::{run_inline, PipelineConfig};
use histune_core::tuner::{reward_by_window, EpisodeAverage, GammaBounds, HyperparameterVector, Tuner, TunerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn engine(c: &mut Criterion) {
    let traces = synthetic_traces(100, 50);
    c.bench_function("engine/5000 traces x=3", |b| {
        b.iter(|| {
            let mut e = StreamEngine::with_params(3, 30.0).unwrap();
            let mut n = 0;
            for t in &traces {
                n += e.on_trace(t).unwrap().len();
            }
            black_box(n + e.flush_end_of_run().len())
        })
    });
}

fn graph(c: &mut Criterion) {
    c.bench_function("graph/1000 commits", |b| {
        b.iter(|| {
            let mut g = TemporalGraph::new();
            let agent = g.allocate_id();
            let mut cs = ChangeSet::new();
            cs.create(agent, NodeKind::RLAgent, PropertySnapshot::new().with("gamma", 0.5));
            g.commit(0, cs).unwrap();
            for t in 1..1000u64 {
                let mut cs = ChangeSet::new();
                let m = g.allocate_id();
                cs.create(m, NodeKind::Measurement, PropertySnapshot::new().with("value", t as f64));
                cs.update(agent, PropertySnapshot::new().with("gamma", (t % 10) as f64 / 10.0));
                g.commit(t * 2, cs).unwrap();
            }
            black_box(g.stored_property_count())
        })
    });

    let mut g = TemporalGraph::new();
    let agent = g.allocate_id();
    let mut cs = ChangeSet::new();
    cs.create(agent, NodeKind::RLAgent, PropertySnapshot::new().with("gamma", 0.5));
    g.commit(0, cs).unwrap();
    for t in 1..1000u64 {
        let mut cs = ChangeSet::new();
        cs.update(agent, PropertySnapshot::new().with("gamma", t as f64));
        g.commit(t, cs).unwrap();
    }
    c.bench_function("graph/node_at over 1000 versions", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| black_box(g.node_at(agent, rng.gen_range(0..1000)).unwrap()))
    });
}

fn tuner(c: &mut Criterion) {
    let bounds = GammaBounds::default();
    let windows: Vec<_> = (0..1000u64)
        .map(|k| {
            let r = (k % 13) as f64;
            let avgs: Vec<EpisodeAverage> = (0..3)
                .map(|i| EpisodeAverage {
                    episode: k * 3 + i,
                    r_e: r,
                    step_count: 50,
                })
                .collect();
            reward_by_window(k, &avgs, 3, HyperparameterVector::new(0.5, BTreeMap::new(), bounds)).unwrap()
        })
        .collect();
    c.bench_function("tuner/1000 stable windows", |b| {
        b.iter_batched(
            || Tuner::new(TunerConfig::default(), HyperparameterVector::new(0.5, BTreeMap::new(), bounds), 0).unwrap(),
            |mut t| {
                for w in &windows {
                    black_box(t.observe_window(w));
                }
                t
            },
            BatchSize::SmallInput,
        )
    });
}

fn bus(c: &mut Criterion) {
    let traces = synthetic_traces(10, 100);
    c.bench_function("bus/publish+drain 1000 traces", |b| {
        b.iter(|| {
            let bus = Bus::new();
            let sub = bus.subscribe(&Topic::rl_traces()).unwrap();
            for t in &traces {
                bus.publish(&Topic::rl_traces(), Payload::Trace(t.clone())).unwrap();
            }
            black_box(sub.iter().take(traces.len()).count())
        })
    });
    let env = Envelope {
        topic: Topic::rl_traces(),
        seq: 1,
        ts: 0,
        payload: Payload::Trace(traces[0].clone()),
    };
    c.bench_function("bus/encode+decode", |b| {
        b.iter(|| black_box(decode(&encode(black_box(&env)).unwrap()).unwrap()))
    });
}

fn pipeline(c: &mut Criterion) {
    let cfg = PipelineConfig::new(
        TrainingConfig {
            initial_gamma: 0.5,
            ..TrainingConfig::default()
        },
        TunerConfig {
            th_stable: 0.9,
            ..TunerConfig::default()
        },
        true,
    );
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("inline lifetime 100x50", |b| b.iter(|| black_box(run_inline(&cfg).unwrap().log.episodes.len())));
    group.finish();
}

criterion_group!(benches, engine, graph, tuner, bus, pipeline);
criterion_main!(benches);
