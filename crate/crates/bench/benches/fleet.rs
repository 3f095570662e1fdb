use bytes::Bytes;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fleet_bench::{walled_grid, PubSubPair};
use fleet_core::bench::{run_experiment1, Exp1Config};
use fleet_core::fleet::{run, scenario::Scenario};
use fleet_core::planner::plan_path;
use fleet_core::TopologyKind;

fn planning(c: &mut Criterion) {
    let mut g = c.benchmark_group("plan_path");
    for side in [8u32, 32, 128] {
        let map = walled_grid(side);
        let goal = (side - 1) as i64;
        g.bench_with_input(BenchmarkId::from_parameter(side), &map, |b, m| {
            b.iter(|| plan_path(m, 0, goal).unwrap())
        });
    }
    g.finish();
}

fn publish(c: &mut Criterion) {
    let mut g = c.benchmark_group("publish_burst");
    let payload = Bytes::from(vec![0u8; 10_000]);
    g.throughput(Throughput::Elements(100));
    for kind in TopologyKind::ALL {
        let mut pair = PubSubPair::new(kind);
        g.bench_function(kind.label(), |b| b.iter(|| pair.burst(&payload, 100)));
    }
    g.finish();
}

fn scenarios(c: &mut Criterion) {
    let fig6 = Scenario::load("fig6").unwrap();
    c.bench_function("sim_fig6", |b| b.iter(|| run(&fig6).unwrap()));
    let cfg = Exp1Config {
        duration: 5.0,
        ..Exp1Config::default()
    };
    let mut g = c.benchmark_group("exp1_5s");
    g.sample_size(10);
    for kind in TopologyKind::ALL {
        g.bench_function(kind.label(), |b| b.iter(|| run_experiment1(kind, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, planning, publish, scenarios);
criterion_main!(benches);
