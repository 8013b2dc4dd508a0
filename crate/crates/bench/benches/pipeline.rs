use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use tfqkd_bench::{field_counts, noisy_keys};
use tfqkd_core::aopp::{aopp_pair, aopp_sift};
use tfqkd_core::keyrate::{analyze, skr_vs_distance, CurveConfig};
use tfqkd_core::montecarlo::{run_protocol, simulate_stabilization, MonteCarloConfig, Stage, StabilizerConfig};
use tfqkd_core::{ArmSplit, DetectorParams, LinkBudget, ProtocolParams, SecurityParams};

fn key_rate(c: &mut Criterion) {
    let params = ProtocolParams::field_trial();
    let counts = field_counts(&params);
    let sec = SecurityParams::default();
    c.bench_function("analyze field counts", |b| b.iter(|| analyze(black_box(&counts), &params, &sec).unwrap()));

    let cfg = CurveConfig::new(params, DetectorParams::protocol_apd());
    let sweep: Vec<f64> = (0..=60).map(f64::from).collect();
    c.bench_function("curve 0-60 dB", |b| b.iter(|| skr_vs_distance(black_box(&sweep), &cfg).unwrap()));
}

fn pairing(c: &mut Criterion) {
    let keys = noisy_keys(1_000_000, 0.3, 1);
    let mut g = c.benchmark_group("pairing");
    g.throughput(Throughput::Elements(keys.len() as u64));
    g.sample_size(20);
    g.bench_function("pair and sift 1e6 bits", |b| {
        b.iter(|| aopp_sift(&keys, &aopp_pair(keys.bob(), 2)).unwrap())
    });
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let params = ProtocolParams::field_trial();
    let mut g = c.benchmark_group("montecarlo");
    g.sample_size(10);
    for loss in [20.0, 50.0] {
        let link = LinkBudget::from_total_loss(loss, ArmSplit::matched_arrival(&params), None);
        let slots = 100_000_000;
        let cfg = MonteCarloConfig::new(params.clone(), link, DetectorParams::protocol_apd(), slots, 3);
        g.throughput(Throughput::Elements(slots));
        g.bench_function(format!("1e8 slots at {loss} dB"), |b| b.iter(|| run_protocol(&cfg).unwrap()));
    }
    let sc = StabilizerConfig::default();
    g.bench_function("stabiliser 0.1 s", |b| {
        b.iter(|| simulate_stabilization(&sc, Stage::CoarseFine, 0.1, 4).unwrap())
    });
    g.finish();
}

criterion_group!(benches, key_rate, pairing, simulation);
criterion_main!(benches);
