use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use cellflow_core::flowgen::label_to_flow;
use cellflow_core::metrics::{match_instances, MatchOptions};
use cellflow_core::modality::{kmeans, EmbeddingSet, KmeansConfig};
use cellflow_core::ports::FramePort;
use cellflow_core::raster::Raster;
use cellflow_core::stitcher::{stitch, StitchConfig};
use cellflow_core::synth::{generate_image, SynthImage, SynthSpec};
use cellflow_core::tracker::{follow_flows, track, TrackConfig};

fn sample_256() -> SynthImage {
    let spec = SynthSpec {
        height: 256,
        width: 256,
        blob_count: (10, 14),
        radius: (5.0, 16.0),
        touching_fraction: 0.25,
        noise_sigma: 0.0,
        contamination: 0.0,
    };
    generate_image(&spec, 42)
}

fn bench_flowgen(c: &mut Criterion) {
    let sample = sample_256();
    c.bench_function("label_to_flow/256", |b| {
        b.iter(|| black_box(label_to_flow(black_box(&sample.mask))))
    });
}

fn bench_tracker(c: &mut Criterion) {
    let sample = sample_256();
    let pred = label_to_flow(&sample.mask).to_prediction();
    let cfg = TrackConfig::default();
    c.bench_function("follow_flows/256", |b| {
        b.iter(|| black_box(follow_flows(black_box(&pred), &cfg)))
    });
    c.bench_function("track/256", |b| {
        b.iter(|| black_box(track(black_box(&pred), &cfg).unwrap()))
    });
}

fn bench_stitcher(c: &mut Criterion) {
    let sample = sample_256();
    let port = FramePort::from_mask(&sample.mask);
    let image = Raster::zeros(256, 256, 1);
    let cfg = StitchConfig {
        window: 128,
        ..Default::default()
    };
    c.bench_function("stitch/256_window128", |b| {
        b.iter(|| black_box(stitch(&port, black_box(&image), &cfg).unwrap()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let sample = sample_256();
    let pred = label_to_flow(&sample.mask).to_prediction();
    let recovered = track(&pred, &TrackConfig::default()).unwrap();
    c.bench_function("match_instances/256", |b| {
        b.iter(|| {
            black_box(
                match_instances(
                    black_box(&sample.mask),
                    black_box(&recovered),
                    &MatchOptions::default(),
                )
                .unwrap(),
            )
        })
    });
}

fn bench_modality(c: &mut Criterion) {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(11);
    let n = 200;
    let d = 8;
    let vectors: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * 10.0).collect();
    let names = (0..n).map(|i| i.to_string()).collect();
    let emb = EmbeddingSet::new(d, vectors, names).unwrap();
    let cfg = KmeansConfig {
        k: 40,
        seed: 3,
        ..Default::default()
    };
    c.bench_function("kmeans/200x8_k40", |b| {
        b.iter(|| black_box(kmeans(black_box(&emb), &cfg).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_flowgen,
    bench_tracker,
    bench_stitcher,
    bench_metrics,
    bench_modality
);
criterion_main!(benches);
