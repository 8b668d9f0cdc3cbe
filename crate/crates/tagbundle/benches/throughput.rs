//! Parallel vs sequential throughput on the two batch-heavy paths: frame
//! simulation and full docking episodes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tagbundle::estimator::{estimate_bundle, EstimatorConfig, FilterWindow};
use tagbundle::geometry::{build_bundle, frontal_pose, CameraIntrinsics};
use tagbundle::latch::{run_episode, BoatState, EpisodeConfig, LatchThresholds};
use tagbundle::par::{map_indexed, map_indexed_seq};
use tagbundle::sim::{simulate_frame, NoiseProfile};

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
}

fn noisy_profile(seed: u64) -> NoiseProfile {
    let mut np = NoiseProfile::zero(seed);
    np.pixel_sigma = 0.8;
    np.reflection_rate = 1.0;
    np.reflection_radius_frac = 0.5;
    np.wave_amplitude_deg = 2.0;
    np.wave_period_s = 2.5;
    np
}

fn bench_frame_batch(c: &mut Criterion) {
    let bundle = build_bundle(130.0, 1, 10.0, 0.0).unwrap();
    let k = intrinsics();
    let np = noisy_profile(7);
    let truth = frontal_pose(1800.0);
    let est_cfg = EstimatorConfig {
        window_capacity: 1,
        ..EstimatorConfig::default()
    };
    let n = 512usize;

    let work = |i: usize| {
        let f = simulate_frame(&truth, &bundle, &k, &np, i as u64);
        let mut win = FilterWindow::new(1).unwrap();
        estimate_bundle(&f.detections, &bundle, &k, &mut win, &est_cfg)
            .map(|e| e.confidence)
            .unwrap_or(0.0)
    };

    let mut g = c.benchmark_group("frame_batch");
    g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
        b.iter(|| map_indexed(n, work))
    });
    g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| map_indexed_seq(n, work))
    });
    g.finish();
}

fn bench_episode_batch(c: &mut Criterion) {
    let bundle = build_bundle(130.0, 1, 10.0, 0.0).unwrap();
    let k = intrinsics();
    let n = 8usize;

    let work = |i: usize| {
        let cfg = EpisodeConfig::new(
            bundle.clone(),
            k,
            noisy_profile(i as u64),
            EstimatorConfig::default(),
            LatchThresholds::indoor(),
            BoatState::at(1800.0, 0.0, 180.0),
            i as u64,
        );
        run_episode(&cfg).map(|(r, _)| r.attempts).unwrap_or(0)
    };

    let mut g = c.benchmark_group("episode_batch");
    g.sample_size(10);
    g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
        b.iter(|| map_indexed(n, work))
    });
    g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| map_indexed_seq(n, work))
    });
    g.finish();
}

criterion_group!(benches, bench_frame_batch, bench_episode_batch);
criterion_main!(benches);
