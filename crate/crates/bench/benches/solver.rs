use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evio_core::dba::{build_normal_equations, schur_reduce, update_depths};
use evio_core::geometry::{Pose, Twist};
use evio_core::imu::{preintegrate, Bias, ImuNoise, ImuSample};
use evio_core::patch_graph::{FlowPrediction, GraphParams, Patch, PatchGraph, PatchKey};
use evio_core::Intrinsics;
use nalgebra::{Vector2, Vector3};

/// Window of `frames` keyframes, 96 patches each, linked within a
/// lookback of 13.
fn window_graph(frames: usize) -> PatchGraph {
    let mut g = PatchGraph::new(GraphParams {
        max_keyframes: frames,
        ..GraphParams::default()
    });
    for f in 0..frames {
        let xi = Twist::new(
            Vector3::new(0.05 * f as f64, 0.0, 0.0),
            Vector3::new(0.0, 0.01 * f as f64, 0.0),
        );
        g.push_keyframe(f, f as i64 * 33_333, Pose::exp(&xi));
        for index in 0..96 {
            let u = 20.0 + (index % 12) as f64 * 25.0;
            let v = 20.0 + (index / 12) as f64 * 27.0;
            g.insert_patch(Patch::new(PatchKey { anchor: f, index }, Vector2::new(u, v), 3, 0.5));
        }
    }
    for f in 0..frames {
        for edge in g.add_edges(f, 13) {
            g.set_flow(
                &edge,
                FlowPrediction::new(Vector2::new(0.5, -0.3), Vector2::new(1.0, 1.0)),
            );
        }
    }
    g
}

fn bench_schur(c: &mut Criterion) {
    let intr = Intrinsics::default();
    let mut group = c.benchmark_group("dba");
    for frames in [4, 10] {
        let g = window_graph(frames);
        group.bench_with_input(BenchmarkId::new("normal_equations", frames), &g, |b, g| {
            b.iter(|| build_normal_equations(black_box(g), &intr))
        });
        let ne = build_normal_equations(&g, &intr);
        group.bench_with_input(BenchmarkId::new("schur_solve", frames), &ne, |b, ne| {
            b.iter(|| {
                let f = schur_reduce(black_box(ne));
                let xi = f.solve(&[ne.frames[0]]).unwrap();
                update_depths(ne, &xi)
            })
        });
    }
    group.finish();
}

fn bench_preintegration(c: &mut Criterion) {
    // one 33 ms segment and one second at 1 kHz
    for n in [34, 1000] {
        let samples: Vec<ImuSample> = (0..n)
            .map(|k| {
                let t = k as f64 * 1e-3;
                ImuSample::new(
                    k as i64 * 1000,
                    Vector3::new(t.sin(), 0.1, 9.81),
                    Vector3::new(0.2 * t.cos(), 0.1, -0.05),
                )
            })
            .collect();
        c.bench_with_input(BenchmarkId::new("preintegrate", n), &samples, |b, s| {
            b.iter(|| preintegrate(black_box(s), &Bias::zero(), &ImuNoise::default()).unwrap())
        });
    }
}

criterion_group!(benches, bench_schur, bench_preintegration);
criterion_main!(benches);
