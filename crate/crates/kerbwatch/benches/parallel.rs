//! Data-parallel vs sequential comparison for the two hot loops: all-pairs
//! risk assessment and the confidence x IoU sweep.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kerbwatch::geo::{solve_geoframe, BoundingBox, GeoFrame, GeoPoint, LocalFrame, PixelPoint};
use kerbwatch::ingest::{ClassLabel, DetectionEvent, FrameBatch};
use kerbwatch::metrics::{threshold_sweep, threshold_sweep_seq};
use kerbwatch::risk::{
    assess_all_pairs_par, assess_all_pairs_seq, FrictionContext, RiskParams, VruPolicy,
};
use kerbwatch::rng::Rng64;
use kerbwatch::track::{Track, TrackStore};

fn bench_frame() -> (GeoFrame, LocalFrame) {
    let gf = solve_geoframe([
        (PixelPoint::new(0.0, 0.0), GeoPoint::new(40.0, -8.0)),
        (PixelPoint::new(2000.0, 0.0), GeoPoint::new(40.0, -7.998)),
        (
            PixelPoint::new(2000.0, 2000.0),
            GeoPoint::new(40.002, -7.998),
        ),
        (PixelPoint::new(0.0, 2000.0), GeoPoint::new(40.002, -8.0)),
    ])
    .unwrap();
    let local = LocalFrame::new(gf.centroid_geo());
    (gf, local)
}

fn make_tracks(n: usize, gf: &GeoFrame, local: &LocalFrame) -> TrackStore {
    let mut rng = Rng64::new(42);
    let mut store = TrackStore::new();
    for i in 0..n {
        let class = match i % 3 {
            0 => ClassLabel::Person,
            1 => ClassLabel::Car,
            _ => ClassLabel::Truck,
        };
        let id = store.spawn(class, BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        let start = [rng.next_range(-60.0, 60.0), rng.next_range(-60.0, 60.0)];
        let vel = [rng.next_range(-10.0, 10.0), rng.next_range(-10.0, 10.0)];
        for k in 0..5 {
            let t = k as f64 * 0.05;
            let geo = local.from_enu(start[0] + vel[0] * t, start[1] + vel[1] * t);
            let pixel = gf.geo_to_pixel(geo).unwrap();
            store
                .get_mut(id)
                .unwrap()
                .update_kinematics(t, geo, pixel, local)
                .unwrap();
        }
    }
    store
}

fn pairs_benchmark(c: &mut Criterion) {
    let (gf, local) = bench_frame();
    let ctx = FrictionContext::dry_default();
    let policy = VruPolicy::default();
    let params = RiskParams::default();

    let mut group = c.benchmark_group("assess_all_pairs");
    for n in [30usize, 100, 300] {
        let store = make_tracks(n, &gf, &local);
        let tracks: Vec<&Track> = store.tracks().iter().collect();
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |b, _| {
            b.iter(|| {
                black_box(assess_all_pairs_seq(
                    black_box(&tracks),
                    &gf,
                    &local,
                    &ctx,
                    &policy,
                    &params,
                ))
            })
        });
        group.bench_with_input(BenchmarkId::new("rayon", n), &n, |b, _| {
            b.iter(|| {
                black_box(assess_all_pairs_par(
                    black_box(&tracks),
                    &gf,
                    &local,
                    &ctx,
                    &policy,
                    &params,
                ))
            })
        });
    }
    group.finish();
}

fn sweep_benchmark(c: &mut Criterion) {
    let mut rng = Rng64::new(7);
    let batches: Vec<FrameBatch> = (0..50)
        .map(|frame_id| FrameBatch {
            camera_id: "bench".into(),
            frame_id,
            t: frame_id as f64 * 0.05,
            detections: (0..40)
                .map(|_| {
                    let x = rng.next_range(0.0, 1800.0);
                    let y = rng.next_range(0.0, 1000.0);
                    DetectionEvent {
                        camera_id: "bench".into(),
                        frame_id,
                        t: frame_id as f64 * 0.05,
                        bbox: BoundingBox::new(x, y, x + 60.0, y + 60.0).unwrap(),
                        class_label: if rng.next_f64() < 0.5 {
                            ClassLabel::Person
                        } else {
                            ClassLabel::Car
                        },
                        confidence: rng.next_f64(),
                        detector_track_id: None,
                    }
                })
                .collect(),
        })
        .collect();
    let conf_grid: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    let iou_grid: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();

    let mut group = c.benchmark_group("threshold_sweep");
    group.bench_function("seq", |b| {
        b.iter(|| black_box(threshold_sweep_seq(&batches, &conf_grid, &iou_grid).unwrap()))
    });
    group.bench_function("rayon", |b| {
        b.iter(|| black_box(threshold_sweep(&batches, &conf_grid, &iou_grid).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, pairs_benchmark, sweep_benchmark);
criterion_main!(benches);
