//! Parallel versus single-threaded execution of the main kernels. The
//! sequential case runs the same code inside a one-thread rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cascade_core::coarse::{build_coarse, predict_coarse_probs, CoarseConfig};
use cascade_core::fine::{build_fine, sample_gradients, FineConfig};
use cascade_core::losses::LossParams;
use cascade_core::metrics::squared_edt;
use cascade_core::phantom::{generate_phantom, PhantomSpec};
use cascade_core::preprocessing::{crop_at, extract_contour, PreprocessConfig};
use cascade_core::volume::Volume3D;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let par = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", seq), ("parallel", par)]
}

fn kernels(c: &mut Criterion) {
    let spec = PhantomSpec {
        volume_dims: [64; 3],
        aneurysm_radius: [3.0, 5.0],
        rng_seed: 3,
        ..Default::default()
    };
    let (img, label) = generate_phantom(&spec).unwrap();
    let vessels = img.map(|v| (v > 500.0) as u8);

    let coarse = build_coarse(&CoarseConfig {
        channels_per_layer: vec![8, 8, 12, 12, 12, 12, 16, 16],
        ..Default::default()
    })
    .unwrap();
    let fine = build_fine(&FineConfig {
        base_filters: 8,
        ..Default::default()
    })
    .unwrap();
    let contour = extract_contour(&vessels, &PreprocessConfig::default());
    let voi = crop_at(&img, &contour, &label, [32; 3], 32, "bench").unwrap();
    let small: Volume3D = voi.image.clone();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("edt_64", name), |b| {
            pool.install(|| b.iter(|| squared_edt(&vessels, [1.0; 3])))
        });
        g.bench_function(BenchmarkId::new("coarse_infer_32", name), |b| {
            pool.install(|| b.iter(|| predict_coarse_probs(&coarse, &small).unwrap()))
        });
        g.bench_function(BenchmarkId::new("fine_step_32", name), |b| {
            pool.install(|| b.iter(|| sample_gradients(&fine, &voi, &LossParams::default(), 0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
