use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use refinestyle::adaptation::{swd, SwdConfig};
use refinestyle::inversion::Model;
use refinestyle::linalg::singular_values;
use refinestyle::refinement::kernel_spectrum;
use refinestyle::{Rng, Tensor};
use refinestyle_bench::{fixture, image};

fn synthesis(c: &mut Criterion) {
    let f = fixture("desk-default");
    let codes = f.bundle.sample_codes(8, &mut Rng::new(0)).unwrap();
    let deltas = f.factors.deltas().unwrap();
    let mut g = c.benchmark_group("synthesize_batch8");
    g.bench_function("baseline", |b| b.iter(|| f.bundle.synthesize(black_box(&codes), None).unwrap()));
    g.bench_function("refined", |b| b.iter(|| f.bundle.synthesize(black_box(&codes), Some(&deltas)).unwrap()));
    g.finish();
}

fn inversion(c: &mut Criterion) {
    let mut g = c.benchmark_group("reconstruct");
    for profile in ["desk-default", "desk-full", "desk-no-group-no-factor"] {
        let f = fixture(profile);
        let img = image(&f, 3);
        let model = Model::TwoStage { stage1: &f.stage1, refiner: &f.refiner };
        g.bench_with_input(BenchmarkId::from_parameter(profile), &img, |b, img| b.iter(|| model.reconstruct(&f.bundle, img).unwrap()));
    }
    g.finish();
}

fn svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("jacobi_svd");
    for n in [16usize, 32, 64] {
        let a = Tensor::<f64>::randn([n, 9 * n], 1.0, &mut Rng::new(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| singular_values(a.data(), n, 9 * n).unwrap()));
    }
    g.finish();
    let f = fixture("desk-default");
    c.bench_function("kernel_spectrum_8", |b| b.iter(|| kernel_spectrum(&f.bundle, 8, &mut Rng::new(0)).unwrap()));
}

fn sliced_wasserstein(c: &mut Criterion) {
    let a = Tensor::<f32>::randn([512, 32], 1.0, &mut Rng::new(0));
    let b2 = Tensor::<f32>::randn([512, 32], 1.0, &mut Rng::new(1));
    let cfg = SwdConfig::default();
    c.bench_function("swd_512x32_k128", |b| b.iter(|| swd(black_box(&a), black_box(&b2), &cfg).unwrap()));
}

criterion_group!(benches, synthesis, inversion, svd, sliced_wasserstein);
criterion_main!(benches);
