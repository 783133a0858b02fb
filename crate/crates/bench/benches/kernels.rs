use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use echo_imager::experiments::sample;
use echo_imager::fisher::{classical_fi, FiOptions};
use echo_imager::fock::{echo_clicks, loss_kraus, twin_beam_cutoff, FockDensityMatrix, TwoModeSqueezer};
use echo_imager::gaussian::{echo_sequence, perturbative_interaction};
use echo_imager::modes::{ModeBasis, PixelGrid, Scene};
use echo_imager::protocols::{direct_detection, spade, NoiseConfig, ProbeConfig};
use echo_imager::RMatrix;

fn imaging(c: &mut Criterion) {
    let basis = ModeBasis::hermite_gauss(1.0, 8);
    let scene = Scene::two_point(0.1, 1.0, 0.01, 0.0).unwrap();
    let grid = PixelGrid::uniform(-6.0, 6.0, 240).unwrap();
    let none = NoiseConfig::none();
    c.bench_function("spade_distribution", |b| {
        b.iter(|| spade(black_box(&scene), &basis, &ProbeConfig::Vacuum, &none).unwrap())
    });
    c.bench_function("direct_detection_240px", |b| b.iter(|| direct_detection(black_box(&scene), &grid).unwrap()));
    c.bench_function("spade_classical_fi", |b| {
        b.iter(|| {
            classical_fi(
                |s| spade(&Scene::two_point(s, 1.0, 0.01, 0.0)?, &basis, &ProbeConfig::Vacuum, &none),
                black_box(0.1),
                FiOptions::default(),
            )
            .unwrap()
        })
    });
    let dist = spade(&scene, &basis, &ProbeConfig::Vacuum, &none).unwrap();
    c.bench_function("multinomial_sample_1e6", |b| b.iter(|| sample(&dist, 1_000_000, black_box(7)).unwrap()));
}

fn fock(c: &mut Criterion) {
    let mut group = c.benchmark_group("fock");
    for r in [0.5, 1.0, 2.0] {
        let cutoff = twin_beam_cutoff(r, 1e-6);
        let channel = loss_kraus((-0.01f64).exp(), cutoff).unwrap();
        group.bench_with_input(BenchmarkId::new("echo_clicks", r), &r, |b, &r| {
            b.iter(|| echo_clicks(r, cutoff, &channel).unwrap())
        });
    }
    let cutoff = 12;
    let squeezer = TwoModeSqueezer::new(1.0, cutoff).unwrap();
    let vacuum = FockDensityMatrix::vacuum(2, cutoff).unwrap();
    group.bench_function("squeezer_build_12", |b| b.iter(|| TwoModeSqueezer::new(black_box(1.0), cutoff).unwrap()));
    group.bench_function("squeezer_apply_12", |b| b.iter(|| squeezer.apply(black_box(&vacuum)).unwrap()));
    let state = squeezer.apply(&vacuum).unwrap();
    let loss = loss_kraus(0.99, cutoff).unwrap();
    group.bench_function("kraus_apply_12", |b| b.iter(|| loss.apply(black_box(&state), 1).unwrap()));
    group.finish();
}

fn gaussian(c: &mut Criterion) {
    let n = 4;
    let eta = RMatrix::identity(2 * n, 2 * n) * 0.005;
    let channel = perturbative_interaction(&eta, &eta, n).unwrap();
    let r = vec![1.0; n];
    let phi = vec![0.0; n];
    c.bench_function("gaussian_echo_4_modes", |b| b.iter(|| echo_sequence(black_box(&r), &phi, &channel).unwrap()));
}

criterion_group!(benches, imaging, fock, gaussian);
criterion_main!(benches);
