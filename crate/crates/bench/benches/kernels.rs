use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use kdep::align::fit_svd_projector;
use kdep::distill::{kdep_loss, train, Mode, TrainConfig, TrainData};
use kdep::eval::{verify_variance_identity, VarianceCheckConfig};
use kdep::linalg::svd_topk;
use kdep::transform::pts;
use kdep_bench::{conv_student, gaussian, student};

fn linalg(c: &mut Criterion) {
    let x = gaussian(2000, 64, 1);
    c.bench_function("svd_topk 2000x64 k=16", |b| b.iter(|| svd_topk(black_box(&x), 16).unwrap()));
    c.bench_function("fit_svd_projector 2000x64 k=16", |b| {
        b.iter(|| fit_svd_projector(black_box(&x), 16).unwrap())
    });
}

fn transforms(c: &mut Criterion) {
    let x = gaussian(2000, 16, 2).scale(10.0);
    c.bench_function("pts 2000x16", |b| b.iter(|| pts(black_box(&x), 0.1, 3.0).unwrap()));
}

fn network(c: &mut Criterion) {
    let net = student();
    let batch = gaussian(64, 32, 3);
    let targets = gaussian(64, 16, 4);
    c.bench_function("mlp forward b=64", |b| b.iter(|| net.forward(black_box(&batch)).unwrap()));
    c.bench_function("mlp forward+backward b=64", |b| {
        b.iter(|| {
            let out = net.forward(&batch).unwrap();
            let (_, g) = kdep_loss(&out.features, &targets, 1.0).unwrap();
            net.backward(&out.cache, Some(&g), None).unwrap()
        })
    });

    let conv = conv_student();
    let images = gaussian(16, 8 * 8 * 3, 5);
    let conv_targets = gaussian(16, 16, 6);
    c.bench_function("conv forward+backward b=16", |b| {
        b.iter(|| {
            let out = conv.forward(&images).unwrap();
            let (_, g) = kdep_loss(&out.features, &conv_targets, 1.0).unwrap();
            conv.backward(&out.cache, Some(&g), None).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let inputs = gaussian(2000, 32, 7);
    let targets = gaussian(2000, 16, 8);
    let cfg = TrainConfig { epochs: 1, mode: Mode::Kdep, ..TrainConfig::default() };
    let net = student();
    c.bench_function("kdep epoch n=2000 b=64", |b| {
        b.iter_batched(
            || TrainData { targets: Some(&targets), ..TrainData::new(&inputs) },
            |data| train(&cfg, &net, data).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn theorem(c: &mut Criterion) {
    let cfg = VarianceCheckConfig { samples: 100_000, ..VarianceCheckConfig::default() };
    c.bench_function("monte-carlo 4x1e5", |b| b.iter(|| verify_variance_identity(black_box(&cfg)).unwrap()));
}

criterion_group!(benches, linalg, transforms, network, training, theorem);
criterion_main!(benches);
