use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonoclass::augment::{apply, sample_params};
use sonoclass::eval_report::auc_from_scores;
use sonoclass::model_zoo::{build_model, BuildOptions};
use sonoclass::preprocess::{standardize, to_model_input_sized};
use sonoclass::{BackboneName, BackboneSpec, GrayscaleImage};

fn noise_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GrayscaleImage {
    GrayscaleImage::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..255.0f32))).unwrap()
}

fn preprocess(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let raw = noise_image(&mut rng, 480, 640);
    c.bench_function("standardize 640x480 -> 512", |b| b.iter(|| standardize(black_box(&raw), 512).unwrap()));
    c.bench_function("standardize 640x480 -> 128", |b| b.iter(|| standardize(black_box(&raw), 128).unwrap()));
}

fn augment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = noise_image(&mut rng, 512, 512);
    c.bench_function("augment apply 512", |b| {
        b.iter_batched(|| sample_params(&mut rng), |p| apply(&img, &p).unwrap(), BatchSize::SmallInput)
    });
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 2600;
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    c.bench_function("auc 2600", |b| b.iter(|| auc_from_scores(black_box(&scores), black_box(&labels)).unwrap()));
}

fn predict(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = BackboneSpec::desk(BackboneName::Densenet121);
    let model = build_model(&spec, &BuildOptions { input_size: 128, ..BuildOptions::default() }).unwrap();
    let batch: Vec<_> = (0..16)
        .map(|_| to_model_input_sized(&noise_image(&mut rng, 128, 128), 128).unwrap())
        .collect();
    c.bench_function("predict batch 16 @128 densenet121 desk", |b| b.iter(|| model.predict(black_box(&batch)).unwrap()));
}

criterion_group!(benches, preprocess, augment, auc, predict);
criterion_main!(benches);
