//! Throughput benches for the data-parallel hot paths.
//!
//! Each group is labeled with the active execution mode, so results from
//! `cargo bench` (rayon) and `cargo bench --no-default-features`
//! (sequential) land side by side in the criterion history:
//!
//!   cargo bench -p cape-core
//!   cargo bench -p cape-core --no-default-features

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cape_core::codec::CoordCodec;
use cape_core::data::{generate_synthetic, Split, SynthConfig};
use cape_core::decode::{DecodeStrategy, PromptSetup};
use cape_core::density::{kde, sample_keypoint, BandwidthRule, SampleSet};
use cape_core::instructions::{PromptStyle, Templates};
use cape_core::model::{FinetuneMode, ModelBundle, ModelConfig};
use cape_core::rng::stream;
use cape_core::train::{build_epoch, sequence_loss, shifted_supervision, TrainConfig};
use cape_core::vocab::Vocabulary;
use rand::Rng;

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_model() -> (ModelBundle, Vocabulary) {
    let vocab = Vocabulary::default_charset();
    let cfg = ModelConfig {
        image_size: 32,
        patch: 8,
        encoder_width: 32,
        encoder_depth: 1,
        encoder_heads: 4,
        width: 64,
        lm_depth: 2,
        lm_heads: 4,
        context: 512,
        adapter_rank: 4,
        adapter_scale: 1.0,
        finetune_mode: FinetuneMode::Full,
    };
    (ModelBundle::init(&cfg, &vocab, 1).unwrap(), vocab)
}

fn bench_gradient_batch(c: &mut Criterion) {
    let (model, vocab) = bench_model();
    let (dataset, _registry) = generate_synthetic(&SynthConfig {
        n_categories: 3,
        images_per_category: 2,
        image_size: 32,
        seed: 1,
        test_fraction: 0.34,
        ..Default::default()
    })
    .unwrap();
    let sample = dataset.split_samples(Split::Train)[0];
    let image = sample.image.to_image();
    // A fixed synthetic sequence stands in for a rendered conversation.
    let mut rng = stream(2, &[0]);
    let tokens: Vec<usize> = (0..180).map(|_| rng.gen_range(5..vocab.size())).collect();
    let (targets, mut weights) = shifted_supervision(&tokens, &vec![0.0; tokens.len()]);
    for w in weights.iter_mut().skip(100).take(28) {
        *w = 1.0;
    }

    let mut group = c.benchmark_group("gradient_microbatch");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(mode(), "batch8"), |b| {
        b.iter(|| {
            let losses = cape_core::par::map_range(8, |_| {
                sequence_loss(&model, &image, &tokens, &targets, &weights)
                    .unwrap()
                    .0
            });
            losses.iter().sum::<f64>()
        })
    });
    group.finish();
}

fn bench_density_sampling(c: &mut Criterion) {
    let (model, vocab) = bench_model();
    let codec = CoordCodec::with_k(3).unwrap();
    let style = PromptStyle::default();
    let templates = Templates::builtin();
    let (dataset, registry) = generate_synthetic(&SynthConfig {
        n_categories: 3,
        images_per_category: 1,
        image_size: 32,
        seed: 1,
        test_fraction: 0.34,
        ..Default::default()
    })
    .unwrap();
    let sample = &dataset.samples[0];
    let category = dataset.category(sample.category_id).unwrap();
    let spec = registry.keypoints(&category.name).unwrap()[0].clone();
    let setup = PromptSetup {
        style: &style,
        templates: &templates,
        vocab: &vocab,
        codec: &codec,
        category_names: category.keypoints.clone(),
    };
    let image = sample.image.to_image();

    let mut group = c.benchmark_group("density_sampling");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(mode(), "draws64"), |b| {
        b.iter(|| {
            sample_keypoint(
                &model,
                &image,
                &spec,
                &setup,
                &DecodeStrategy::Temperature { t: 0.6 },
                64,
                9,
            )
            .unwrap()
            .points
            .len()
        })
    });
    group.finish();
}

fn bench_kde_grid(c: &mut Criterion) {
    let mut rng = stream(5, &[0]);
    let points: Vec<(f64, f64)> = (0..256)
        .map(|_| (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)))
        .collect();
    let set = SampleSet {
        points,
        strategy: "bench".into(),
    };
    let mut group = c.benchmark_group("kde_grid");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new(mode(), "g128_s256"), |b| {
        b.iter(|| kde(&set, BandwidthRule::Scott, 128).unwrap().integral())
    });
    group.finish();
}

fn bench_epoch_planning(c: &mut Criterion) {
    let (dataset, _) = generate_synthetic(&SynthConfig {
        n_categories: 10,
        images_per_category: 50,
        image_size: 32,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let samples = dataset.split_samples(Split::Train);
    let cfg = TrainConfig {
        rounds_per_conversation: 4,
        ..Default::default()
    };
    let mut group = c.benchmark_group("epoch_planning");
    group.bench_function(BenchmarkId::new(mode(), "images400"), |b| {
        b.iter(|| build_epoch(&samples, &cfg, 0).unwrap().len())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_gradient_batch,
    bench_density_sampling,
    bench_kde_grid,
    bench_epoch_planning
);
criterion_main!(benches);
