use criterion::{criterion_group, criterion_main, Criterion};
use scafusion::dataset::make_sample;
use scafusion::model::{Model, Prepared};
use scafusion::scene::SceneSpec;
use scafusion::train::{train, RunConfig};

fn step(c: &mut Criterion, name: &str, cfg: RunConfig) {
    let (model, store) = Model::new(&cfg.model, 0).unwrap();
    let data: Vec<Prepared> = (0..cfg.train.batch_size)
        .map(|k| model.prepare(&make_sample(&SceneSpec::default(), k).unwrap()).unwrap())
        .collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function(name, |b| {
        b.iter_batched(
            || store.clone(),
            |mut s| train(&model, &mut s, &data, &cfg, |_, _| Ok(())).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 1;
    cfg.train.batch_size = 2;
    step(c, "full batch 2", cfg.clone());
    cfg.model.camera_branch = false;
    step(c, "lidar only batch 2", cfg);
}

criterion_group!(benches, bench);
criterion_main!(benches);
