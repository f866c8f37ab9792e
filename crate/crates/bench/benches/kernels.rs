use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scafusion::scene::CameraRig;
use scafusion::tensor::gradcheck::random_tensor;
use scafusion::view_transform::{build_frustum, lift_splat, splat_index, uniform_bins};
use scafusion::{BEVGridSpec, Graph, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&[4, 32, 32, 32], &mut rng).cast::<f32>();
    let w = random_tensor(&[32, 32, 3, 3], &mut rng).cast::<f32>();
    let dw = random_tensor(&[32, 1, 3, 3], &mut rng).cast::<f32>();
    c.bench_function("conv2d 3x3 4x32x32x32", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
    c.bench_function("conv2d depthwise 4x32x32x32", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(dw.clone());
            black_box(g.conv2d(xv, wv, None, 1, 1, 32).unwrap());
        })
    });
}

fn scatter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = 16 * 24 * 40;
    let values = random_tensor(&[rows, 32], &mut rng).cast::<f32>();
    let index: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..32 * 32)).collect();
    c.bench_function("scatter_add 15360 rows", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let v = g.leaf(values.clone(), true);
            let y = g.scatter_add(v, &index, 32, 32).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn splat(c: &mut Criterion) {
    let calib = CameraRig::default().calib().scaled(8);
    let grid = BEVGridSpec::default();
    let frustum = build_frustum(&calib, &uniform_bins(1.0, 24.0, 16), calib.height, calib.width).unwrap();
    let index = splat_index(&frustum, &grid);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ctx = random_tensor(&[2, 32, 24, 40], &mut rng).cast::<f32>();
    let probs = Tensor::full(vec![2, 16, 24, 40], 1.0f32 / 16.0);
    c.bench_function("lift_splat 2x32ch 16 bins", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let cv = g.leaf(ctx.clone(), true);
            let pv = g.leaf(probs.clone(), true);
            let y = lift_splat(&mut g, cv, pv, &index, &grid).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

criterion_group!(benches, conv, scatter, splat);
criterion_main!(benches);
