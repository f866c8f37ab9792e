use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scafusion::fusion::{ConvCat, Sca};
use scafusion::lidar::{voxelize, PillarEncoder, PointCloud, POINT_FEATURES};
use scafusion::params::Init;
use scafusion::tensor::gradcheck::random_tensor;
use scafusion::{BEVGridSpec, Graph, ParamStore, Tensor};

fn grid() -> BEVGridSpec {
    BEVGridSpec {
        x_range: [0.0, 8.0],
        y_range: [-4.0, 4.0],
        cell: 1.0,
        z_range: [-2.0, 4.0],
    }
}

fn cloud(points: &[[f32; 4]]) -> PointCloud {
    PointCloud {
        points: points.to_vec(),
    }
}

#[test]
fn center_point_lands_in_the_center_pillar() {
    let set = voxelize(&cloud(&[[4.0, 0.0, 0.5, 0.3]]), &grid(), 4).unwrap();
    assert_eq!(set.len(), 1);
    // floor((4 - 0) / 1) = 4, floor((0 + 4) / 1) = 4 on an 8 x 8 grid
    assert_eq!(set.pillars[0].cell, 4 * 8 + 4);
    let p = set.pillars[0].points[0];
    assert_eq!(&p[..4], &[4.0, 0.0, 0.5, 0.3]);
    assert_eq!(&p[4..7], &[0.0, 0.0, 0.0]);
    assert_eq!(&p[7..], &[-0.5, -0.5]);
}

#[test]
fn out_of_range_points_and_truncation() {
    let g = grid();
    let empty = voxelize(&cloud(&[[-0.1, 0.0, 0.0, 1.0], [3.0, 0.0, 9.0, 1.0]]), &g, 4).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.dropped, 2);

    let twin = voxelize(&cloud(&[[1.5, 1.5, 0.0, 0.1], [1.5, 1.5, 0.0, 0.9]]), &g, 1).unwrap();
    assert_eq!(twin.len(), 1);
    assert_eq!(twin.pillars[0].points.len(), 1);
    assert_eq!(twin.pillars[0].points[0][3], 0.1);
    assert_eq!(twin.dropped, 1);
    assert!(voxelize(&cloud(&[]), &g, 0).is_err());
}

fn encoder(channels: usize, seed: u64) -> (PillarEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = PillarEncoder::new(&mut Init::new(&mut store, &mut rng), "pfn", channels).unwrap();
    (enc, store.cast())
}

fn encode(enc: &PillarEncoder, ps: &ParamStore<f64>, pc: &PointCloud, max_points: usize) -> Tensor<f64> {
    let g0 = grid();
    let set = voxelize(pc, &g0, max_points).unwrap();
    let mut g = Graph::<f64>::new();
    let y = enc.forward(&mut g, ps, &[set], &g0).unwrap();
    g.value(y).clone()
}

#[test]
fn identity_encoder_copies_decorated_features() {
    let (enc, mut ps) = encoder(POINT_FEATURES, 1);
    let w = ps.get_mut(&enc.weight).unwrap();
    w.tensor = Tensor::from_fn(vec![POINT_FEATURES, POINT_FEATURES], |k| {
        if k / POINT_FEATURES == k % POINT_FEATURES {
            1.0
        } else {
            0.0
        }
    });
    ps.get_mut(&enc.bias).unwrap().tensor = Tensor::zeros(vec![1, 1, POINT_FEATURES]);
    let pc = cloud(&[[2.75, -1.25, 0.5, 0.8]]);
    let out = encode(&enc, &ps, &pc, 4);
    assert_eq!(out.shape(), &[1, POINT_FEATURES, 8, 8]);
    let cell = (2, 2);
    let want = [2.75, -1.25, 0.5, 0.8, 0.0, 0.0, 0.0, 0.25, 0.25].map(|v: f64| v.max(0.0));
    for (c, w) in want.iter().enumerate() {
        assert!((out.at(&[0, c, cell.0, cell.1]) - w).abs() < 1e-6, "channel {c}");
    }
    let mass: f64 = out.data().iter().map(|v| v.abs()).sum();
    let kept: f64 = want.iter().sum();
    assert!((mass - kept).abs() < 1e-5);
}

#[test]
fn empty_cloud_encodes_to_zeros() {
    let (enc, ps) = encoder(6, 2);
    let out = encode(&enc, &ps, &cloud(&[]), 4);
    assert_eq!(out.shape(), &[1, 6, 8, 8]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn pillar_encoding_ignores_point_order(seed in 0u64..200, n in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, ps) = encoder(5, seed);
        let mut pts: Vec<[f32; 4]> = (0..n)
            .map(|_| [rng.gen_range(2.0..4.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..2.0), rng.gen()])
            .collect();
        let a = encode(&enc, &ps, &cloud(&pts), 64);
        pts.shuffle(&mut rng);
        let b = encode(&enc, &ps, &cloud(&pts), 64);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

fn sca(c: usize, rho: usize, seed: u64) -> (Sca, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Sca::new(&mut Init::new(&mut store, &mut rng), "sca", c, rho).unwrap();
    (s, store.cast())
}

#[test]
fn zero_init_gates_read_one_half() {
    let (s, ps) = sca(8, 2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_tensor(&[2, 8, 3, 5], &mut rng));
    let (wh, ww) = s.cpem(&mut g, &ps, x).unwrap();
    assert_eq!(g.shape(wh), &[2, 8, 3, 1]);
    assert_eq!(g.shape(ww), &[2, 8, 1, 5]);
    let ws = s.saem(&mut g, &ps, x).unwrap();
    assert_eq!(g.shape(ws), &[2, 1, 3, 5]);
    for v in [wh, ww, ws] {
        assert!(g.value(v).data().iter().all(|&w| w == 0.5));
    }
    for (saem, div) in [(true, 8.0), (false, 4.0)] {
        let y = s.apply(&mut g, &ps, x, saem).unwrap();
        for (a, b) in g.value(x).data().iter().zip(g.value(y).data()) {
            assert!((a / div - b).abs() < 1e-12);
        }
    }
    assert!(Sca::new(&mut Init::new(&mut ParamStore::new(), &mut rng), "s", 4, 8).is_err());
}

fn randomized(ps: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ps.clone();
    for p in out.iter_mut() {
        p.tensor = random_tensor(p.tensor.shape(), &mut rng).map(|v| 3.0 * v);
    }
    out
}

#[test]
fn saem_on_constant_and_hot_pixel_maps() {
    let (s, ps) = sca(4, 2, 1);
    let ps = randomized(&ps, 9);
    let mut g = Graph::<f64>::new();
    let flat = g.constant(Tensor::full(vec![1, 4, 3, 3], 0.7));
    let w = s.saem(&mut g, &ps, flat).unwrap();
    let first = g.value(w).data()[0];
    assert!(g.value(w).data().iter().all(|&v| v == first && v > 0.0 && v < 1.0));

    let hot = g.constant(Tensor::from_fn(
        vec![1, 4, 3, 3],
        |k| if k == 9 + 4 { 50.0 } else { 0.0 },
    ));
    let maxmap = g.reduce(hot, &[1], scafusion::tensor::ReduceMode::Max).unwrap();
    let m = g.value(maxmap).data();
    assert_eq!(m.iter().cloned().fold(f64::MIN, f64::max), m[4]);
    let w = s.saem(&mut g, &ps, hot).unwrap();
    assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn cpem_sees_constant_profiles() {
    // z^h = z^w = c on a constant map, so every row and column gate agrees
    let (s, ps) = sca(4, 2, 3);
    let ps = randomized(&ps, 10);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 4, 3, 5], -1.3));
    let (wh, ww) = s.cpem(&mut g, &ps, x).unwrap();
    for v in [wh, ww] {
        let t = g.value(v);
        for c in 0..4 {
            let row: Vec<f64> = t.data()[c * t.numel() / 4..(c + 1) * t.numel() / 4].to_vec();
            assert!(row.iter().all(|&r| (r - row[0]).abs() < 1e-12));
        }
    }
}

proptest! {
    #[test]
    fn sca_never_amplifies(seed in 0u64..300, saem in any::<bool>()) {
        let (s, ps) = sca(8, 4, seed);
        let ps = randomized(&ps, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[1, 8, 4, 3], &mut rng).map(|v| 5.0 * v));
        let y = s.apply(&mut g, &ps, x, saem).unwrap();
        for (a, b) in g.value(x).data().iter().zip(g.value(y).data()) {
            prop_assert!(b.abs() <= a.abs());
        }
    }
}

#[test]
fn convcat_shapes_and_gradient_flow() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fuse = ConvCat::new(&mut Init::new(&mut store, &mut rng), "fuse", 3, 2, 6).unwrap();
    let ps = store.cast::<f64>();
    let lidar_v = random_tensor(&[1, 2, 4, 4], &mut rng);
    let run = |cam: Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let c = g.leaf(cam, true);
        let l = g.leaf(lidar_v.clone(), true);
        let y = fuse.forward(&mut g, &ps, c, l).unwrap();
        assert_eq!(g.shape(y), &[1, 6, 4, 4]);
        let loss = scafusion::tensor::gradcheck::weighted_sum(&mut g, y, 7).unwrap();
        let grads = g.backward(loss).unwrap();
        let nonzero = |v| grads.of(v).unwrap().data().iter().any(|&x: &f64| x != 0.0);
        (g.value(y).clone(), nonzero(c), nonzero(l))
    };
    let (a, cam_grad, lidar_grad) = run(random_tensor(&[1, 3, 4, 4], &mut rng));
    assert!(cam_grad && lidar_grad);
    assert!(a.data().iter().all(|v| v.is_finite()));
    let (z1, _, _) = run(Tensor::zeros(vec![1, 3, 4, 4]));
    let (z2, _, _) = run(Tensor::zeros(vec![1, 3, 4, 4]));
    assert_eq!(z1, z2);

    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let l = g.constant(Tensor::zeros(vec![1, 2, 4, 5]));
    assert!(fuse.forward(&mut g, &ps, c, l).is_err());
}
