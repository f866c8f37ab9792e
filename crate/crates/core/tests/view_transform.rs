use std::f64::consts::E;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scafusion::tensor::gradcheck::random_tensor;
use scafusion::view_transform::{
    build_frustum, depth_context_split, geometric_widths, lift_splat, nt_xent_align_loss, splat_index, uniform_bins,
    AlignBatch, DepthEncoder,
};
use scafusion::{BEVGridSpec, CameraCalib, Error, Graph, ParamStore, Tensor};

const EYE: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn calib(w: usize, h: usize) -> CameraCalib {
    CameraCalib {
        fx: 2.0,
        fy: 2.0,
        cx: 1.0,
        cy: 1.0,
        width: w,
        height: h,
        rotation: EYE,
        translation: [0.0; 3],
    }
}

fn unit_grid() -> BEVGridSpec {
    BEVGridSpec {
        x_range: [0.0, 4.0],
        y_range: [-2.0, 2.0],
        cell: 1.0,
        z_range: [-1.0, 10.0],
    }
}

#[test]
fn frustum_points_on_the_optical_axis() {
    let f = build_frustum(&calib(3, 3), &[1.0, 2.0], 3, 3).unwrap();
    assert_eq!(f.shape(), &[2, 3, 3, 3]);
    assert_eq!(&f.data()[(4) * 3..(4) * 3 + 3], &[0.0, 0.0, 1.0]);
    assert_eq!(&f.data()[(9 + 4) * 3..(9 + 4) * 3 + 3], &[0.0, 0.0, 2.0]);
}

#[test]
fn frustum_lateral_offset_is_one_metre_per_focal_length() {
    let cal = CameraCalib {
        fx: 2.0,
        cx: 0.0,
        ..calib(3, 1)
    };
    let f = build_frustum(&cal, &[1.0], 1, 3).unwrap();
    // u = 2 sits one focal length right of the principal point
    assert!((f.data()[2 * 3] - 1.0).abs() < 1e-12);
    assert!(build_frustum(&cal, &[2.0, 1.0], 1, 3).is_err());
    assert!(build_frustum(&cal, &[], 1, 3).is_err());
}

#[test]
fn uniform_bins_span_the_range() {
    assert_eq!(uniform_bins(1.0, 4.0, 4), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(uniform_bins(2.0, 9.0, 1), vec![2.0]);
}

fn split(raw: Tensor<f64>, d: usize) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(raw);
    let (p, _) = depth_context_split(&mut g, x, d).unwrap();
    g.value(p).clone()
}

#[test]
fn depth_softmax_cases() {
    let p = split(Tensor::zeros(vec![1, 5, 2, 2]), 4);
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

    let raw = Tensor::from_fn(vec![1, 4, 1, 1], |k| if k == 2 { 60.0 } else { 0.0 });
    let raw = Tensor::new(vec![1, 5, 1, 1], [raw.data(), &[0.0][..]].concat()).unwrap();
    let p = split(raw, 4);
    for (k, &v) in p.data().iter().enumerate() {
        let want = if k == 2 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-6, "{k}: {v}");
    }

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    assert!(depth_context_split(&mut g, x, 4).is_err());
}

proptest! {
    #[test]
    fn depth_probabilities_sum_to_one(seed in 0u64..500, d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_tensor(&[2, d + 2, 3, 4], &mut rng).map(|v| 8.0 * v);
        let p = split(raw, d);
        for b in 0..2 {
            for px in 0..12 {
                let s: f64 = (0..d).map(|k| p.data()[(b * d + k) * 12 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

fn splat(frustum: &Tensor<f64>, ctx: Tensor<f64>, probs: Tensor<f64>, grid: &BEVGridSpec) -> Tensor<f64> {
    let index = splat_index(frustum, grid);
    let mut g = Graph::<f64>::new();
    let c = g.constant(ctx);
    let p = g.constant(probs);
    let out = lift_splat(&mut g, c, p, &index, grid).unwrap();
    g.value(out).clone()
}

#[test]
fn one_hot_depth_lands_in_one_cell() {
    let grid = unit_grid();
    let frustum = Tensor::new(vec![3, 1, 1, 3], vec![0.5, 0.5, 0.0, 2.5, -1.5, 0.0, 3.5, 1.2, 0.0]).unwrap();
    for d in 0..3 {
        let probs = Tensor::from_fn(vec![1, 3, 1, 1], |k| if k == d { 1.0 } else { 0.0 });
        let ctx = Tensor::new(vec![1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let out = splat(&frustum, ctx, probs, &grid);
        let p = &frustum.data()[d * 3..d * 3 + 3];
        let cell = ((p[1] + 2.0).floor() * 4.0 + p[0].floor()) as usize;
        for ch in 0..2 {
            for k in 0..16 {
                let want = if k == cell { [1.5, -2.0][ch] } else { 0.0 };
                assert_eq!(out.data()[ch * 16 + k], want, "d={d} ch={ch} cell={k}");
            }
        }
    }
}

#[test]
fn points_outside_the_grid_give_an_empty_map() {
    let grid = unit_grid();
    let frustum = Tensor::new(vec![2, 1, 1, 3], vec![-0.5, 0.0, 0.0, 1.0, 0.0, 11.0]).unwrap();
    let index = splat_index(&frustum, &grid);
    assert_eq!(index.dropped, 2);
    let out = splat(
        &frustum,
        Tensor::full(vec![1, 3, 1, 1], 1.0),
        Tensor::full(vec![1, 2, 1, 1], 0.5),
        &grid,
    );
    assert!(out.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn splatted_mass_matches_kept_points(seed in 0u64..300) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = unit_grid();
        let (d, h, w) = (3, 2, 3);
        let pts: Vec<f64> = (0..d * h * w)
            .flat_map(|_| [rng.gen_range(-1.0..5.0), rng.gen_range(-3.0..3.0), 0.0])
            .collect();
        let frustum = Tensor::new(vec![d, h, w, 3], pts.clone()).unwrap();
        let ctx = random_tensor(&[1, 1, h, w], &mut rng);
        let probs = random_tensor(&[1, d, h, w], &mut rng).map(|v| v + 1.0);
        let out = splat(&frustum, ctx.clone(), probs.clone(), &grid);
        let mut want = 0.0;
        for k in 0..d {
            for px in 0..h * w {
                let p = &pts[(k * h * w + px) * 3..];
                if (0.0..4.0).contains(&p[0]) && (-2.0..2.0).contains(&p[1]) {
                    want += ctx.data()[px] * probs.data()[k * h * w + px];
                }
            }
        }
        let got: f64 = out.data().iter().sum();
        prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0));
    }
}

#[test]
fn depth_encoder_ends_at_the_camera_width() {
    assert_eq!(geometric_widths(1, 64, 3), vec![1, 4, 16, 64]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = DepthEncoder::new(&mut scafusion::params::Init::new(&mut store, &mut rng), "enc", 1, 24).unwrap();
    assert_eq!(*enc.widths.last().unwrap(), 24);
    let ps = store.cast::<f64>();
    let run = || {
        let mut g = Graph::<f64>::new();
        let mut x = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        for b in &enc.blocks {
            x = b.forward(&mut g, &ps, x).unwrap();
        }
        g.value(x).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[1, 24, 3, 3]);
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert_eq!(a, run());
}

fn nt_xent(r: Tensor<f64>, d: Tensor<f64>, tau: f64) -> scafusion::Result<f64> {
    let mut g = Graph::<f64>::new();
    let rgb = g.constant(r);
    let depth = g.constant(d);
    let l = nt_xent_align_loss(&mut g, &AlignBatch { rgb, depth, tau })?;
    Ok(g.item(l))
}

fn eye(n: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
}

#[test]
fn nt_xent_closed_form_and_temperature() {
    let l = nt_xent(eye(2), eye(2), 1.0).unwrap();
    assert!((l - 0.31326).abs() < 1e-5, "{l}");
    assert!((l + (E / (E + 1.0)).ln()).abs() < 1e-12);

    let cold = nt_xent(eye(2), eye(2), 0.05).unwrap();
    assert!(cold < 1e-8, "{cold}");
    assert!((cold - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn shuffled_pairing_raises_the_loss() {
    let swapped = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let matched = nt_xent(eye(2), eye(2), 1.0).unwrap();
    let shuffled = nt_xent(eye(2), swapped, 1.0).unwrap();
    assert!(shuffled > matched);
    assert!((shuffled - (1.0 + E).ln()).abs() < 1e-12);
}

#[test]
fn zero_vector_is_reported() {
    let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    match nt_xent(eye(2), z, 1.0) {
        Err(Error::ZeroNorm { instance: 1, side }) => assert_eq!(side, "depth"),
        other => panic!("{other:?}"),
    }
    assert!(nt_xent(eye(2), eye(2), 0.0).is_err());
    assert!(nt_xent(Tensor::full(vec![1, 2], 1.0), Tensor::full(vec![1, 2], 1.0), 1.0).is_err());
}
