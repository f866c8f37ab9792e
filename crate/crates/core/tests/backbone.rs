use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scafusion::backbone::{freeze_partition, is_adapter_param, Backbone, BackboneConfig, FreezeMode, Mona};
use scafusion::layers::NORM_EPS;
use scafusion::params::Init;
use scafusion::tensor::gradcheck::{random_tensor, weighted_sum};
use scafusion::{Graph, ParamStore, Tensor};

fn mona(c: usize, seed: u64) -> (Mona, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Mona::new(&mut Init::new(&mut store, &mut rng), "backbone.m.mona_attn", c, 4).unwrap();
    (m, store.cast())
}

#[test]
fn zero_up_projection_is_the_identity() {
    let (m, ps) = mona(8, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = random_tensor(&[2, 8, 5, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xv.clone());
    let y = m.forward(&mut g, &ps, x).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn default_scales_give_plain_layer_norm() {
    let (m, ps) = mona(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = random_tensor(&[1, 8, 2, 2], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xv.clone());
    let xn = m.x_norm(&mut g, &ps, x).unwrap();
    let gamma = ps.tensor(&m.norm.gamma).unwrap().data().to_vec();
    let beta = ps.tensor(&m.norm.beta).unwrap().data().to_vec();
    for p in 0..4 {
        let col: Vec<f64> = (0..8).map(|c| xv.data()[c * 4 + p]).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for c in 0..8 {
            let want = (col[c] - mean) / (var + NORM_EPS).sqrt() * gamma[c] + beta[c];
            assert!((g.value(xn).data()[c * 4 + p] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_base_only_grads_adapters() {
    let cfg = BackboneConfig {
        mona: true,
        widths: [8, 16, 32],
        head_dim: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bb = Backbone::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
    freeze_partition(&mut store, FreezeMode::AdapterOnly).unwrap();
    let mut ps = store.cast::<f64>();
    for p in ps.iter_mut().filter(|p| p.trainable) {
        p.tensor = random_tensor(p.tensor.shape(), &mut rng).map(|v| 0.5 * v);
    }
    let mut g = Graph::<f64>::new();
    let img = g.constant(random_tensor(&[1, 3, 32, 32], &mut rng));
    let outs = bb.forward(&mut g, &ps, img).unwrap();
    let mut loss = weighted_sum(&mut g, outs[0], 1).unwrap();
    for (k, &o) in outs[1..].iter().enumerate() {
        let l = weighted_sum(&mut g, o, 2 + k as u64).unwrap();
        loss = g.add(loss, l).unwrap();
    }
    let grads = g.backward(loss).unwrap().by_param(&g);
    assert!(!grads.is_empty());
    for (name, t) in &grads {
        assert!(is_adapter_param(name), "{name} got a gradient");
        assert!(t.data().iter().all(|v| v.is_finite()));
    }
    let moved = grads.values().filter(|t| t.data().iter().any(|&v| v != 0.0)).count();
    assert!(moved * 2 > grads.len(), "{moved} of {}", grads.len());
}

fn backbone(mona: bool) -> (Backbone, ParamStore<f32>) {
    let cfg = BackboneConfig {
        mona,
        widths: [32, 64, 128],
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (
        Backbone::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap(),
        store,
    )
}

#[test]
fn stage_shapes_follow_the_strides() {
    let (bb, store) = backbone(true);
    let ps = store.cast::<f64>();
    let run = |img: Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(img);
        let outs = bb.forward(&mut g, &ps, x).unwrap();
        outs.map(|v| g.value(v).clone())
    };
    let zero = run(Tensor::zeros(vec![1, 3, 64, 64]));
    let shapes: Vec<&[usize]> = zero.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[1, 32, 16, 16][..], &[1, 64, 8, 8], &[1, 128, 4, 4]]);
    assert!(zero.iter().all(|t| t.data().iter().all(|v| v.is_finite())));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_tensor(&[1, 3, 64, 64], &mut rng);
    assert_eq!(run(img.clone()), run(img));

    let mut g = Graph::<f64>::new();
    let bad = g.constant(Tensor::zeros(vec![1, 3, 40, 64]));
    assert!(bb.forward(&mut g, &ps, bad).is_err());
}

#[test]
fn partition_is_exact() {
    let (_, mut store) = backbone(true);
    let all: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let part = freeze_partition(&mut store, FreezeMode::AdapterOnly).unwrap();
    assert!(part.frozen.iter().all(|n| !part.trainable.contains(n)));
    let mut union: Vec<String> = part.frozen.iter().chain(&part.trainable).cloned().collect();
    union.sort();
    let mut sorted = all.clone();
    sorted.sort();
    assert_eq!(union, sorted);
    assert!(part.trainable.iter().all(|n| is_adapter_param(n)));
    let adapter: usize = store.count_where(|p| is_adapter_param(&p.name));
    assert_eq!(part.adapter_count, adapter);
    assert!((part.tunable_fraction - adapter as f64 / store.total_count() as f64).abs() < 1e-15);

    let full = freeze_partition(&mut store, FreezeMode::Full).unwrap();
    assert_eq!(full.tunable_fraction, 1.0);
    assert!(full.frozen.is_empty());
}

#[test]
fn default_widths_tune_under_a_fifth() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = BackboneConfig {
        mona: true,
        ..Default::default()
    };
    Backbone::new(&mut Init::new(&mut store, &mut rng), &cfg).unwrap();
    let f = freeze_partition(&mut store, FreezeMode::AdapterOnly)
        .unwrap()
        .tunable_fraction;
    assert!(f < 0.20, "{f}");
}

#[test]
fn freeze_mode_parsing_and_empty_store() {
    assert_eq!("full".parse::<FreezeMode>().unwrap(), FreezeMode::Full);
    assert_eq!("adapter_only".parse::<FreezeMode>().unwrap(), FreezeMode::AdapterOnly);
    let err = "adapters".parse::<FreezeMode>().unwrap_err().to_string();
    assert!(err.contains("adapters"), "{err}");
    assert!(freeze_partition(&mut ParamStore::<f32>::new(), FreezeMode::Full).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        BackboneConfig {
            blocks_per_stage: 3,
            ..Default::default()
        },
        BackboneConfig {
            widths: [16, 24, 64],
            ..Default::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}
