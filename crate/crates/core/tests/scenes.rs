use scafusion::dataset::{self, make_sample, GenConfig};
use scafusion::geometry::{Box3D, CameraCalib};
use scafusion::scene::{
    generate_scene, render_camera, render_lidar, CameraRig, LidarRig, Scene, SceneObject, SceneSpec, Shape, Terrain,
    HIT_NONE, HIT_TERRAIN, METEOR, PLATFORM,
};

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        ..Default::default()
    }
}

fn flat_scene(objects: Vec<SceneObject>) -> Scene {
    Scene {
        spec: SceneSpec::default(),
        terrain: Terrain::flat(),
        objects,
    }
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(&small_spec(3)).unwrap();
    let b = generate_scene(&small_spec(3)).unwrap();
    assert_eq!(a.boxes(), b.boxes());
    assert_eq!(a, b);
    let c = generate_scene(&small_spec(4)).unwrap();
    assert_ne!(a.boxes(), c.boxes());
}

#[test]
fn meteors_smaller_than_platforms() {
    for seed in 0..20 {
        let s = generate_scene(&small_spec(seed)).unwrap();
        let boxes = s.boxes();
        for m in boxes.iter().filter(|b| b.class_id == METEOR) {
            for p in boxes.iter().filter(|b| b.class_id == PLATFORM) {
                for k in 0..3 {
                    assert!(m.size[k] < p.size[k], "{m:?} vs {p:?}");
                }
            }
        }
    }
}

#[test]
fn zero_counts_give_terrain_only() {
    let spec = SceneSpec {
        meteor_count: [0, 0],
        platform_count: [0, 0],
        ..small_spec(1)
    };
    let s = generate_scene(&spec).unwrap();
    assert!(s.objects.is_empty());
    assert_eq!(s.terrain.height(0.0, 0.0), 0.0);
}

#[test]
fn crowded_spec_names_the_field() {
    let spec = SceneSpec {
        meteor_count: [400, 400],
        ..small_spec(1)
    };
    let err = generate_scene(&spec).unwrap_err().to_string();
    assert!(err.contains("meteor_count"), "{err}");
}

#[test]
fn flat_ground_ring_distance() {
    let scene = flat_scene(vec![]);
    let rig = LidarRig {
        rings: 1,
        elevation_deg: [-10.0, -10.0],
        azimuth_step_deg: 10.0,
        intensity_noise: 0.0,
        ..Default::default()
    };
    let scan = render_lidar(&scene, &rig, 0);
    assert_eq!(scan.cloud.len(), 36);
    let want = rig.mount_height / 10f64.to_radians().tan();
    for p in &scan.cloud.points {
        let r = (p[0] as f64).hypot(p[1] as f64);
        assert!((r - want).abs() < 1e-4, "{r} vs {want}");
        assert!((p[2] as f64).abs() < 1e-4);
        assert!((p[3] - 0.2).abs() < 1e-6);
    }
}

#[test]
fn object_occludes_ground_and_far_rays_vanish() {
    let wall = SceneObject {
        bbox: Box3D {
            center: [5.0, 0.0, 1.0],
            size: [1.0, 4.0, 2.0],
            yaw: 0.0,
            class_id: PLATFORM,
            score: None,
        },
        shape: Shape::Cuboid,
    };
    let scene = flat_scene(vec![wall]);
    let rig = LidarRig {
        rings: 2,
        elevation_deg: [-10.0, 2.0],
        azimuth_step_deg: 90.0,
        intensity_noise: 0.0,
        ..Default::default()
    };
    let scan = render_lidar(&scene, &rig, 0);
    // forward rays of both rings stop at the wall face; the upward ring
    // escapes in the other three directions
    let forward: Vec<_> = scan
        .cloud
        .points
        .iter()
        .zip(&scan.hits)
        .filter(|(p, _)| p[0] > 1.0)
        .collect();
    assert_eq!(forward.len(), 2);
    for (p, &h) in forward {
        assert_eq!(h, 1);
        assert!((p[0] - 4.5).abs() < 1e-4);
    }
    assert_eq!(scan.cloud.len(), 5);
}

fn cam() -> (CameraRig, CameraCalib) {
    let rig = CameraRig::default();
    let calib = rig.calib();
    (rig, calib)
}

#[test]
fn marker_projects_to_pinhole_pixel() {
    let (rig, calib) = cam();
    let p = calib.unproject(201.0, 80.0, 12.0);
    let marker = SceneObject {
        bbox: Box3D {
            center: p,
            size: [0.02, 0.02, 0.02],
            yaw: 0.0,
            class_id: METEOR,
            score: None,
        },
        shape: Shape::Cuboid,
    };
    let scene = flat_scene(vec![marker]);
    let (u, v, _) = calib.project(p).unwrap();
    let r = render_camera(&scene, &calib, &rig);
    assert!((u - 201.0).abs() < 1e-9 && (v - 80.0).abs() < 1e-9);
    assert_eq!(r.hits[80 * calib.width + 201], 1);
    let marked = r.hits.iter().filter(|&&h| h == 1).count();
    assert_eq!(marked, 1);
}

#[test]
fn depth_positive_exactly_where_hit() {
    let (rig, calib) = cam();
    let scene = generate_scene(&small_spec(5)).unwrap();
    let r = render_camera(&scene, &calib, &rig);
    for (d, h) in r.depth.data.iter().zip(&r.hits) {
        assert!(*d >= 0.0);
        assert_eq!(*d > 0.0, *h != HIT_NONE);
    }
    assert!(r.hits.iter().any(|&h| h == HIT_NONE));
    assert!(r.hits.iter().any(|&h| h == HIT_TERRAIN));
}

#[test]
fn lower_light_is_darker() {
    let (rig, calib) = cam();
    let scene = generate_scene(&small_spec(6)).unwrap();
    let high = render_camera(&scene, &calib, &rig).image.mean();
    let low_rig = CameraRig {
        light_elevation_deg: 10.0,
        ..rig
    };
    let low = render_camera(&scene, &calib, &low_rig).image.mean();
    assert!(low < high, "{low} vs {high}");
}

#[test]
fn physical_consistency() {
    let spec = small_spec(9);
    let scene = generate_scene(&spec).unwrap();
    let scan = render_lidar(&scene, &spec.lidar, 1);
    for p in &scan.cloud.points {
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        assert!(scene.on_surface(q, 1e-3 + 1e-5 * q[0].hypot(q[1])), "{q:?}");
    }
    let (rig, calib) = cam();
    let r = render_camera(&scene, &calib, &rig);
    let axis = calib.axis();
    for v in (0..calib.height).step_by(7) {
        for u in (0..calib.width).step_by(7) {
            let d = r.depth.data[v * calib.width + u] as f64;
            if d == 0.0 {
                continue;
            }
            let ray = calib.ray(u as f64, v as f64);
            let t = d / (ray[0] * axis[0] + ray[1] * axis[1] + ray[2] * axis[2]);
            let p = [0, 1, 2].map(|k| calib.translation[k] + t * ray[k]);
            assert!(scene.on_surface(p, 1e-3), "pixel ({u}, {v}) -> {p:?}");
        }
    }
}

#[test]
fn lidar_hits_agree_with_boxes() {
    for seed in 0..4 {
        let spec = small_spec(seed);
        let scene = generate_scene(&spec).unwrap();
        let scan = render_lidar(&scene, &spec.lidar, 0);
        for (p, &h) in scan.cloud.points.iter().zip(&scan.hits) {
            let q = [p[0] as f64, p[1] as f64, p[2] as f64];
            if h > 0 {
                assert!(scene.objects[(h - 1) as usize].bbox.contains(q, 1e-3));
            }
            for (k, o) in scene.objects.iter().enumerate() {
                // terrain may poke into the embedded bottom of a box
                if o.bbox.contains(q, -1e-3) && h != HIT_TERRAIN {
                    assert_eq!(h, k as i32 + 1);
                }
            }
        }
    }
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        num_scenes: 3,
        val_scenes: 1,
        scene: small_spec(11),
    };
    let samples = dataset::generate_dataset(dir.path(), &cfg).unwrap();
    let meta = dataset::read_meta(dir.path()).unwrap();
    assert_eq!(meta.classes, vec!["Meteor", "Platform"]);
    let splits = dataset::read_splits(dir.path()).unwrap();
    assert_eq!(splits.train.len(), 2);
    assert_eq!(splits.val.len(), 1);
    for s in &samples {
        let back = dataset::read_sample(dir.path(), &s.token).unwrap();
        assert_eq!(&back, s);
        let bits = |pc: &scafusion::lidar::PointCloud| -> Vec<u32> {
            pc.points.iter().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back.points), bits(&s.points));
    }
    let again = make_sample(&cfg.scene, 1).unwrap();
    assert_eq!(again, samples[1]);

    let pts = dir.path().join("samples").join(&samples[0].token).join("points.bin");
    let bytes = std::fs::read(&pts).unwrap();
    std::fs::write(&pts, &bytes[..bytes.len() - 3]).unwrap();
    let err = dataset::read_sample(dir.path(), &samples[0].token)
        .unwrap_err()
        .to_string();
    assert!(err.contains("points.bin"), "{err}");

    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&pts, &bad).unwrap();
    let err = dataset::read_sample(dir.path(), &samples[0].token)
        .unwrap_err()
        .to_string();
    assert!(err.contains("version"), "{err}");
}
