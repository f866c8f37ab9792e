//! Procedural lunar scenes: analytic terrain, convex meteors and cuboid
//! platforms, ray-cast LiDAR and camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{forward_camera_rotation, BEVGridSpec, Box3D, CameraCalib};
use crate::lidar::PointCloud;

pub const CLASS_NAMES: [&str; 2] = ["Meteor", "Platform"];
pub const METEOR: usize = 0;
pub const PLATFORM: usize = 1;

/// Hit identity of rays that escape.
pub const HIT_NONE: i32 = -1;
pub const HIT_TERRAIN: i32 = 0;

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarRig {
    pub rings: usize,
    pub elevation_deg: [f64; 2],
    pub azimuth_step_deg: f64,
    pub mount_height: f64,
    pub max_range: f64,
    pub intensity_noise: f64,
}

impl Default for LidarRig {
    fn default() -> Self {
        Self {
            rings: 32,
            elevation_deg: [-24.0, 4.0],
            azimuth_step_deg: 0.5,
            mount_height: 1.8,
            max_range: 40.0,
            intensity_noise: 0.05,
        }
    }
}

impl LidarRig {
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.elevation_deg;
        if self.rings == 1 {
            return vec![lo.to_radians()];
        }
        (0..self.rings)
            .map(|k| (lo + (hi - lo) * k as f64 / (self.rings - 1) as f64).to_radians())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub mount_height: f64,
    pub pitch_deg: f64,
    pub light_elevation_deg: f64,
    pub light_azimuth_deg: f64,
    pub ambient: f64,
    pub max_distance: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 192,
            focal: 160.0,
            mount_height: 1.5,
            pitch_deg: 10.0,
            light_elevation_deg: 35.0,
            light_azimuth_deg: 30.0,
            ambient: 0.05,
            max_distance: 60.0,
        }
    }
}

impl CameraRig {
    /// The full-resolution preset of the physical rig.
    pub fn full_resolution() -> Self {
        Self {
            width: 1900,
            height: 1200,
            focal: 950.0,
            ..Self::default()
        }
    }

    pub fn calib(&self) -> CameraCalib {
        CameraCalib {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
            rotation: forward_camera_rotation(self.pitch_deg.to_radians()),
            translation: [0.0, 0.0, self.mount_height],
        }
    }

    pub fn light_dir(&self) -> [f64; 3] {
        let (el, az) = (
            self.light_elevation_deg.to_radians(),
            self.light_azimuth_deg.to_radians(),
        );
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Half-width of the square over which terrain features are placed (m).
    pub terrain_extent: f64,
    pub bump_count: [usize; 2],
    pub bump_amplitude: [f64; 2],
    pub bump_sigma: [f64; 2],
    pub crater_count: [usize; 2],
    pub crater_radius: [f64; 2],
    pub crater_depth: [f64; 2],
    pub meteor_count: [usize; 2],
    /// Bounding-box extent range of meteors (m), every axis.
    pub meteor_size: [f64; 2],
    pub platform_count: [usize; 2],
    pub platform_length: [f64; 2],
    pub platform_height: [f64; 2],
    /// Objects are placed inside this grid, at least `min_distance` from the sensor.
    pub placement_grid: BEVGridSpec,
    pub placement_margin: f64,
    pub min_distance: f64,
    /// Minimum clearance between object footprint circles (m).
    pub object_clearance: f64,
    pub lidar: LidarRig,
    pub camera: CameraRig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            terrain_extent: 40.0,
            bump_count: [4, 8],
            bump_amplitude: [-0.3, 0.4],
            bump_sigma: [2.0, 6.0],
            crater_count: [2, 5],
            crater_radius: [1.5, 4.0],
            crater_depth: [0.2, 0.6],
            meteor_count: [3, 6],
            meteor_size: [0.4, 0.9],
            platform_count: [1, 2],
            platform_length: [1.6, 3.0],
            platform_height: [1.0, 1.6],
            placement_grid: BEVGridSpec::default(),
            placement_margin: 0.8,
            min_distance: 4.0,
            object_clearance: 0.6,
            lidar: LidarRig::default(),
            camera: CameraRig::default(),
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(r: &[T; 2], field: &str) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!("scene.{field}: range {r:?} is decreasing")));
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_range(&self.bump_count, "bump_count")?;
        check_range(&self.bump_amplitude, "bump_amplitude")?;
        check_range(&self.bump_sigma, "bump_sigma")?;
        check_range(&self.crater_count, "crater_count")?;
        check_range(&self.crater_radius, "crater_radius")?;
        check_range(&self.crater_depth, "crater_depth")?;
        check_range(&self.meteor_count, "meteor_count")?;
        check_range(&self.meteor_size, "meteor_size")?;
        check_range(&self.platform_count, "platform_count")?;
        check_range(&self.platform_length, "platform_length")?;
        check_range(&self.platform_height, "platform_height")?;
        if self.bump_sigma[0] <= 0.0 || self.crater_radius[0] <= 0.0 || self.meteor_size[0] <= 0.0 {
            return Err(Error::Config("scene sizes must be positive".into()));
        }
        let platform_min = self.platform_length[0].min(self.platform_height[0]);
        if self.meteor_size[1] >= platform_min {
            return Err(Error::Config(format!(
                "scene.meteor_size max {} must be below the smallest platform extent {platform_min}",
                self.meteor_size[1]
            )));
        }
        if self.lidar.rings == 0 || self.lidar.elevation_deg[0] >= self.lidar.elevation_deg[1] && self.lidar.rings > 1 {
            return Err(Error::Config(
                "scene.lidar: need >= 1 ring with increasing elevations".into(),
            ));
        }
        if !(self.lidar.azimuth_step_deg > 0.0) {
            return Err(Error::Config("scene.lidar.azimuth_step_deg must be positive".into()));
        }
        self.placement_grid.validate()?;
        self.camera.calib().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Gauss {
    x: f64,
    y: f64,
    amp: f64,
    sigma: f64,
    /// Ring radius; 0 for a plain bump.
    ring: f64,
}

impl Gauss {
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (dx, dy) = (x - self.x, y - self.y);
        let r = dx.hypot(dy);
        let s2 = self.sigma * self.sigma;
        let e = self.amp * (-(r - self.ring).powi(2) / (2.0 * s2)).exp();
        let dr = -e * (r - self.ring) / s2;
        if r < 1e-12 {
            return (e, 0.0, 0.0);
        }
        (e, dr * dx / r, dr * dy / r)
    }

    fn lipschitz(&self) -> f64 {
        self.amp.abs() / self.sigma * (-0.5f64).exp()
    }
}

/// Smooth heightfield `h(x, y)` with `h(0, 0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    features: Vec<Gauss>,
    offset: f64,
    lipschitz: f64,
    max_height: f64,
}

impl Terrain {
    pub fn flat() -> Self {
        Self {
            features: Vec::new(),
            offset: 0.0,
            lipschitz: 0.0,
            max_height: 0.0,
        }
    }

    fn from_features(features: Vec<Gauss>) -> Self {
        let mut t = Self {
            lipschitz: features.iter().map(Gauss::lipschitz).sum(),
            max_height: 0.0,
            features,
            offset: 0.0,
        };
        t.offset = t.raw(0.0, 0.0).0;
        t.max_height = t.features.iter().map(|f| f.amp.max(0.0)).sum::<f64>() - t.offset;
        t
    }

    fn raw(&self, x: f64, y: f64) -> (f64, f64, f64) {
        self.features.iter().fold((0.0, 0.0, 0.0), |a, f| {
            let e = f.eval(x, y);
            (a.0 + e.0, a.1 + e.1, a.2 + e.2)
        })
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.raw(x, y).0 - self.offset
    }

    pub fn normal(&self, x: f64, y: f64) -> [f64; 3] {
        let (_, hx, hy) = self.raw(x, y);
        normalize([-hx, -hy, 1.0])
    }

    /// First ray parameter where the ray meets the surface, if within `t_max`.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3], t_max: f64) -> Option<f64> {
        let f = |t: f64| o[2] + t * d[2] - self.height(o[0] + t * d[0], o[1] + t * d[1]);
        let rate = d[2].abs() + self.lipschitz * d[0].hypot(d[1]);
        let mut t = 0.0;
        let mut ft = f(0.0);
        if ft <= 0.0 {
            return Some(0.0);
        }
        while t < t_max {
            if d[2] >= 0.0 && o[2] + t * d[2] > self.max_height {
                return None;
            }
            let step = if rate > 0.0 { (ft / rate).max(0.02) } else { 0.5 };
            let tn = (t + step).min(t_max);
            let fnew = f(tn);
            if fnew <= 0.0 {
                let (mut lo, mut hi) = (t, tn);
                for _ in 0..32 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            if tn >= t_max {
                return None;
            }
            t = tn;
            ft = fnew;
        }
        None
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Convex solid `{p : n_k . p <= d_k}` in the object's local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyhedron {
    pub planes: Vec<([f64; 3], f64)>,
}

impl Polyhedron {
    /// Entry parameter and outward normal of a local-frame ray.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut normal = [0.0; 3];
        for &(n, off) in &self.planes {
            let denom = dot(n, d);
            let dist = off - dot(n, o);
            if denom.abs() < 1e-15 {
                if dist < 0.0 {
                    return None;
                }
                continue;
            }
            let t = dist / denom;
            if denom < 0.0 {
                if t > t0 {
                    t0 = t;
                    normal = n;
                }
            } else if t < t1 {
                t1 = t;
            }
        }
        (t0 <= t1 && t0 > 1e-9).then(|| (t0, normalize(normal)))
    }

    fn vertices(&self) -> Vec<[f64; 3]> {
        let p = &self.planes;
        let mut out = Vec::new();
        for a in 0..p.len() {
            for b in a + 1..p.len() {
                for c in b + 1..p.len() {
                    if let Some(v) = solve3([p[a].0, p[b].0, p[c].0], [p[a].1, p[b].1, p[c].1]) {
                        if p.iter().all(|&(n, d)| dot(n, v) <= d + 1e-9) {
                            out.push(v);
                        }
                    }
                }
            }
        }
        out
    }
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for row in 0..3 {
            mk[row][k] = r[row];
        }
        *o = det(mk) / d;
    }
    Some(out)
}

fn icosahedron_normals() -> Vec<[f64; 3]> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let v = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let faces = [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    faces
        .iter()
        .map(|f| normalize([0, 1, 2].map(|k| v[f[0]][k] + v[f[1]][k] + v[f[2]][k])))
        .collect()
}

/// Ray/axis-aligned-box entry with the entry face normal.
fn slab(o: [f64; 3], d: [f64; 3], half: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut normal = [0.0; 3];
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let b = (half[k] - o[k]) / d[k];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t0 {
            t0 = near;
            normal = [0.0; 3];
            normal[k] = -d[k].signum();
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > 1e-9).then_some((t0, normal))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Yawed cuboid matching the object's box.
    Cuboid,
    Blob(Polyhedron),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub shape: Shape,
}

impl SceneObject {
    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.bbox.yaw.sin_cos();
        let d = [0, 1, 2].map(|k| p[k] - self.bbox.center[k]);
        [d[0] * c + d[1] * s, -d[0] * s + d[1] * c, d[2]]
    }

    fn dir_to_local(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.bbox.yaw.sin_cos();
        [v[0] * c + v[1] * s, -v[0] * s + v[1] * c, v[2]]
    }

    fn dir_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.bbox.yaw.sin_cos();
        [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
    }

    /// Ray parameter and world normal of the first hit.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        // bounding-sphere rejection
        let c = [0, 1, 2].map(|k| self.bbox.center[k] - o[k]);
        let r2 = self.bbox.size.iter().map(|s| s * s / 4.0).sum::<f64>();
        let tc = dot(c, d);
        if dot(c, c) - tc * tc > r2 || (tc < 0.0 && dot(c, c) > r2) {
            return None;
        }
        let lo = self.to_local(o);
        let ld = self.dir_to_local(d);
        let hit = match &self.shape {
            Shape::Cuboid => slab(lo, ld, self.bbox.size.map(|s| s / 2.0)),
            Shape::Blob(p) => p.intersect(lo, ld),
        };
        hit.map(|(t, n)| (t, self.dir_to_world(n)))
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let l = self.to_local(p);
        match &self.shape {
            Shape::Cuboid => self.bbox.contains(p, margin),
            Shape::Blob(poly) => poly
                .planes
                .iter()
                .all(|&(n, d)| dot(n, l) <= d + margin * (dot(n, n)).sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub terrain: Terrain,
    pub objects: Vec<SceneObject>,
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        Uniform::new(r[0], r[1]).sample(rng)
    }
}

fn count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn meteor_blob(rng: &mut ChaCha8Rng, size: [f64; 3]) -> Polyhedron {
    let unit: Vec<([f64; 3], f64)> = icosahedron_normals()
        .into_iter()
        .map(|n| {
            let j = normalize([0, 1, 2].map(|k| n[k] + uniform(rng, [-0.2, 0.2])));
            (j, uniform(rng, [0.75, 1.0]))
        })
        .collect();
    let verts = Polyhedron { planes: unit.clone() }.vertices();
    let lo = [0, 1, 2].map(|k| verts.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1, 2].map(|k| verts.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max));
    // map the unit blob's bounding box onto the sampled extents
    let scale = [0, 1, 2].map(|k| size[k] / (hi[k] - lo[k]));
    let mid = [0, 1, 2].map(|k| 0.5 * (hi[k] + lo[k]));
    let planes = unit
        .into_iter()
        .map(|(n, d)| {
            let ns = [0, 1, 2].map(|k| n[k] / scale[k]);
            (ns, d - dot(n, mid))
        })
        .collect();
    Polyhedron { planes }
}

fn footprint_floor(terrain: &Terrain, b: &Box3D) -> f64 {
    let mut lo = terrain.height(b.center[0], b.center[1]);
    for c in b.corners_2d() {
        lo = lo.min(terrain.height(c[0], c[1]));
    }
    lo
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.terrain_extent;
    let mut features = Vec::new();
    for _ in 0..count(&mut rng, spec.bump_count) {
        features.push(Gauss {
            x: uniform(&mut rng, [-ext, ext]),
            y: uniform(&mut rng, [-ext, ext]),
            amp: uniform(&mut rng, spec.bump_amplitude),
            sigma: uniform(&mut rng, spec.bump_sigma),
            ring: 0.0,
        });
    }
    for _ in 0..count(&mut rng, spec.crater_count) {
        let (x, y) = (uniform(&mut rng, [-ext, ext]), uniform(&mut rng, [-ext, ext]));
        let r = uniform(&mut rng, spec.crater_radius);
        let depth = uniform(&mut rng, spec.crater_depth);
        features.push(Gauss {
            x,
            y,
            amp: -depth,
            sigma: 0.5 * r,
            ring: 0.0,
        });
        features.push(Gauss {
            x,
            y,
            amp: 0.35 * depth,
            sigma: 0.25 * r,
            ring: r,
        });
    }
    let terrain = Terrain::from_features(features);

    let g = &spec.placement_grid;
    let m = spec.placement_margin;
    let xr = [g.x_range[0] + m, g.x_range[1] - m];
    let yr = [g.y_range[0] + m, g.y_range[1] - m];
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut circles: Vec<(f64, f64, f64)> = Vec::new();
    let n_platforms = count(&mut rng, spec.platform_count);
    let n_meteors = count(&mut rng, spec.meteor_count);
    let plan = std::iter::repeat(PLATFORM)
        .take(n_platforms)
        .chain(std::iter::repeat(METEOR).take(n_meteors));
    for (k, class) in plan.enumerate() {
        let (size, shape) = if class == PLATFORM {
            let l = uniform(&mut rng, spec.platform_length);
            let w = uniform(&mut rng, spec.platform_length);
            let h = uniform(&mut rng, spec.platform_height);
            ([l.max(w), l.min(w), h], Shape::Cuboid)
        } else {
            let size = [0; 3].map(|_| uniform(&mut rng, spec.meteor_size));
            let blob = meteor_blob(&mut rng, size);
            (size, Shape::Blob(blob))
        };
        let yaw = uniform(&mut rng, [-std::f64::consts::PI, std::f64::consts::PI]);
        let radius = 0.5 * size[0].hypot(size[1]);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = (uniform(&mut rng, xr), uniform(&mut rng, yr));
            if x.hypot(y) < spec.min_distance {
                continue;
            }
            let clear = circles
                .iter()
                .all(|&(cx, cy, cr)| (x - cx).hypot(y - cy) >= cr + radius + spec.object_clearance);
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(Error::Placement {
                what: format!("{} #{k}", CLASS_NAMES[class]),
                attempts: PLACEMENT_ATTEMPTS,
                field: if class == PLATFORM {
                    "platform_count"
                } else {
                    "meteor_count"
                },
            });
        };
        circles.push((x, y, radius));
        let mut bbox = Box3D {
            center: [x, y, 0.0],
            size,
            yaw,
            class_id: class,
            score: None,
        };
        bbox.center[2] = footprint_floor(&terrain, &bbox) + size[2] / 2.0;
        objects.push(SceneObject { bbox, shape });
    }
    Ok(Scene {
        spec: spec.clone(),
        terrain,
        objects,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
    /// `HIT_TERRAIN` or `1 + object index`.
    pub id: i32,
}

impl Scene {
    pub fn cast(&self, o: [f64; 3], d: [f64; 3], t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (k, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = obj.intersect(o, d) {
                if t <= t_max && best.map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal: n,
                        id: k as i32 + 1,
                    });
                }
            }
        }
        let limit = best.map_or(t_max, |b| b.t);
        if let Some(t) = self.terrain.intersect(o, d, limit) {
            if t < limit {
                let p = [0, 1, 2].map(|k| o[k] + t * d[k]);
                return Some(Hit {
                    t,
                    normal: self.terrain.normal(p[0], p[1]),
                    id: HIT_TERRAIN,
                });
            }
        }
        best
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox.clone()).collect()
    }

    /// Whether `p` lies on scene geometry within `tol` meters.
    pub fn on_surface(&self, p: [f64; 3], tol: f64) -> bool {
        if (p[2] - self.terrain.height(p[0], p[1])).abs() <= tol {
            return true;
        }
        self.objects.iter().any(|o| o.contains(p, tol) && !o.contains(p, -tol))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub cloud: PointCloud,
    pub hits: Vec<i32>,
}

pub fn render_lidar(scene: &Scene, rig: &LidarRig, seed: u64) -> LidarScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new_inclusive(-rig.intensity_noise, rig.intensity_noise);
    let origin = [0.0, 0.0, rig.mount_height];
    let steps = (360.0 / rig.azimuth_step_deg).round() as usize;
    let mut cloud = PointCloud::default();
    let mut hits = Vec::new();
    for el in rig.elevations() {
        for a in 0..steps {
            let az = (a as f64 * rig.azimuth_step_deg).to_radians();
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = scene.cast(origin, d, rig.max_range) else {
                continue;
            };
            let base = match hit.id {
                HIT_TERRAIN => 0.2,
                id => match scene.objects[(id - 1) as usize].bbox.class_id {
                    METEOR => 0.5,
                    _ => 0.8,
                },
            };
            let intensity = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let p = [0, 1, 2].map(|k| origin[k] + hit.t * d[k]);
            cloud
                .points
                .push([p[0] as f32, p[1] as f32, p[2] as f32, intensity as f32]);
            hits.push(hit.id);
        }
    }
    LidarScan { cloud, hits }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Optical-axis depth (m); 0 where no surface was hit.
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRender {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub hits: Vec<i32>,
}

pub const ALBEDO: [[f64; 3]; 3] = [[0.55, 0.55, 0.52], [0.38, 0.30, 0.24], [0.85, 0.80, 0.35]];

pub fn render_camera(scene: &Scene, calib: &CameraCalib, rig: &CameraRig) -> CameraRender {
    let (w, h) = (calib.width, calib.height);
    let light = rig.light_dir();
    let axis = calib.axis();
    let mut image = vec![0u8; w * h * 3];
    let mut depth = vec![0.0f32; w * h];
    let mut hits = vec![HIT_NONE; w * h];
    for v in 0..h {
        for u in 0..w {
            let d = calib.ray(u as f64, v as f64);
            let Some(hit) = scene.cast(calib.translation, d, rig.max_distance) else {
                continue;
            };
            let idx = v * w + u;
            depth[idx] = (hit.t * dot(d, axis)) as f32;
            hits[idx] = hit.id;
            let albedo = match hit.id {
                HIT_TERRAIN => ALBEDO[0],
                id => ALBEDO[1 + scene.objects[(id - 1) as usize].bbox.class_id],
            };
            let shade = rig.ambient + (1.0 - rig.ambient) * dot(hit.normal, light).max(0.0);
            for c in 0..3 {
                image[idx * 3 + c] = (albedo[c] * shade * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    CameraRender {
        image: RgbImage {
            width: w,
            height: h,
            data: image,
        },
        depth: DepthMap {
            width: w,
            height: h,
            data: depth,
        },
        hits,
    }
}
