//! Scene samples and their on-disk layout.
//!
//! ```text
//! root/meta.json
//! root/splits.json
//! root/samples/<token>/{points.bin, hits.bin, cam_front.ppm, depth.bin, anns.json}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraCalib};
use crate::lidar::PointCloud;
use crate::scene::{
    derive_seed, generate_scene, render_camera, render_lidar, DepthMap, RgbImage, SceneSpec, CLASS_NAMES,
};

pub const FORMAT_VERSION: u32 = 1;
const POINTS_MAGIC: &[u8; 4] = b"SCFP";
const DEPTH_MAGIC: &[u8; 4] = b"SCFD";
const HITS_MAGIC: &[u8; 4] = b"SCFH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_name: String,
    pub num_lidar_pts: usize,
    /// Hit identity carried by this object's LiDAR points and pixels.
    pub hit_id: i32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub translation: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub token: String,
    pub points: PointCloud,
    /// Per-point hit identity (0 terrain, k + 1 object k).
    pub point_hits: Vec<i32>,
    pub image: RgbImage,
    pub depth: DepthMap,
    pub calib: CameraCalib,
    pub ego_pose: EgoPose,
    pub annotations: Vec<Annotation>,
}

impl SceneSample {
    /// Ground truth that received at least one LiDAR return.
    pub fn visible_boxes(&self) -> Vec<Box3D> {
        self.annotations
            .iter()
            .filter(|a| a.num_lidar_pts > 0)
            .map(|a| a.bbox.clone())
            .collect()
    }
}

/// Generates sample `index` of a dataset; the scene seed is derived from
/// `spec.seed` and `index`.
pub fn make_sample(spec: &SceneSpec, index: usize) -> Result<SceneSample> {
    let seed = derive_seed(spec.seed, index as u64);
    let scene = generate_scene(&SceneSpec { seed, ..spec.clone() })?;
    let scan = render_lidar(&scene, &spec.lidar, derive_seed(seed, 1));
    let calib = spec.camera.calib();
    let cam = render_camera(&scene, &calib, &spec.camera);
    let annotations = scene
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let hit_id = k as i32 + 1;
            Annotation {
                bbox: o.bbox.clone(),
                class_name: CLASS_NAMES[o.bbox.class_id].to_string(),
                num_lidar_pts: scan.hits.iter().filter(|&&h| h == hit_id).count(),
                hit_id,
            }
        })
        .collect();
    Ok(SceneSample {
        token: format!("sample{index:04}"),
        points: scan.cloud,
        point_hits: scan.hits,
        image: cam.image,
        depth: cam.depth,
        calib,
        ego_pose: EgoPose::default(),
        annotations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u32,
    pub classes: Vec<String>,
    pub units: Units,
    pub scene: SceneSpec,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub angle: String,
    pub depth: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            length: "meters".into(),
            angle: "radians".into(),
            depth: "meters along the optical axis, 0 = no hit".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train or val)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnsFile {
    token: String,
    calib: CameraCalib,
    ego_pose: EgoPose,
    annotations: Vec<Annotation>,
}

/// Writes `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn header(magic: &[u8; 4], a: u64, b: Option<(u32, u32)>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    match b {
        Some((h, w)) => {
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&w.to_le_bytes());
        }
        None => out.extend_from_slice(&a.to_le_bytes()),
    }
    out
}

pub fn encode_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = header(POINTS_MAGIC, pc.len() as u64, None);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn check_header(&self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes.len() < 16 {
            return Err(Error::format(
                self.path,
                "header",
                format!("{} bytes, need 16", self.bytes.len()),
            ));
        }
        if &self.bytes[..4] != magic {
            return Err(Error::format(
                self.path,
                "magic",
                format!("expected {:?}", std::str::from_utf8(magic)),
            ));
        }
        let version = u32::from_le_bytes(self.bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                "version",
                format!("found {version}, supported {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    fn u64_at(&self, at: usize) -> u64 {
        u64::from_le_bytes(self.bytes[at..at + 8].try_into().expect("8 bytes"))
    }

    fn u32_at(&self, at: usize) -> u32 {
        u32::from_le_bytes(self.bytes[at..at + 4].try_into().expect("4 bytes"))
    }

    fn payload(&self, field: &str, count: usize) -> Result<&[u8]> {
        let need = 16 + count * 4;
        if self.bytes.len() != need {
            return Err(Error::format(
                self.path,
                field,
                format!("expected {need} bytes, found {}", self.bytes.len()),
            ));
        }
        Ok(&self.bytes[16..])
    }
}

pub fn decode_points(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let r = Reader { path, bytes };
    r.check_header(POINTS_MAGIC)?;
    let n = r.u64_at(8) as usize;
    let data = r.payload(
        "points",
        n.checked_mul(4).ok_or_else(|| Error::format(path, "N", "overflow"))?,
    )?;
    let vals: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "points", "non-finite coordinate"));
    }
    Ok(PointCloud {
        points: vals.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
    })
}

pub fn encode_hits(hits: &[i32]) -> Vec<u8> {
    let mut out = header(HITS_MAGIC, hits.len() as u64, None);
    for h in hits {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out
}

pub fn decode_hits(path: &Path, bytes: &[u8]) -> Result<Vec<i32>> {
    let r = Reader { path, bytes };
    r.check_header(HITS_MAGIC)?;
    let n = r.u64_at(8) as usize;
    let data = r.payload("hits", n)?;
    Ok(data
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = header(DEPTH_MAGIC, 0, Some((d.height as u32, d.width as u32)));
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(path: &Path, bytes: &[u8]) -> Result<DepthMap> {
    let r = Reader { path, bytes };
    r.check_header(DEPTH_MAGIC)?;
    let (h, w) = (r.u32_at(8) as usize, r.u32_at(12) as usize);
    let data = r.payload("depth", h * w)?;
    Ok(DepthMap {
        width: w,
        height: h,
        data: data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "header", "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P6" {
        return Err(Error::format(
            path,
            "magic",
            format!("expected P6, found {}", fields[0]),
        ));
    }
    let num = |k: usize, name: &str| -> Result<usize> {
        fields[k]
            .parse()
            .map_err(|_| Error::format(path, name, format!("not a number: {}", fields[k])))
    };
    let (w, h, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval != 255 {
        return Err(Error::format(
            path,
            "maxval",
            format!("only 255 supported, found {maxval}"),
        ));
    }
    let data = bytes.get(i..).unwrap_or(&[]);
    if data.len() != w * h * 3 {
        return Err(Error::format(
            path,
            "pixels",
            format!("expected {} bytes, found {}", w * h * 3, data.len()),
        ));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: data.to_vec(),
    })
}

fn sample_dir(root: &Path, token: &str) -> PathBuf {
    root.join("samples").join(token)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("plain data serializes");
    s.push(b'\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))
}

pub fn write_sample(root: &Path, s: &SceneSample) -> Result<()> {
    let dir = sample_dir(root, &s.token);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join("points.bin"), &encode_points(&s.points))?;
    write_atomic(&dir.join("hits.bin"), &encode_hits(&s.point_hits))?;
    write_atomic(&dir.join("depth.bin"), &encode_depth(&s.depth))?;
    write_atomic(&dir.join("cam_front.ppm"), &encode_ppm(&s.image))?;
    let anns = AnnsFile {
        token: s.token.clone(),
        calib: s.calib.clone(),
        ego_pose: s.ego_pose.clone(),
        annotations: s.annotations.clone(),
    };
    write_atomic(&dir.join("anns.json"), &to_json(&anns))
}

pub fn read_sample(root: &Path, token: &str) -> Result<SceneSample> {
    let dir = sample_dir(root, token);
    let p = dir.join("points.bin");
    let points = decode_points(&p, &read(&p)?)?;
    let p = dir.join("hits.bin");
    let point_hits = decode_hits(&p, &read(&p)?)?;
    if point_hits.len() != points.len() {
        return Err(Error::format(
            &p,
            "N",
            format!("{} hit ids for {} points", point_hits.len(), points.len()),
        ));
    }
    let p = dir.join("depth.bin");
    let depth = decode_depth(&p, &read(&p)?)?;
    let p = dir.join("cam_front.ppm");
    let image = decode_ppm(&p, &read(&p)?)?;
    if (image.width, image.height) != (depth.width, depth.height) {
        return Err(Error::format(&p, "size", "image and depth map sizes differ"));
    }
    let p = dir.join("anns.json");
    let anns: AnnsFile = from_json(&p)?;
    if anns.token != token {
        return Err(Error::format(
            &p,
            "token",
            format!("expected {token}, found {}", anns.token),
        ));
    }
    Ok(SceneSample {
        token: token.to_string(),
        points,
        point_hits,
        image,
        depth,
        calib: anns.calib,
        ego_pose: anns.ego_pose,
        annotations: anns.annotations,
    })
}

pub fn write_dataset(root: &Path, spec: &SceneSpec, samples: &[SceneSample], splits: &Splits) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in samples {
        write_sample(root, s)?;
    }
    let meta = Meta {
        version: FORMAT_VERSION,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        units: Units::default(),
        scene: spec.clone(),
        num_samples: samples.len(),
    };
    write_atomic(&root.join("splits.json"), &to_json(splits))?;
    write_atomic(&root.join("meta.json"), &to_json(&meta))
}

pub fn read_meta(root: &Path) -> Result<Meta> {
    let p = root.join("meta.json");
    let meta: Meta = from_json(&p)?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::format(
            &p,
            "version",
            format!("found {}, supported {FORMAT_VERSION}", meta.version),
        ));
    }
    if meta.classes != CLASS_NAMES {
        return Err(Error::format(&p, "classes", format!("{:?}", meta.classes)));
    }
    Ok(meta)
}

pub fn read_splits(root: &Path) -> Result<Splits> {
    from_json(&root.join("splits.json"))
}

/// Reads every sample of a split.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<SceneSample>> {
    read_meta(root)?;
    let splits = read_splits(root)?;
    splits.get(split)?.iter().map(|t| read_sample(root, t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_scenes: usize,
    /// Trailing scenes held out as the `val` split.
    pub val_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 16,
            val_scenes: 0,
            scene: SceneSpec::default(),
        }
    }
}

/// Generates and writes a whole dataset; returns the samples.
pub fn generate_dataset(root: &Path, cfg: &GenConfig) -> Result<Vec<SceneSample>> {
    if cfg.val_scenes > cfg.num_scenes {
        return Err(Error::Config("gen.val_scenes exceeds gen.num_scenes".into()));
    }
    let samples = (0..cfg.num_scenes)
        .map(|i| make_sample(&cfg.scene, i))
        .collect::<Result<Vec<_>>>()?;
    let cut = cfg.num_scenes - cfg.val_scenes;
    let tokens: Vec<String> = samples.iter().map(|s| s.token.clone()).collect();
    let splits = Splits {
        train: tokens[..cut].to_vec(),
        val: tokens[cut..].to_vec(),
    };
    write_dataset(root, &cfg.scene, &samples, &splits)?;
    Ok(samples)
}
