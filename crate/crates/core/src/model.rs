//! The full detector: camera branch with lift-splat, pillar LiDAR branch,
//! fusion with coordinate attention, the main head and the train-only
//! alignment loss and auxiliary camera branch.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{freeze_partition, Backbone, BackboneConfig, FreezeMode, Partition};
use crate::dataset::SceneSample;
use crate::error::{Error, Result};
use crate::fusion::{ConvCat, Sca, ScaConfig};
use crate::geometry::{BEVGridSpec, Box3D};
use crate::heads::{
    compute_losses, decode_boxes, render_targets, AuxBranch, DecodeOptions, HeadMaps, HeadOutput, Heads, LossConfig,
    LossTerms, Targets,
};
use crate::layers::{Conv, ConvBlock};
use crate::lidar::{voxelize, PillarEncoder, PillarSet};
use crate::params::{Init, ParamStore};
use crate::scene::{CameraRig, CLASS_NAMES};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::view_transform::{
    build_frustum, cam_align_preprocess, depth_context_split, depth_features, lift_splat, nt_xent_align_loss,
    splat_index, uniform_bins, AlignInstances, DepthEncoder, SplatIndex,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub enabled: bool,
    pub tau: f64,
    pub instances: AlignInstances,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.1,
            instances: AlignInstances::SampleChannel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub enabled: bool,
    pub c_aux: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            c_aux: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: BEVGridSpec,
    /// Rig the camera images were rendered with.
    pub camera: CameraRig,
    /// Rendered image -> model input average-pool factor.
    pub image_pool: usize,
    /// Without it the model is LiDAR-only and the alignment and auxiliary
    /// branches are inert.
    pub camera_branch: bool,
    pub backbone: BackboneConfig,
    pub c_neck: usize,
    pub depth_bins: usize,
    pub depth_range: [f64; 2],
    /// Depth-map normalization for the alignment encoder (m).
    pub max_depth: f64,
    pub c_ce: usize,
    pub c_lidar: usize,
    pub max_points: usize,
    pub c_fused: usize,
    pub bev_blocks: usize,
    pub c_ctr: usize,
    pub sca: ScaConfig,
    pub cam_align: AlignConfig,
    pub aux: AuxConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BEVGridSpec::default(),
            camera: CameraRig::default(),
            image_pool: 4,
            camera_branch: true,
            backbone: BackboneConfig {
                mona: true,
                ..Default::default()
            },
            c_neck: 32,
            depth_bins: 32,
            depth_range: [1.0, 40.0],
            max_depth: 60.0,
            c_ce: 32,
            c_lidar: 64,
            max_points: 32,
            c_fused: 32,
            bev_blocks: 2,
            c_ctr: 32,
            sca: ScaConfig::default(),
            cam_align: AlignConfig::default(),
            aux: AuxConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        let (h, w) = self.grid.dims()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("grid {h}x{w} must be divisible by 4")));
        }
        let (iw, ih) = self.input_size();
        if self.image_pool == 0 || self.camera.width % self.image_pool != 0 || self.camera.height % self.image_pool != 0
        {
            return Err(Error::Config(format!(
                "image_pool {} must divide the {}x{} camera image",
                self.image_pool, self.camera.width, self.camera.height
            )));
        }
        if iw % 16 != 0 || ih % 16 != 0 {
            return Err(Error::Config(format!("model input {iw}x{ih} must be divisible by 16")));
        }
        if self.depth_bins == 0 || !(self.depth_range[0] > 0.0 && self.depth_range[1] > self.depth_range[0]) {
            return Err(Error::Config(
                "depth_bins must be >= 1 with 0 < depth_range[0] < depth_range[1]".into(),
            ));
        }
        for (v, name) in [
            (self.c_neck, "c_neck"),
            (self.c_ce, "c_ce"),
            (self.c_lidar, "c_lidar"),
            (self.max_points, "max_points"),
            (self.c_fused, "c_fused"),
            (self.c_ctr, "c_ctr"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.cam_align.tau > 0.0) {
            return Err(Error::Config("model.cam_align.tau must be positive".into()));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::Config("model.max_depth must be positive".into()));
        }
        Ok(())
    }

    /// Model input `(width, height)`.
    pub fn input_size(&self) -> (usize, usize) {
        (
            self.camera.width / self.image_pool.max(1),
            self.camera.height / self.image_pool.max(1),
        )
    }

    /// Stride of the lifted feature map relative to the rendered image.
    pub fn feature_stride(&self) -> usize {
        self.image_pool * self.backbone.patch
    }
}

/// Per-component evaluation counts.
#[derive(Debug, Default)]
pub struct Counters {
    pub camera: AtomicUsize,
    pub lss: AtomicUsize,
    pub align: AtomicUsize,
    pub aux: AtomicUsize,
    pub lidar: AtomicUsize,
    pub sca: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub camera: usize,
    pub lss: usize,
    pub align: usize,
    pub aux: usize,
    pub lidar: usize,
    pub sca: usize,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        let r = |c: &AtomicUsize| c.load(Ordering::Relaxed);
        CounterSnapshot {
            camera: r(&self.camera),
            lss: r(&self.lss),
            align: r(&self.align),
            aux: r(&self.aux),
            lidar: r(&self.lidar),
            sca: r(&self.sca),
        }
    }

    pub fn reset(&self) {
        for c in [&self.camera, &self.lss, &self.align, &self.aux, &self.lidar, &self.sca] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

fn bump(c: &AtomicUsize) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One sample converted to model inputs and supervision.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub token: String,
    /// `3 x H x W` normalized model input.
    pub image: Tensor<f32>,
    /// `1 x H' x W'` pooled, normalized depth at feature resolution.
    pub depth: Tensor<f32>,
    pub pillars: PillarSet,
    pub targets: Targets,
    /// Boxes inside the grid with at least one LiDAR return.
    pub gt: Vec<Box3D>,
}

#[derive(Clone, Debug)]
pub struct CameraBranch {
    pub backbone: Backbone,
    pub lateral: Vec<Conv>,
    pub smooth: ConvBlock,
    pub depthnet: Conv,
    pub depth_encoder: Option<DepthEncoder>,
    pub index: SplatIndex,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub main: HeadOutput,
    pub aux: Option<HeadOutput>,
    pub align: Option<Var>,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub camera: Option<CameraBranch>,
    pub lidar: PillarEncoder,
    pub fuse: ConvCat,
    pub sca: Option<Sca>,
    pub bev: Vec<ConvBlock>,
    pub head: Heads,
    pub aux: Option<(AuxBranch, Heads)>,
    pub partition: Option<Partition>,
    pub counters: Counters,
}

/// Parameter-name prefixes of the fused stage (fusion conv, attention,
/// BEV blocks and main head).
pub const FUSED_STAGE: [&str; 4] = ["fuse.", "sca.", "bev.", "head."];

impl Model {
    /// Builds the model and its freshly initialized parameters. With Mona
    /// enabled the backbone is partitioned adapter-only.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let classes = CLASS_NAMES.len();
        let grid = &cfg.grid;
        let camera = if cfg.camera_branch {
            let backbone = Backbone::new(&mut init, &cfg.backbone)?;
            let lateral = cfg
                .backbone
                .widths
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv::new(&mut init, &format!("cam.neck.lateral{i}"), c, cfg.c_neck, 1, 1, 1, true))
                .collect::<Result<Vec<_>>>()?;
            let smooth = ConvBlock::new(&mut init, "cam.neck.smooth", cfg.c_neck, cfg.c_neck, 3, 1)?;
            let depthnet = Conv::new(
                &mut init,
                "cam.depthnet",
                cfg.c_neck,
                cfg.depth_bins + cfg.c_ce,
                1,
                1,
                1,
                true,
            )?;
            let depth_encoder = if cfg.cam_align.enabled {
                Some(DepthEncoder::new(&mut init, "cam_align.depth_encoder", 1, cfg.c_ce)?)
            } else {
                None
            };
            let calib = cfg.camera.calib().scaled(cfg.feature_stride());
            let (w, h) = cfg.input_size();
            let bins = uniform_bins(cfg.depth_range[0], cfg.depth_range[1], cfg.depth_bins);
            let frustum = build_frustum(&calib, &bins, h / cfg.backbone.patch, w / cfg.backbone.patch)?;
            Some(CameraBranch {
                backbone,
                lateral,
                smooth,
                depthnet,
                depth_encoder,
                index: splat_index(&frustum, grid),
            })
        } else {
            None
        };
        let lidar = PillarEncoder::new(&mut init, "lidar.pfn", cfg.c_lidar)?;
        let c_cam = if cfg.camera_branch { cfg.c_ce } else { 0 };
        let fuse = ConvCat::new(&mut init, "fuse", c_cam, cfg.c_lidar, cfg.c_fused)?;
        let sca = if cfg.sca.enabled {
            Some(Sca::new(&mut init, "sca", cfg.c_fused, cfg.sca.rho)?)
        } else {
            None
        };
        let bev = (0..cfg.bev_blocks)
            .map(|k| ConvBlock::new(&mut init, &format!("bev.block{k}"), cfg.c_fused, cfg.c_fused, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = Heads::new(&mut init, "head", cfg.c_fused, cfg.c_ctr, classes)?;
        let aux = if cfg.camera_branch && cfg.aux.enabled {
            let branch = AuxBranch::new(&mut init, "aux", cfg.c_ce, cfg.aux.c_aux)?;
            let heads = Heads::new(&mut init, "aux_head", cfg.aux.c_aux, cfg.c_ctr, classes)?;
            Some((branch, heads))
        } else {
            None
        };
        let partition = if cfg.camera_branch && cfg.backbone.mona {
            Some(freeze_partition(&mut store, FreezeMode::AdapterOnly)?)
        } else {
            None
        };
        Ok((
            Model {
                cfg: cfg.clone(),
                camera,
                lidar,
                fuse,
                sca,
                bev,
                head,
                aux,
                partition,
                counters: Counters::default(),
            },
            store,
        ))
    }

    /// Converts a dataset sample into model inputs and targets.
    pub fn prepare(&self, s: &SceneSample) -> Result<Prepared> {
        let cfg = &self.cfg;
        if s.image.width != cfg.camera.width || s.image.height != cfg.camera.height {
            return Err(Error::Config(format!(
                "sample {}: image {}x{} does not match model.camera {}x{}",
                s.token, s.image.width, s.image.height, cfg.camera.width, cfg.camera.height
            )));
        }
        let calib = cfg.camera.calib();
        if s.calib != calib {
            return Err(Error::Config(format!(
                "sample {}: calibration differs from model.camera",
                s.token
            )));
        }
        let (w, h) = cfg.input_size();
        let p = cfg.image_pool;
        let (sw, sh) = (s.image.width, s.image.height);
        let mut img = vec![0.0f32; 3 * h * w];
        for y in 0..sh {
            for x in 0..sw {
                for c in 0..3 {
                    img[(c * h + y / p) * w + x / p] += s.image.data[(y * sw + x) * 3 + c] as f32;
                }
            }
        }
        let norm = (p * p) as f32 * 255.0;
        img.iter_mut().for_each(|v| *v = (*v / norm - 0.5) / 0.25);
        let depth = Tensor::new(vec![1, 1, sh, sw], s.depth.data.clone())?;
        let depth = depth_features(&depth, cfg.feature_stride(), cfg.max_depth as f32)?;
        let ds = depth.shape().to_vec();
        let gt: Vec<Box3D> = s
            .visible_boxes()
            .into_iter()
            .filter(|b| cfg.grid.cell_of(b.center[0], b.center[1]).is_some())
            .collect();
        Ok(Prepared {
            token: s.token.clone(),
            image: Tensor::new(vec![3, h, w], img)?,
            depth: depth.reshape(vec![1, ds[2], ds[3]])?,
            pillars: voxelize(&s.points, &cfg.grid, cfg.max_points)?,
            targets: render_targets(&gt, &cfg.grid, CLASS_NAMES.len())?,
            gt,
        })
    }

    fn camera_forward<T: Scalar>(
        &self,
        cam: &CameraBranch,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        batch: &[&Prepared],
        mode: Mode,
        loss: &LossConfig,
    ) -> Result<(Var, Option<Var>)> {
        bump(&self.counters.camera);
        let images = stack(batch.iter().map(|p| &p.image))?;
        let x = g.constant(images.cast());
        let feats = cam.backbone.forward(g, ps, x)?;
        let mut top = cam.lateral[2].forward(g, ps, feats[2])?;
        for k in (0..2).rev() {
            let up = g.upsample2x(top)?;
            let lat = cam.lateral[k].forward(g, ps, feats[k])?;
            top = g.add(lat, up)?;
        }
        let f = cam.smooth.forward(g, ps, top)?;
        let f = cam.depthnet.forward(g, ps, f)?;
        let (probs, ctx) = depth_context_split(g, f, self.cfg.depth_bins)?;
        bump(&self.counters.lss);
        let bev = lift_splat(g, ctx, probs, &cam.index, &self.cfg.grid)?;
        let align = match (&cam.depth_encoder, mode) {
            (Some(enc), Mode::Train) if loss.lambda_align > 0.0 => {
                bump(&self.counters.align);
                let d = g.constant(stack(batch.iter().map(|p| &p.depth))?.cast());
                let b = cam_align_preprocess(g, ps, enc, ctx, d, self.cfg.cam_align.instances, self.cfg.cam_align.tau)?;
                Some(nt_xent_align_loss(g, &b)?)
            }
            _ => None,
        };
        Ok((bev, align))
    }

    /// Builds the forward graph. Train mode adds the alignment loss and the
    /// auxiliary head when enabled and weighted.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        batch: &[&Prepared],
        mode: Mode,
        loss: &LossConfig,
    ) -> Result<ForwardOut> {
        if batch.is_empty() {
            return Err(Error::Invalid("forward: empty batch".into()));
        }
        let cam = match &self.camera {
            Some(c) => Some(self.camera_forward(c, g, ps, batch, mode, loss)?),
            None => None,
        };
        bump(&self.counters.lidar);
        let sets: Vec<PillarSet> = batch.iter().map(|p| p.pillars.clone()).collect();
        let lidar = self.lidar.forward(g, ps, &sets, &self.cfg.grid)?;
        let mut x = match cam {
            Some((bev, _)) => self.fuse.forward(g, ps, bev, lidar)?,
            None => self.fuse.block.forward(g, ps, lidar)?,
        };
        if let Some(sca) = &self.sca {
            bump(&self.counters.sca);
            x = sca.apply(g, ps, x, self.cfg.sca.saem_enabled)?;
        }
        for b in &self.bev {
            x = b.forward(g, ps, x)?;
        }
        let main = self.head.forward(g, ps, x)?;
        let aux = match (&self.aux, cam, mode) {
            (Some((branch, heads)), Some((bev, _)), Mode::Train) if loss.lambda_aux > 0.0 => {
                bump(&self.counters.aux);
                let y = branch.forward(g, ps, bev)?;
                Some(heads.forward(g, ps, y)?)
            }
            _ => None,
        };
        Ok(ForwardOut {
            main,
            aux,
            align: cam.and_then(|c| c.1),
        })
    }

    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        batch: &[&Prepared],
        cfg: &LossConfig,
    ) -> Result<LossTerms> {
        let out = self.forward(g, ps, batch, Mode::Train, cfg)?;
        let targets: Vec<Targets> = batch.iter().map(|p| p.targets.clone()).collect();
        compute_losses(g, &out.main, out.aux.as_ref(), out.align, &targets, cfg)
    }

    /// Decoded boxes per sample; never touches train-only components.
    pub fn predict(&self, ps: &ParamStore<f32>, batch: &[&Prepared], opts: &DecodeOptions) -> Result<Vec<Vec<Box3D>>> {
        let mut g = Graph::<f32>::new();
        let out = self.forward(&mut g, ps, batch, Mode::Infer, &LossConfig::default())?;
        Ok(HeadMaps::from_graph(&g, &out.main)
            .iter()
            .map(|m| decode_boxes(m, &self.cfg.grid, opts))
            .collect())
    }

    /// Parameters evaluated at inference (everything but the alignment
    /// encoder and the auxiliary branch).
    pub fn inference_params(store: &ParamStore<f32>) -> usize {
        store.count_where(|p| !p.name.starts_with("cam_align.") && !p.name.starts_with("aux"))
    }

    pub fn fused_stage_params(store: &ParamStore<f32>) -> usize {
        store.count_where(|p| FUSED_STAGE.iter().any(|s| p.name.starts_with(s)))
    }
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        if n == 0 {
            shape = t.shape().to_vec();
        } else if t.shape() != shape.as_slice() {
            return Err(Error::shape("stack", "sample", format!("{:?} vs {shape:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(full, data)
}
