//! Pillar voxelization and the point-wise pillar encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BEVGridSpec;
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, ReduceMode, Scalar, Tensor, Var};

pub const POINT_FEATURES: usize = 9;

/// `N x 4` rows of x, y, z (m) and intensity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pillar {
    /// Flat grid index `row * W + col`.
    pub cell: usize,
    /// Decorated points: x, y, z, intensity, offsets to the pillar mean
    /// (x, y, z) and to the cell center (x, y).
    pub points: Vec<[f32; POINT_FEATURES]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PillarSet {
    /// Sorted by cell.
    pub pillars: Vec<Pillar>,
    pub max_points: usize,
    pub dropped: usize,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }
}

pub fn voxelize(pc: &PointCloud, grid: &BEVGridSpec, max_points: usize) -> Result<PillarSet> {
    if max_points == 0 {
        return Err(Error::Invalid("voxelize: max points per pillar must be >= 1".into()));
    }
    let w = grid.w();
    let mut raw: std::collections::BTreeMap<usize, Vec<[f32; 4]>> = Default::default();
    let mut dropped = 0;
    for p in &pc.points {
        let idx = grid.index_of([p[0] as f64, p[1] as f64, p[2] as f64]);
        match idx {
            Some(c) => {
                let v = raw.entry(c).or_default();
                if v.len() < max_points {
                    v.push(*p);
                } else {
                    dropped += 1;
                }
            }
            None => dropped += 1,
        }
    }
    let pillars = raw
        .into_iter()
        .map(|(cell, pts)| {
            let n = pts.len() as f32;
            let mean = [0, 1, 2].map(|k| pts.iter().map(|p| p[k]).sum::<f32>() / n);
            let (cx, cy) = grid.cell_center(cell / w, cell % w);
            let points = pts
                .iter()
                .map(|p| {
                    [
                        p[0],
                        p[1],
                        p[2],
                        p[3],
                        p[0] - mean[0],
                        p[1] - mean[1],
                        p[2] - mean[2],
                        p[0] - cx as f32,
                        p[1] - cy as f32,
                    ]
                })
                .collect();
            Pillar { cell, points }
        })
        .collect();
    Ok(PillarSet {
        pillars,
        max_points,
        dropped,
    })
}

/// Shared per-point affine + ReLU, max over each pillar's points.
#[derive(Clone, Debug)]
pub struct PillarEncoder {
    pub weight: String,
    pub bias: String,
    pub channels: usize,
}

impl PillarEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: init.fan_in(&format!("{name}.weight"), &[POINT_FEATURES, channels], POINT_FEATURES)?,
            bias: init.fan_in(&format!("{name}.bias"), &[1, 1, channels], POINT_FEATURES)?,
            channels,
        })
    }

    /// Encodes one pillar set per sample into `N x C x H x W`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        sets: &[PillarSet],
        grid: &BEVGridSpec,
    ) -> Result<Var> {
        let (h, w) = grid.dims()?;
        let n = sets.len();
        if n == 0 {
            return Err(Error::Invalid("pillar encoder: empty batch".into()));
        }
        let p = sets.iter().map(|s| s.max_points).max().unwrap_or(1).max(1);
        let total: usize = sets.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Ok(g.constant(Tensor::zeros(vec![n, self.channels, h, w])));
        }
        let mut feats = vec![T::zero(); total * p * POINT_FEATURES];
        let mut mask = vec![T::zero(); total * p];
        let mut cells = Vec::with_capacity(total);
        let mut row = 0;
        for (k, s) in sets.iter().enumerate() {
            for pil in &s.pillars {
                for (q, pt) in pil.points.iter().enumerate() {
                    let base = (row * p + q) * POINT_FEATURES;
                    for (f, &v) in pt.iter().enumerate() {
                        feats[base + f] = T::lit(v as f64);
                    }
                    mask[row * p + q] = T::one();
                }
                cells.push(k * h * w + pil.cell);
                row += 1;
            }
        }
        let x = g.constant(Tensor::new(vec![total, p, POINT_FEATURES], feats)?);
        let m = g.constant(Tensor::new(vec![total, p, 1], mask)?);
        let wt = g.param(ps, &self.weight)?;
        let b = g.param(ps, &self.bias)?;
        let y = g.matmul(x, wt)?;
        let y = g.add(y, b)?;
        let y = g.relu(y)?;
        let y = g.mul(y, m)?;
        let y = g.reduce(y, &[1], ReduceMode::Max)?;
        let y = g.reshape(y, &[total, self.channels])?;
        let bev = g.scatter_add(y, &cells, n * h, w)?;
        let bev = g.reshape(bev, &[self.channels, n, h, w])?;
        g.permute(bev, &[1, 0, 2, 3])
    }
}
