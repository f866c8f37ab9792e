//! Lift-splat camera-to-BEV projection and the contrastive RGB/depth
//! alignment loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BEVGridSpec, CameraCalib};
use crate::layers::ConvBlock;
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var, SENTINEL_DROP};

/// Uniform depth bin centers over `[lo, hi]` inclusive.
pub fn uniform_bins(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Ego-frame points for every (depth bin, feature row, feature column),
/// shape `D x H' x W' x 3`. `calib` must describe the feature map.
pub fn build_frustum(calib: &CameraCalib, bins: &[f64], h: usize, w: usize) -> Result<Tensor<f64>> {
    if bins.is_empty() || bins.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Invalid(
            "depth bins must be non-empty and strictly increasing".into(),
        ));
    }
    let mut data = Vec::with_capacity(bins.len() * h * w * 3);
    for &d in bins {
        for v in 0..h {
            for u in 0..w {
                data.extend(calib.unproject(u as f64, v as f64, d));
            }
        }
    }
    Tensor::new(vec![bins.len(), h, w, 3], data)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplatIndex {
    /// One entry per frustum point in `(d, v, u)` order.
    pub cells: Vec<usize>,
    pub dropped: usize,
}

/// Bins every frustum point into the grid; points outside the grid or the
/// z range get `SENTINEL_DROP`.
pub fn splat_index(frustum: &Tensor<f64>, grid: &BEVGridSpec) -> SplatIndex {
    let mut cells = Vec::with_capacity(frustum.numel() / 3);
    let mut dropped = 0;
    for p in frustum.data().chunks_exact(3) {
        match grid.index_of([p[0], p[1], p[2]]) {
            Some(c) => cells.push(c),
            None => {
                dropped += 1;
                cells.push(SENTINEL_DROP);
            }
        }
    }
    SplatIndex { cells, dropped }
}

/// Splits `N x (D + C) x H x W` into softmaxed depth probabilities and the
/// untouched context features.
pub fn depth_context_split<T: Scalar>(g: &mut Graph<T>, feat: Var, d: usize) -> Result<(Var, Var)> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 || s[1] <= d {
        return Err(Error::shape(
            "depth_context_split",
            "channels",
            format!("need N x (D + C) x H x W with D = {d} and C >= 1, got {s:?}"),
        ));
    }
    let logits = g.slice(feat, 1, 0, d)?;
    let probs = g.softmax(logits, 1)?;
    let ctx = g.slice(feat, 1, d, s[1] - d)?;
    Ok((probs, ctx))
}

/// Outer product of context and depth probabilities, scatter-summed into
/// BEV cells. Returns `N x C x H_bev x W_bev`.
pub fn lift_splat<T: Scalar>(
    g: &mut Graph<T>,
    context: Var,
    depth_probs: Var,
    index: &SplatIndex,
    grid: &BEVGridSpec,
) -> Result<Var> {
    let cs = g.shape(context).to_vec();
    let ds = g.shape(depth_probs).to_vec();
    if cs.len() != 4 || ds.len() != 4 || cs[0] != ds[0] || cs[2..] != ds[2..] {
        return Err(Error::shape(
            "lift_splat",
            "context/depth",
            format!("context {cs:?} vs depth {ds:?}"),
        ));
    }
    let (n, c, d, hw) = (cs[0], cs[1], ds[1], cs[2] * cs[3]);
    if index.cells.len() != d * hw {
        return Err(Error::shape(
            "lift_splat",
            "frustum",
            format!("{} frustum points for {d} x {} x {}", index.cells.len(), cs[2], cs[3]),
        ));
    }
    let (bh, bw) = grid.dims()?;
    let ctx = g.reshape(context, &[n, c, 1, hw])?;
    let prob = g.reshape(depth_probs, &[n, 1, d, hw])?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let ck = g.slice(ctx, 0, k, 1)?;
        let pk = g.slice(prob, 0, k, 1)?;
        let lifted = g.mul(ck, pk)?;
        let lifted = g.reshape(lifted, &[c, d * hw])?;
        let rows = g.permute(lifted, &[1, 0])?;
        let bev = g.scatter_add(rows, &index.cells, bh, bw)?;
        out.push(g.reshape(bev, &[1, c, bh, bw])?);
    }
    if out.len() == 1 {
        Ok(out[0])
    } else {
        g.concat(&out, 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignInstances {
    /// One instance per (sample, channel); vectors are flattened spatial maps.
    #[default]
    SampleChannel,
    /// One instance per (sample, camera); vectors are whole feature maps.
    SampleCamera,
}

/// Matched RGB/depth feature stacks, `instances x length` each.
#[derive(Clone, Copy, Debug)]
pub struct AlignBatch {
    pub rgb: Var,
    pub depth: Var,
    pub tau: f64,
}

/// Three 1x1 conv blocks stepping channel widths geometrically to `c_ce`.
#[derive(Clone, Debug)]
pub struct DepthEncoder {
    pub blocks: Vec<ConvBlock>,
    pub widths: Vec<usize>,
}

pub fn geometric_widths(cin: usize, cout: usize, steps: usize) -> Vec<usize> {
    let ratio = (cout as f64 / cin as f64).powf(1.0 / steps as f64);
    let mut w: Vec<usize> = (0..=steps)
        .map(|k| (cin as f64 * ratio.powi(k as i32)).round().max(1.0) as usize)
        .collect();
    w[0] = cin;
    w[steps] = cout;
    w
}

impl DepthEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, c_ce: usize) -> Result<Self> {
        let w = geometric_widths(cin, c_ce, 3);
        let mut blocks = Vec::new();
        for k in 0..3 {
            let b = ConvBlock::new(init, &format!("{name}.block{k}"), w[k], w[k + 1], 1, 1)?;
            blocks.push(if k == 2 { b.without_relu() } else { b });
        }
        Ok(Self { blocks, widths: w })
    }
}

/// Average-pools a `N x 1 x H x W` depth map by `stride` and scales it to
/// roughly unit range.
pub fn depth_features(depth: &Tensor<f32>, stride: usize, max_depth: f32) -> Result<Tensor<f32>> {
    let s = depth.shape();
    if s.len() != 4 || s[1] != 1 || s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(Error::shape(
            "depth_features",
            "depth map",
            format!("need N x 1 x H x W divisible by {stride}, got {s:?}"),
        ));
    }
    let (n, h, w) = (s[0], s[2] / stride, s[3] / stride);
    let src = depth.data();
    let norm = (stride * stride) as f32 * max_depth;
    let mut out = vec![0.0f32; n * h * w];
    for k in 0..n {
        for i in 0..h * stride {
            for j in 0..w * stride {
                out[(k * h + i / stride) * w + j / stride] += src[(k * s[2] + i) * s[3] + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Tensor::new(vec![n, 1, h, w], out)
}

/// Encodes depth features and flattens both stacks into matched instances.
pub fn cam_align_preprocess<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    enc: &DepthEncoder,
    rgb_feat: Var,
    depth_feat: Var,
    mode: AlignInstances,
    tau: f64,
) -> Result<AlignBatch> {
    let rs = g.shape(rgb_feat).to_vec();
    let ds = g.shape(depth_feat).to_vec();
    if rs.len() != 4 || ds.len() != 4 || rs[0] != ds[0] {
        return Err(Error::shape(
            "cam_align_preprocess",
            "instances",
            format!("rgb {rs:?} vs depth {ds:?}"),
        ));
    }
    let mut x = depth_feat;
    for b in &enc.blocks {
        x = b.forward(g, ps, x)?;
    }
    if g.shape(x) != rs.as_slice() {
        return Err(Error::shape(
            "cam_align_preprocess",
            "encoded depth",
            format!("rgb {rs:?} vs encoded depth {:?}", g.shape(x)),
        ));
    }
    let (m, l) = match mode {
        AlignInstances::SampleChannel => (rs[0] * rs[1], rs[2] * rs[3]),
        AlignInstances::SampleCamera => (rs[0], rs[1] * rs[2] * rs[3]),
    };
    let rgb = g.reshape(rgb_feat, &[m, l])?;
    let depth = g.reshape(x, &[m, l])?;
    Ok(AlignBatch { rgb, depth, tau })
}

fn unit_rows<T: Scalar>(g: &mut Graph<T>, x: Var, side: &'static str) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let n2 = g.reduce(sq, &[1], crate::tensor::ReduceMode::Sum)?;
    if let Some(i) = g.value(n2).data().iter().position(|&v| v.as_f64() <= 1e-24) {
        return Err(Error::ZeroNorm { instance: i, side });
    }
    let n = g.sqrt(n2)?;
    g.div(x, n)
}

/// RGB-anchored NT-Xent: `-(1/N) sum_i log softmax_j(cos(r_i, d_j) / tau)_i`.
pub fn nt_xent_align_loss<T: Scalar>(g: &mut Graph<T>, batch: &AlignBatch) -> Result<Var> {
    let s = g.shape(batch.rgb).to_vec();
    if s.len() != 2 || g.shape(batch.depth) != s.as_slice() {
        return Err(Error::shape(
            "nt_xent",
            "stacks",
            format!("rgb {s:?} vs depth {:?}", g.shape(batch.depth)),
        ));
    }
    if s[0] < 2 {
        return Err(Error::Invalid(format!(
            "nt_xent needs at least 2 instances, got {}",
            s[0]
        )));
    }
    if !(batch.tau > 0.0) {
        return Err(Error::Invalid(format!(
            "nt_xent temperature must be positive, got {}",
            batch.tau
        )));
    }
    let n = s[0];
    let r = unit_rows(g, batch.rgb, "rgb")?;
    let d = unit_rows(g, batch.depth, "depth")?;
    let dt = g.permute(d, &[1, 0])?;
    let sim = g.matmul(r, dt)?;
    let logits = g.scale(sim, 1.0 / batch.tau)?;
    let ls = g.log_softmax(logits, 1)?;
    let eye = g.constant(Tensor::from_fn(vec![n, n], |k| {
        if k / n == k % n {
            T::one()
        } else {
            T::zero()
        }
    }));
    let diag = g.mul(ls, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, -1.0 / n as f64)
}
