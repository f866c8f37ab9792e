//! Camera auxiliary branch, center-based detection heads, box decoding,
//! target rendering and the detection losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BEVGridSpec, Box3D};
use crate::layers::{ChannelNorm, Conv, ConvBlock};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Heatmap bias so the initial sigmoid is about 0.1.
pub const HEATMAP_BIAS: f32 = -2.19;
pub const REG_CHANNELS: [(&str, usize); 4] = [("offset", 2), ("height", 1), ("dim", 3), ("rot", 2)];

/// conv3x3 -> norm -> relu -> conv3x3 -> norm, plus a projected shortcut
/// when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub short: Option<(Conv, ChannelNorm)>,
}

impl ResBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let short = if stride != 1 || cin != cout {
            Some((
                Conv::new(init, &format!("{name}.short.conv"), cin, cout, 1, stride, 1, false)?,
                ChannelNorm::new(init, &format!("{name}.short.norm"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: ConvBlock::new(init, &format!("{name}.conv1"), cin, cout, 3, stride)?,
            conv2: ConvBlock::new(init, &format!("{name}.conv2"), cout, cout, 3, 1)?.without_relu(),
            short,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, ps, x)?;
        let y = self.conv2.forward(g, ps, y)?;
        let s = match &self.short {
            Some((c, n)) => {
                let s = c.forward(g, ps, x)?;
                n.forward(g, ps, s)?
            }
            None => x,
        };
        let y = g.add(y, s)?;
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct AuxBranch {
    pub stages: Vec<[ResBlock; 2]>,
    pub fpn: ConvBlock,
    pub c_aux: usize,
}

impl AuxBranch {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_aux: usize) -> Result<Self> {
        if c_aux < 2 || c_aux % 2 != 0 {
            return Err(Error::Config(format!("aux.c_aux must be even and >= 2, got {c_aux}")));
        }
        let plan = [(c_in, c_aux / 2, 2), (c_aux / 2, c_aux, 2), (c_aux, 2 * c_aux, 1)];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| {
                Ok([
                    ResBlock::new(init, &format!("{name}.stage{}.res0", i + 1), a, b, s)?,
                    ResBlock::new(init, &format!("{name}.stage{}.res1", i + 1), b, b, 1)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            fpn: ConvBlock::new(init, &format!("{name}.fpn"), 2 * c_aux + c_aux / 2, c_aux, 3, 1)?,
            c_aux,
        })
    }

    /// Returns the three stage outputs and `x_aux`.
    pub fn forward_stages<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<([Var; 3], Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::shape(
                "aux_branch",
                "spatial size",
                format!("H and W must be divisible by 4, got {s:?}"),
            ));
        }
        let mut outs = Vec::with_capacity(3);
        let mut h = x;
        for st in &self.stages {
            h = st[0].forward(g, ps, h)?;
            h = st[1].forward(g, ps, h)?;
            outs.push(h);
        }
        let up3 = g.upsample2x(outs[2])?;
        let cat = g.concat(&[up3, outs[0]], 1)?;
        let f = self.fpn.forward(g, ps, cat)?;
        let y = g.upsample2x(f)?;
        Ok(([outs[0], outs[1], outs[2]], y))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_stages(g, ps, x)?.1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub offset: Var,
    pub height: Var,
    pub dim: Var,
    pub rot: Var,
}

impl HeadOutput {
    pub fn regression(&self) -> [Var; 4] {
        [self.offset, self.height, self.dim, self.rot]
    }
}

/// Shared 1x1 conv to `C_ctr`, then one two-layer 1x1 head per field.
#[derive(Clone, Debug)]
pub struct Heads {
    pub shared: Conv,
    /// cls, offset, height, dim, rot.
    pub fields: Vec<(Conv, Conv)>,
    pub classes: usize,
}

impl Heads {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_ctr: usize, classes: usize) -> Result<Self> {
        let shared = Conv::new(init, &format!("{name}.shared"), c_in, c_ctr, 1, 1, 1, true)?;
        let mut fields = Vec::new();
        let outs = [("cls", classes), ("offset", 2), ("height", 1), ("dim", 3), ("rot", 2)];
        for (field, k) in outs {
            let a = Conv::new(init, &format!("{name}.{field}.0"), c_ctr, c_ctr, 1, 1, 1, true)?;
            let b = Conv::new(init, &format!("{name}.{field}.1"), c_ctr, k, 1, 1, 1, true)?;
            fields.push((a, b));
        }
        let bias = fields[0].1.bias.clone().expect("heads use biases");
        init.store
            .get_mut(&bias)
            .expect("just added")
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = HEATMAP_BIAS);
        Ok(Self {
            shared,
            fields,
            classes,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<HeadOutput> {
        let h = self.shared.forward(g, ps, x)?;
        let h = g.relu(h)?;
        let mut out = Vec::with_capacity(5);
        for (a, b) in &self.fields {
            let y = a.forward(g, ps, h)?;
            let y = g.relu(y)?;
            out.push(b.forward(g, ps, y)?);
        }
        Ok(HeadOutput {
            cls: out[0],
            offset: out[1],
            height: out[2],
            dim: out[3],
            rot: out[4],
        })
    }
}

/// Head maps of one sample copied out of a graph, `C x H x W` each.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub cls: Tensor<f32>,
    pub offset: Tensor<f32>,
    pub height: Tensor<f32>,
    pub dim: Tensor<f32>,
    pub rot: Tensor<f32>,
}

impl HeadMaps {
    /// Splits batched head outputs into per-sample maps.
    pub fn from_graph<T: Scalar>(g: &Graph<T>, out: &HeadOutput) -> Vec<HeadMaps> {
        let take = |v: Var, k: usize| -> Tensor<f32> {
            let t = g.value(v);
            let s = t.shape();
            let per = s[1] * s[2] * s[3];
            let data = t.data()[k * per..(k + 1) * per]
                .iter()
                .map(|x| x.as_f64() as f32)
                .collect();
            Tensor::new(vec![s[1], s[2], s[3]], data).expect("slice of a valid tensor")
        };
        let n = g.shape(out.cls)[0];
        (0..n)
            .map(|k| HeadMaps {
                cls: take(out.cls, k),
                offset: take(out.offset, k),
                height: take(out.height, k),
                dim: take(out.dim, k),
                rot: take(out.rot, k),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    pub score_thresh: f64,
    pub nms_radius: f64,
    pub nms: bool,
    /// Keep only cells whose best score is a 3x3 local maximum.
    pub peak_filter: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            score_thresh: 0.1,
            nms_radius: 1.0,
            nms: true,
            peak_filter: true,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_boxes(maps: &HeadMaps, grid: &BEVGridSpec, opts: &DecodeOptions) -> Vec<Box3D> {
    let s = maps.cls.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let at = |t: &Tensor<f32>, c: usize, i: usize, j: usize| t.data()[(c * h + i) * w + j] as f64;
    let best = |i: usize, j: usize| -> (usize, f64) {
        (0..k)
            .map(|c| (c, at(&maps.cls, c, i, j)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    };
    let mut boxes = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let (cls, logit) = best(i, j);
            let score = sigmoid(logit);
            if score < opts.score_thresh {
                continue;
            }
            if opts.peak_filter {
                let mut peak = true;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        if best(ni as usize, nj as usize).1 > logit {
                            peak = false;
                        }
                    }
                }
                if !peak {
                    continue;
                }
            }
            let (cx, cy) = grid.cell_center(i, j);
            boxes.push(Box3D {
                center: [
                    cx + at(&maps.offset, 0, i, j) * grid.cell,
                    cy + at(&maps.offset, 1, i, j) * grid.cell,
                    at(&maps.height, 0, i, j),
                ],
                size: [0, 1, 2].map(|c| at(&maps.dim, c, i, j).exp()),
                yaw: at(&maps.rot, 0, i, j).atan2(at(&maps.rot, 1, i, j)),
                class_id: cls,
                score: Some(score),
            });
        }
    }
    if opts.nms {
        circular_nms(boxes, opts.nms_radius)
    } else {
        boxes
    }
}

/// Greedy per-class suppression of boxes within `radius` of a kept box.
pub fn circular_nms(mut boxes: Vec<Box3D>, radius: f64) -> Vec<Box3D> {
    boxes.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    let mut kept: Vec<Box3D> = Vec::new();
    for b in boxes {
        if !kept
            .iter()
            .any(|k| k.class_id == b.class_id && k.center_distance_2d(&b) <= radius)
        {
            kept.push(b);
        }
    }
    kept
}

/// CenterNet radius for a box footprint of `h x w` cells.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let (a1, b1, c1) = (1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (
        4.0 * min_overlap,
        -2.0 * min_overlap * (h + w),
        (min_overlap - 1.0) * w * h,
    );
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Rendered supervision for one sample, `C x H x W` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heatmap: Tensor<f32>,
    pub offset: Tensor<f32>,
    pub height: Tensor<f32>,
    pub dim: Tensor<f32>,
    pub rot: Tensor<f32>,
    /// 1 at each box's center cell.
    pub mask: Tensor<f32>,
    pub num_pos: usize,
}

pub const MIN_RADIUS: usize = 1;

pub fn render_targets(boxes: &[Box3D], grid: &BEVGridSpec, classes: usize) -> Result<Targets> {
    let (h, w) = grid.dims()?;
    let mut heat = vec![0.0f32; classes * h * w];
    let mut offset = vec![0.0f32; 2 * h * w];
    let mut height = vec![0.0f32; h * w];
    let mut dim = vec![0.0f32; 3 * h * w];
    let mut rot = vec![0.0f32; 2 * h * w];
    let mut mask = vec![0.0f32; h * w];
    let mut num_pos = 0;
    for b in boxes {
        if b.class_id >= classes {
            return Err(Error::Invalid(format!("box class {} >= {classes}", b.class_id)));
        }
        let Some((i, j)) = grid.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        let r = gaussian_radius(b.size[0] / grid.cell, b.size[1] / grid.cell, 0.1)
            .floor()
            .max(MIN_RADIUS as f64) as i64;
        let sigma = (2 * r + 1) as f64 / 6.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp() as f32;
                let slot = &mut heat[(b.class_id * h + ni as usize) * w + nj as usize];
                *slot = slot.max(v);
            }
        }
        let cell = i * w + j;
        if mask[cell] == 0.0 {
            num_pos += 1;
        }
        mask[cell] = 1.0;
        let (cx, cy) = grid.cell_center(i, j);
        offset[cell] = ((b.center[0] - cx) / grid.cell) as f32;
        offset[h * w + cell] = ((b.center[1] - cy) / grid.cell) as f32;
        height[cell] = b.center[2] as f32;
        for c in 0..3 {
            dim[c * h * w + cell] = b.size[c].ln() as f32;
        }
        rot[cell] = b.yaw.sin() as f32;
        rot[h * w + cell] = b.yaw.cos() as f32;
    }
    Ok(Targets {
        heatmap: Tensor::new(vec![classes, h, w], heat)?,
        offset: Tensor::new(vec![2, h, w], offset)?,
        height: Tensor::new(vec![1, h, w], height)?,
        dim: Tensor::new(vec![3, h, w], dim)?,
        rot: Tensor::new(vec![2, h, w], rot)?,
        mask: Tensor::new(vec![1, h, w], mask)?,
        num_pos,
    })
}

impl Targets {
    /// Stacks per-sample targets into `N x C x H x W` graph constants.
    fn stack<T: Scalar>(g: &mut Graph<T>, ts: &[Targets], f: impl Fn(&Targets) -> &Tensor<f32>) -> Result<Var> {
        let s = f(&ts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(ts.len() * f(&ts[0]).numel());
        for t in ts {
            data.extend(f(t).data().iter().map(|&v| T::lit(v as f64)));
        }
        let mut shape = vec![ts.len()];
        shape.extend(s);
        Ok(g.constant(Tensor::new(shape, data)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_align: f64,
    pub lambda_aux: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_align: 0.1,
            lambda_aux: 0.5,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

pub const PROB_CLAMP: f64 = 1e-4;

/// Penalty-reduced pixel-wise focal loss, normalized by the positive count.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    heat: Var,
    num_pos: usize,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let gt = g.value(heat).clone();
    let pos = gt.map(|v| if v.as_f64() >= 1.0 { T::one() } else { T::zero() });
    let negw = gt.map(|v| {
        if v.as_f64() >= 1.0 {
            T::zero()
        } else {
            T::lit((1.0 - v.as_f64()).powf(beta))
        }
    });
    let pos = g.constant(pos);
    let negw = g.constant(negw);
    let p = g.sigmoid(logits)?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let logp = g.log(p)?;
    let logq = g.log(q)?;
    let pow = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        if alpha == 2.0 {
            g.mul(x, x)
        } else {
            let l = g.log(x)?;
            let l = g.scale(l, alpha)?;
            g.exp(l)
        }
    };
    let qa = pow(g, q)?;
    let pa = pow(g, p)?;
    let a = g.mul(qa, logp)?;
    let a = g.mul(a, pos)?;
    let b = g.mul(pa, logq)?;
    let b = g.mul(b, negw)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0 / num_pos.max(1) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub total: Var,
    pub heatmap: Var,
    pub regression: Var,
}

/// Focal heatmap loss plus L1 regression at positive cells.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    targets: &[Targets],
    cfg: &LossConfig,
) -> Result<DetLoss> {
    let num_pos: usize = targets.iter().map(|t| t.num_pos).sum();
    let heat = Targets::stack(g, targets, |t| &t.heatmap)?;
    if g.shape(heat) != g.shape(out.cls) {
        return Err(Error::shape(
            "detection_loss",
            "heatmap",
            format!("targets {:?} vs logits {:?}", g.shape(heat), g.shape(out.cls)),
        ));
    }
    let heatmap = focal_loss(g, out.cls, heat, num_pos, cfg.focal_alpha, cfg.focal_beta)?;
    let mask = Targets::stack(g, targets, |t| &t.mask)?;
    let fields: [fn(&Targets) -> &Tensor<f32>; 4] = [|t| &t.offset, |t| &t.height, |t| &t.dim, |t| &t.rot];
    let mut reg = None;
    for (pred, field) in out.regression().into_iter().zip(fields) {
        let tgt = Targets::stack(g, targets, field)?;
        let d = g.sub(pred, tgt)?;
        let d = g.abs(d)?;
        let d = g.mul(d, mask)?;
        let d = g.sum(d)?;
        reg = Some(match reg {
            None => d,
            Some(r) => g.add(r, d)?,
        });
    }
    let regression = g.scale(reg.expect("four fields"), 1.0 / num_pos.max(1) as f64)?;
    let total = g.add(heatmap, regression)?;
    Ok(DetLoss {
        total,
        heatmap,
        regression,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub det: DetLoss,
    pub aux: Option<DetLoss>,
    pub align: Option<Var>,
}

/// `L_det(main) + lambda_aux L_det(aux) + lambda_align L_align`.
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    main: &HeadOutput,
    aux: Option<&HeadOutput>,
    align: Option<Var>,
    targets: &[Targets],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let det = detection_loss(g, main, targets, cfg)?;
    let mut total = det.total;
    let aux = match aux {
        Some(a) => {
            let l = detection_loss(g, a, targets, cfg)?;
            let s = g.scale(l.total, cfg.lambda_aux)?;
            total = g.add(total, s)?;
            Some(l)
        }
        None => None,
    };
    if let Some(a) = align {
        let s = g.scale(a, cfg.lambda_align)?;
        total = g.add(total, s)?;
    }
    Ok(LossTerms { total, det, aux, align })
}
