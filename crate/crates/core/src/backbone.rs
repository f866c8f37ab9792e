//! Three-stage transformer backbone with optional Mona adapters.
//!
//! Tensors stay NCHW throughout; token-wise linear maps are 1x1 convs and
//! "layer norm over tokens" is layer norm over the channel axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

pub const MONA_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stride of the patch embedding (the first stage's stride).
    pub patch: usize,
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub mona: bool,
    pub mona_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch: 4,
            widths: [16, 32, 64],
            blocks_per_stage: 2,
            head_dim: 16,
            mlp_ratio: 4,
            mona: false,
            mona_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage != 2 {
            return Err(Error::Config(format!(
                "backbone.blocks_per_stage must be 2, got {}",
                self.blocks_per_stage
            )));
        }
        if self.patch != 4 {
            return Err(Error::Config(format!("backbone.patch must be 4, got {}", self.patch)));
        }
        if self.mona_ratio < 2 {
            return Err(Error::Config("backbone.mona_ratio must be >= 2".into()));
        }
        for &w in &self.widths {
            if w == 0 || w % self.head_dim != 0 || w % self.mona_ratio != 0 {
                return Err(Error::Config(format!(
                    "backbone width {w} must be a positive multiple of head_dim {} and mona_ratio {}",
                    self.head_dim, self.mona_ratio
                )));
            }
        }
        Ok(())
    }
}

/// `x + U sigmoid(conv1x1(dw(D(s1 LN(x) + s2 x))))`, with `dw` the mean of
/// three depthwise filters plus their input.
#[derive(Clone, Debug)]
pub struct Mona {
    pub norm: ChannelNorm,
    pub s1: String,
    pub s2: String,
    pub down: Conv,
    pub dw: Vec<Conv>,
    pub pw: Conv,
    pub up: Conv,
}

impl Mona {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize, ratio: usize) -> Result<Self> {
        let r = c / ratio;
        let dw = MONA_KERNELS
            .iter()
            .map(|&k| Conv::new(init, &format!("{name}.dw{k}"), r, r, k, 1, r, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm: ChannelNorm::new(init, &format!("{name}.norm"), c)?,
            s1: init.constant(&format!("{name}.s1"), &[1], 1.0)?,
            s2: init.constant(&format!("{name}.s2"), &[1], 0.0)?,
            down: Conv::new(init, &format!("{name}.down"), c, r, 1, 1, 1, true)?,
            dw,
            pw: Conv::new(init, &format!("{name}.pw"), r, r, 1, 1, 1, true)?,
            up: Conv::zeros(init, &format!("{name}.up"), r, c, 1)?,
        })
    }

    /// The scaled normalization `s1 LN(x) + s2 x`.
    pub fn x_norm<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let ln = self.norm.forward(g, ps, x)?;
        let s1 = g.param(ps, &self.s1)?;
        let s1 = g.reshape(s1, &[1, 1, 1, 1])?;
        let s2 = g.param(ps, &self.s2)?;
        let s2 = g.reshape(s2, &[1, 1, 1, 1])?;
        let a = g.mul(ln, s1)?;
        let b = g.mul(x, s2)?;
        g.add(a, b)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let xn = self.x_norm(g, ps, x)?;
        let d = self.down.forward(g, ps, xn)?;
        let mut acc = None;
        for conv in &self.dw {
            let y = conv.forward(g, ps, d)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        let mean = g.scale(acc.expect("three filters"), 1.0 / self.dw.len() as f64)?;
        let filtered = g.add(mean, d)?;
        let p = self.pw.forward(g, ps, filtered)?;
        let s = g.sigmoid(p)?;
        let u = self.up.forward(g, ps, s)?;
        g.add(x, u)
    }
}

/// Multi-head self-attention over all spatial positions of an NCHW map.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Conv,
    pub proj: Conv,
    pub heads: usize,
}

impl Attention {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let dh = c / self.heads;
        let t = h * w;
        let qkv = self.qkv.forward(g, ps, x)?;
        let qkv = g.reshape(qkv, &[n, 3, self.heads, dh, t])?;
        let q = g.slice(qkv, 1, 0, 1)?;
        let q = g.reshape(q, &[n, self.heads, dh, t])?;
        let q = g.permute(q, &[0, 1, 3, 2])?;
        let k = g.slice(qkv, 1, 1, 1)?;
        let k = g.reshape(k, &[n, self.heads, dh, t])?;
        let v = g.slice(qkv, 1, 2, 1)?;
        let v = g.reshape(v, &[n, self.heads, dh, t])?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 3)?;
        // [n, heads, dh, t] = v [dh, t] x attn^T [t, t]
        let attn_t = g.permute(attn, &[0, 1, 3, 2])?;
        let out = g.matmul(v, attn_t)?;
        let out = g.reshape(out, &[n, c, h, w])?;
        self.proj.forward(g, ps, out)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: ChannelNorm,
    pub attn: Attention,
    pub mona_attn: Option<Mona>,
    pub norm2: ChannelNorm,
    pub fc1: Conv,
    pub fc2: Conv,
    pub mona_mlp: Option<Mona>,
}

impl Block {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize, cfg: &BackboneConfig) -> Result<Self> {
        let mona = |init: &mut Init<'_, R>, tag: &str| -> Result<Option<Mona>> {
            if cfg.mona {
                Mona::new(init, &format!("{name}.{tag}"), c, cfg.mona_ratio).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            norm1: ChannelNorm::new(init, &format!("{name}.norm1"), c)?,
            attn: Attention {
                qkv: Conv::new(init, &format!("{name}.attn.qkv"), c, 3 * c, 1, 1, 1, true)?,
                proj: Conv::new(init, &format!("{name}.attn.proj"), c, c, 1, 1, 1, true)?,
                heads: c / cfg.head_dim,
            },
            mona_attn: mona(init, "mona_attn")?,
            norm2: ChannelNorm::new(init, &format!("{name}.norm2"), c)?,
            fc1: Conv::new(init, &format!("{name}.mlp.fc1"), c, cfg.mlp_ratio * c, 1, 1, 1, true)?,
            fc2: Conv::new(init, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * c, c, 1, 1, 1, true)?,
            mona_mlp: mona(init, "mona_mlp")?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = self.attn.forward(g, ps, h)?;
        let mut x = g.add(x, h)?;
        if let Some(m) = &self.mona_attn {
            x = m.forward(g, ps, x)?;
        }
        let h = self.norm2.forward(g, ps, x)?;
        let h = self.fc1.forward(g, ps, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, ps, h)?;
        let mut x = g.add(x, h)?;
        if let Some(m) = &self.mona_mlp {
            x = m.forward(g, ps, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Patch embedding for stage 0, patch merging afterwards.
    pub down: Conv,
    pub down_norm: ChannelNorm,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.widths.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = if i == 0 {
                Conv::new(
                    init,
                    &format!("{name}.patch"),
                    cin,
                    c,
                    cfg.patch + 1,
                    cfg.patch,
                    1,
                    true,
                )?
            } else {
                Conv::new(init, &format!("{name}.merge"), cin, c, 3, 2, 1, true)?
            };
            let down_norm = ChannelNorm::new(init, &format!("{name}.down_norm"), c)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| Block::new(init, &format!("{name}.block{b}"), c, cfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                down,
                down_norm,
                blocks,
            });
            cin = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// Feature maps at strides 4, 8 and 16.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var) -> Result<[Var; 3]> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape(
                "backbone",
                "input channels",
                format!("expected N x {} x H x W, got {s:?}", self.cfg.in_channels),
            ));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::shape(
                "backbone",
                "spatial size",
                format!("H and W must be divisible by 16, got {}x{}", s[2], s[3]),
            ));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.down.forward(g, ps, x)?;
            x = stage.down_norm.forward(g, ps, x)?;
            for b in &stage.blocks {
                x = b.forward(g, ps, x)?;
            }
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("backbone.") && name.contains(".mona_")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    Full,
    AdapterOnly,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "adapter_only" => Ok(Self::AdapterOnly),
            other => Err(Error::Invalid(format!(
                "unknown freeze mode `{other}` (expected full or adapter_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    pub tunable_fraction: f64,
    pub adapter_count: usize,
}

/// Sets trainable flags on the `backbone.*` parameters of `store`. Other
/// parameters are left untouched and excluded from the report.
pub fn freeze_partition<T: Scalar>(store: &mut ParamStore<T>, mode: FreezeMode) -> Result<Partition> {
    let mut frozen = Vec::new();
    let mut trainable = Vec::new();
    let (mut n_train, mut n_total, mut n_adapter) = (0usize, 0usize, 0usize);
    for p in store.iter_mut().filter(|p| p.name.starts_with("backbone.")) {
        let adapter = is_adapter_param(&p.name);
        p.trainable = mode == FreezeMode::Full || adapter;
        let n = p.tensor.numel();
        n_total += n;
        if adapter {
            n_adapter += n;
        }
        if p.trainable {
            n_train += n;
            trainable.push(p.name.clone());
        } else {
            frozen.push(p.name.clone());
        }
    }
    if n_total == 0 {
        return Err(Error::Invalid(
            "freeze_partition: store has no backbone parameters".into(),
        ));
    }
    Ok(Partition {
        frozen,
        trainable,
        tunable_fraction: n_train as f64 / n_total as f64,
        adapter_count: n_adapter,
    })
}
