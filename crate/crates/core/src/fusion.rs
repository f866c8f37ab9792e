//! Camera/LiDAR BEV fusion and section-aware coordinate attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBlock};
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, ReduceMode, Scalar, Var};

/// Channel concat followed by a 3x3 conv block.
#[derive(Clone, Debug)]
pub struct ConvCat {
    pub block: ConvBlock,
}

impl ConvCat {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c_cam: usize, c_lidar: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            block: ConvBlock::new(init, &format!("{name}.conv"), c_cam + c_lidar, c_out, 3, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, cam: Var, lidar: Var) -> Result<Var> {
        let (a, b) = (g.shape(cam).to_vec(), g.shape(lidar).to_vec());
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(Error::shape(
                "fuse_convcat",
                "spatial size",
                format!("camera {a:?} vs lidar {b:?}"),
            ));
        }
        let x = g.concat(&[cam, lidar], 1)?;
        self.block.forward(g, ps, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaConfig {
    pub enabled: bool,
    pub saem_enabled: bool,
    pub rho: usize,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            saem_enabled: true,
            rho: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sca {
    /// Shared CPEM conv `C -> C / rho`.
    pub shared: Conv,
    pub conv_h: Conv,
    pub conv_w: Conv,
    /// SAEM conv over the avg/max maps, `2 -> 1`.
    pub spatial: Conv,
}

impl Sca {
    /// The shared conv gets a random init; the three gate convs start at
    /// zero so every gate reads 0.5.
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize, rho: usize) -> Result<Self> {
        if rho == 0 || c / rho == 0 {
            return Err(Error::Config(format!("sca.rho = {rho} invalid for {c} channels")));
        }
        let r = c / rho;
        Ok(Self {
            shared: Conv::new(init, &format!("{name}.cpem.shared"), c, r, 1, 1, 1, true)?,
            conv_h: Conv::zeros(init, &format!("{name}.cpem.conv_h"), r, c, 1)?,
            conv_w: Conv::zeros(init, &format!("{name}.cpem.conv_w"), r, c, 1)?,
            spatial: Conv::zeros(init, &format!("{name}.saem.conv"), 2, 1, 1)?,
        })
    }

    /// Direction weights `(w_h: N x C x H x 1, w_w: N x C x 1 x W)`.
    pub fn cpem<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let zh = g.reduce(x, &[3], ReduceMode::Avg)?;
        let zw = g.reduce(x, &[2], ReduceMode::Avg)?;
        let zw = g.permute(zw, &[0, 1, 3, 2])?;
        let z = g.concat(&[zh, zw], 2)?;
        let f = self.shared.forward(g, ps, z)?;
        let f = g.relu(f)?;
        let fh = g.slice(f, 2, 0, h)?;
        let fw = g.slice(f, 2, h, w)?;
        let fw = g.permute(fw, &[0, 1, 3, 2])?;
        let ah = self.conv_h.forward(g, ps, fh)?;
        let aw = self.conv_w.forward(g, ps, fw)?;
        Ok((g.sigmoid(ah)?, g.sigmoid(aw)?))
    }

    /// Spatial gate `N x 1 x H x W` from channel-wise avg and max maps.
    pub fn saem<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let za = g.reduce(x, &[1], ReduceMode::Avg)?;
        let zg = g.reduce(x, &[1], ReduceMode::Max)?;
        let f = g.concat(&[za, zg], 1)?;
        let a = self.spatial.forward(g, ps, f)?;
        g.sigmoid(a)
    }

    /// `y_c(i,j) = x_c(i,j) w_h_c(i) w_w_c(j) [w_s(i,j)]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, saem: bool) -> Result<Var> {
        if g.shape(x).len() != 4 {
            return Err(Error::shape(
                "sca",
                "rank",
                format!("need N x C x H x W, got {:?}", g.shape(x)),
            ));
        }
        let (wh, ww) = self.cpem(g, ps, x)?;
        let y = g.mul(x, wh)?;
        let mut y = g.mul(y, ww)?;
        if saem {
            let ws = self.saem(g, ps, x)?;
            y = g.mul(y, ws)?;
        }
        Ok(y)
    }
}
