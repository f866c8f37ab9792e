//! Small parameterized building blocks shared by the model modules.

use rand::Rng;

use crate::error::Result;
use crate::params::{Init, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// Square-kernel convolution with "same" padding for stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin / groups * k * k;
        let weight = init.fan_in(&format!("{name}.weight"), &[cout, cin / groups, k, k], fan_in)?;
        let bias = if bias {
            Some(init.fan_in(&format!("{name}.bias"), &[cout], fan_in)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
            groups,
        })
    }

    /// All-zero weight and bias.
    pub fn zeros<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let weight = init.constant(&format!("{name}.weight"), &[cout, cin, k, k], 0.0)?;
        let bias = Some(init.constant(&format!("{name}.bias"), &[cout], 0.0)?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: k / 2,
            groups: 1,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight)?;
        let b = self.bias.as_ref().map(|b| g.param(ps, b)).transpose()?;
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    /// Overrides padding (e.g. patch embedding).
    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
}

/// Layer normalization over the channel axis of an NCHW map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: String,
    pub beta: String,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[c], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[c], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, &self.gamma)?;
        let beta = g.param(ps, &self.beta)?;
        g.layer_norm(x, gamma, beta, 1, NORM_EPS)
    }
}

/// conv -> channel norm -> ReLU (ReLU optional).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: ChannelNorm,
    pub relu: bool,
}

impl ConvBlock {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, k, stride, 1, true)?,
            norm: ChannelNorm::new(init, &format!("{name}.norm"), cout)?,
            relu: true,
        })
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.norm.forward(g, ps, y)?;
        if self.relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}
