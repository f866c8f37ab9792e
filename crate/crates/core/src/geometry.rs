//! Boxes, camera calibration and the BEV grid.
//!
//! Ego frame: x forward, y left, z up (meters). Camera frame: x right,
//! y down, z along the optical axis. Integer pixel coordinates are pixel
//! centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Geometric center in the ego frame.
    pub center: [f64; 3],
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box3D {
    /// Footprint corners, counter-clockwise.
    pub fn corners_2d(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| [self.center[0] + a * c - b * s, self.center[1] + a * s + b * c])
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= self.size[0] / 2.0 + margin
            && ly.abs() <= self.size[1] / 2.0 + margin
            && (p[2] - self.center[2]).abs() <= self.size[2] / 2.0 + margin
    }

    pub fn center_distance_2d(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[c][r]))
}

/// Camera-to-ego rotation for a forward-looking camera pitched down by
/// `pitch` radians.
pub fn forward_camera_rotation(pitch: f64) -> Mat3 {
    let (s, c) = pitch.sin_cos();
    let right = [0.0, -1.0, 0.0];
    let down = [-s, 0.0, -c];
    let fwd = [c, 0.0, -s];
    [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-ego rotation.
    pub rotation: Mat3,
    /// Camera center in the ego frame.
    pub translation: [f64; 3],
}

impl CameraCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "camera focal lengths must be positive: {} {}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera image size must be positive".into()));
        }
        let rt = transpose(&self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rt[i][k] * self.rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Calibration of a feature map produced by `stride`-fold downsampling,
    /// each feature pixel covering a `stride x stride` block of image pixels.
    pub fn scaled(&self, stride: usize) -> CameraCalib {
        let s = stride as f64;
        let off = (s - 1.0) / 2.0;
        CameraCalib {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - off) / s,
            cy: (self.cy - off) / s,
            width: self.width / stride,
            height: self.height / stride,
            ..self.clone()
        }
    }

    /// Ego-frame point seen at pixel `(u, v)` at optical-axis depth `d`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let pc = [(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d];
        let r = mat_vec(&self.rotation, pc);
        [0, 1, 2].map(|i| r[i] + self.translation[i])
    }

    /// Pixel coordinates and depth of an ego-frame point; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let rel = [0, 1, 2].map(|i| p[i] - self.translation[i]);
        let pc = mat_vec(&transpose(&self.rotation), rel);
        if pc[2] <= 1e-9 {
            return None;
        }
        Some((
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
            pc[2],
        ))
    }

    /// Unit ray direction in the ego frame through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let d = mat_vec(&self.rotation, [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.map(|x| x / n)
    }

    /// Optical axis in the ego frame.
    pub fn axis(&self) -> [f64; 3] {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BEVGridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub cell: f64,
    pub z_range: [f64; 2],
}

impl Default for BEVGridSpec {
    fn default() -> Self {
        Self {
            x_range: [0.0, 25.6],
            y_range: [-12.8, 12.8],
            cell: 0.8,
            z_range: [-3.0, 5.0],
        }
    }
}

impl BEVGridSpec {
    fn extent(lo: f64, hi: f64, cell: f64, axis: &str) -> Result<usize> {
        let n = (hi - lo) / cell;
        let r = n.round();
        if !(cell > 0.0) || r < 1.0 || (n - r).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "grid {axis} range [{lo}, {hi}] is not a positive multiple of cell {cell}"
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if self.z_range[1] <= self.z_range[0] {
            return Err(Error::Config("grid z_range must be increasing".into()));
        }
        Ok(())
    }

    /// `(H, W)`: rows follow y, columns follow x.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let h = Self::extent(self.y_range[0], self.y_range[1], self.cell, "y")?;
        let w = Self::extent(self.x_range[0], self.x_range[1], self.cell, "x")?;
        Ok((h, w))
    }

    pub fn h(&self) -> usize {
        self.dims().map(|d| d.0).unwrap_or(0)
    }

    pub fn w(&self) -> usize {
        self.dims().map(|d| d.1).unwrap_or(0)
    }

    /// `(row, col)` of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fj = ((x - self.x_range[0]) / self.cell).floor();
        let fi = ((y - self.y_range[0]) / self.cell).floor();
        if fi < 0.0 || fj < 0.0 || !fi.is_finite() || !fj.is_finite() {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.h() && j < self.w()).then_some((i, j))
    }

    /// Flat cell index for a 3D point, honoring the z range.
    pub fn index_of(&self, p: [f64; 3]) -> Option<usize> {
        if !(p[2] >= self.z_range[0] && p[2] < self.z_range[1]) {
            return None;
        }
        self.cell_of(p[0], p[1]).map(|(i, j)| i * self.w() + j)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range[0] + (j as f64 + 0.5) * self.cell,
            self.y_range[0] + (i as f64 + 0.5) * self.cell,
        )
    }
}
