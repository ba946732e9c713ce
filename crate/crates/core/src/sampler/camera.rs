use serde::{Deserialize, Serialize};

use super::{mat_mul, mat_vec, Mat3};
use crate::error::{Error, Result};
use crate::skeleton::Pose3D;

/// Pinhole camera with a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl CameraModel {
    /// Identity extrinsics, principal point at the image centre.
    pub fn centered(focal: f64, image_size: usize) -> Self {
        let c = 0.5 * (image_size as f64 - 1.0);
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let p = mat_mul(&rt, r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (p[i][j] - want).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, world: &Pose3D) -> Pose3D {
        Pose3D::new(
            world
                .joints
                .iter()
                .map(|p| {
                    let q = mat_vec(&self.rotation, *p);
                    [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
                })
                .collect(),
        )
    }

    /// `u = fx·x/z + cx`, `v = fy·y/z + cy` for camera-frame points.
    pub fn project(&self, p: &Pose3D) -> Result<Vec<[f64; 2]>> {
        p.joints
            .iter()
            .enumerate()
            .map(|(j, q)| {
                if q[2] <= 0.0 {
                    return Err(Error::InvalidArgument(format!("joint {j} has depth {} in front of no camera", q[2])));
                }
                Ok([self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy])
            })
            .collect()
    }
}

/// Mapping between camera-frame millimetres and heatmap units.
///
/// `x, y` are pixel coordinates. Depth is measured relative to the root and
/// scaled by `fx / root_depth`, the pixels-per-millimetre at the root, then
/// shifted to the middle of the depth axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFrame {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub root_depth: f64,
    pub depth_bins: usize,
}

impl HeatmapFrame {
    pub fn new(cam: &CameraModel, root_depth: f64, depth_bins: usize) -> Result<Self> {
        if !(root_depth > 0.0 && root_depth.is_finite()) {
            return Err(Error::InvalidArgument(format!("root depth {root_depth} must be positive")));
        }
        Ok(Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            root_depth,
            depth_bins,
        })
    }

    /// Pixels per millimetre at the root depth.
    pub fn scale(&self) -> f64 {
        self.fx / self.root_depth
    }

    fn depth_offset(&self) -> f64 {
        0.5 * self.depth_bins as f64
    }

    pub fn to_heatmap(&self, p: &Pose3D) -> Result<Vec<[f64; 3]>> {
        p.joints
            .iter()
            .map(|q| {
                if q[2] <= 0.0 {
                    return Err(Error::InvalidArgument(format!("depth {} behind the camera", q[2])));
                }
                Ok([
                    self.fx * q[0] / q[2] + self.cx,
                    self.fy * q[1] / q[2] + self.cy,
                    (q[2] - self.root_depth) * self.scale() + self.depth_offset(),
                ])
            })
            .collect()
    }

    /// Inverse of [`to_heatmap`](Self::to_heatmap).
    pub fn from_heatmap(&self, h: &[[f64; 3]]) -> Pose3D {
        Pose3D::new(
            h.iter()
                .map(|p| {
                    let z = self.root_depth + (p[2] - self.depth_offset()) / self.scale();
                    [(p[0] - self.cx) * z / self.fx, (p[1] - self.cy) * z / self.fy, z]
                })
                .collect(),
        )
    }
}
