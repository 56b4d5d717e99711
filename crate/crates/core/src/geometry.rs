//! Rigid transforms, ego poses and pinhole cameras.
//!
//! Frames: the ego frame is x forward, y left, z up with its origin on the
//! ground. Cameras use x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Minimum camera-frame depth for a point to count as in front of a camera.
pub const CHEIRALITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `yaw` about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter()
            .chain(self.translation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("rigid transform has non-finite entries"));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::config(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::config(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World → ego-local transform at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub ego_from_world: RigidTransform,
    pub timestamp: f64,
}

impl EgoPose {
    /// Builds a pose from the ego vehicle's placement in the world
    /// (ego → world), inverting it to the stored world → ego form.
    pub fn from_world_placement(yaw: f64, position: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            ego_from_world: RigidTransform::from_yaw(yaw, position).invert(),
            timestamp,
        }
    }

    pub fn identity(timestamp: f64) -> Self {
        Self {
            ego_from_world: RigidTransform::identity(),
            timestamp,
        }
    }
}

/// Maps points given in frame-0 ego coordinates into frame-t ego coordinates:
/// `E_t · E_0⁻¹` (ego 0 → world → ego t).
pub fn ego_align(points: &[Vector3<f64>], e0: &EgoPose, et: &EgoPose) -> Vec<Vector3<f64>> {
    let m = ego_alignment(e0, et);
    points.iter().map(|p| m.apply(p)).collect()
}

pub fn ego_alignment(e0: &EgoPose, et: &EgoPose) -> RigidTransform {
    et.ego_from_world.compose(&e0.ego_from_world.invert())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub camera_from_ego: RigidTransform,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Feature-level strides, strictly increasing.
    pub strides: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub hit: bool,
}

impl Projection {
    /// Sampling coordinate on a feature level with the given stride.
    pub fn level_coords(&self, stride: u32) -> (f64, f64) {
        (self.u / f64::from(stride), self.v / f64::from(stride))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewHit {
    pub view: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        self.camera_from_ego.validate()?;
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::config("principal point must be finite"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::config("image extents must be positive"));
        }
        if self.strides.is_empty() || self.strides[0] == 0 {
            return Err(Error::config("at least one positive stride is required"));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "strides must be strictly increasing, got {:?}",
                self.strides
            )));
        }
        Ok(())
    }

    /// Camera facing `yaw` (radians, about ego +z) mounted at `mount` in ego
    /// coordinates, with horizontal field of view `hfov`.
    pub fn looking_along(
        yaw: f64,
        mount: Vector3<f64>,
        hfov: f64,
        image_width: u32,
        image_height: u32,
        strides: Vec<u32>,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: camera right, down, forward expressed in ego axes
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let camera_from_ego = RigidTransform::new(rotation, -(rotation * mount))?;
        let f = f64::from(image_width) / 2.0 / (hfov / 2.0).tan();
        let cam = Self {
            camera_from_ego,
            fx: f,
            fy: f,
            cx: f64::from(image_width) / 2.0,
            cy: f64::from(image_height) / 2.0,
            image_width,
            image_height,
            strides,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// `(width, height)` of feature level `j`: the image extent divided by the
    /// stride, rounded up.
    pub fn level_extent(&self, j: usize) -> (usize, usize) {
        let s = self.strides[j];
        (
            self.image_width.div_ceil(s) as usize,
            self.image_height.div_ceil(s) as usize,
        )
    }

    /// Same camera with its image resampled by `scale` (intrinsics scale,
    /// extents round to the nearest pixel). `scale = 1` returns an exact copy.
    pub fn scaled(&self, scale: f64) -> CameraModel {
        if scale == 1.0 {
            return self.clone();
        }
        CameraModel {
            camera_from_ego: self.camera_from_ego,
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            image_width: ((f64::from(self.image_width) * scale).round() as u32).max(1),
            image_height: ((f64::from(self.image_height) * scale).round() as u32).max(1),
            strides: self.strides.clone(),
        }
    }

    /// Pinhole projection of an ego-frame point. Points at or behind the
    /// cheirality plane report `hit = false` with NaN pixel coordinates.
    pub fn project(&self, p_ego: &Vector3<f64>) -> Projection {
        let pc = self.camera_from_ego.apply(p_ego);
        let depth = pc.z;
        if depth <= CHEIRALITY_EPS {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                hit: false,
            };
        }
        let u = self.fx * pc.x / depth + self.cx;
        let v = self.fy * pc.y / depth + self.cy;
        let hit = (0.0..f64::from(self.image_width)).contains(&u)
            && (0.0..f64::from(self.image_height)).contains(&v);
        Projection { u, v, depth, hit }
    }
}

/// Every view that sees `p_ego`, in view order.
pub fn view_hits(cams: &[CameraModel], p_ego: &Vector3<f64>) -> Vec<ViewHit> {
    cams.iter()
        .enumerate()
        .filter_map(|(view, cam)| {
            let pr = cam.project(p_ego);
            pr.hit.then_some(ViewHit {
                view,
                u: pr.u,
                v: pr.v,
                depth: pr.depth,
            })
        })
        .collect()
}
