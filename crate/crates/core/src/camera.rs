//! Pinhole cameras and primary rays.
//!
//! Camera frame: x right, y down, z forward (looking along +z). Poses map
//! camera coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::field::{Aabb, Vec3};

/// Allowed deviation of `R^T R` from the identity.
pub const ORTHONORMAL_TOLERANCE: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f32) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Entry and exit distances through `aabb`, if the ray hits it.
    pub fn interval(&self, aabb: &Aabb) -> Option<(f32, f32)> {
        aabb.intersect(&self.origin, &self.direction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// Camera-to-world rigid transform.
    pub pose: Matrix4<f32>,
}

impl Camera {
    pub fn new(width: u32, height: u32, fx: f32, fy: f32, cx: f32, cy: f32, pose: Matrix4<f32>) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Centered principal point and square pixels from a horizontal field of view.
    pub fn with_fov(width: u32, height: u32, fov_x_degrees: f32, pose: Matrix4<f32>) -> Result<Self> {
        let f = 0.5 * width as f32 / (0.5 * fov_x_degrees.to_radians()).tan();
        Self::new(width, height, f, f, 0.5 * width as f32, 0.5 * height as f32, pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "camera size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        let intrinsics = [self.fx, self.fy, self.cx, self.cy];
        if !intrinsics.iter().all(|v| v.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!("bad camera intrinsics {intrinsics:?}")));
        }
        validate_pose(&self.pose)
    }

    pub fn rotation(&self) -> Matrix3<f32> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Ray through continuous image coordinates; pixel `(i, j)` covers
    /// `[i, i+1) x [j, j+1)`.
    pub fn ray_through(&self, u: f32, v: f32) -> Ray {
        let local = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray {
            origin: self.center(),
            direction: (self.rotation() * local).normalize(),
        }
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn generate_ray(&self, px: u32, py: u32) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::InvalidConfig(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_through(px as f32 + 0.5, py as f32 + 0.5))
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width as usize * self.height as usize);
        for py in 0..self.height {
            for px in 0..self.width {
                out.push(self.ray_through(px as f32 + 0.5, py as f32 + 0.5));
            }
        }
        out
    }
}

pub fn validate_pose(pose: &Matrix4<f32>) -> Result<()> {
    if !pose.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig("pose has non-finite entries".into()));
    }
    let r = pose.fixed_view::<3, 3>(0, 0);
    let err = (r.transpose() * r - Matrix3::identity()).amax();
    if err > ORTHONORMAL_TOLERANCE {
        return Err(Error::InvalidConfig(format!(
            "pose rotation is not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let bottom = pose.row(3).transpose() - Vector4::new(0.0, 0.0, 0.0, 1.0);
    if bottom.amax() > ORTHONORMAL_TOLERANCE {
        return Err(Error::InvalidConfig("pose bottom row must be (0, 0, 0, 1)".into()));
    }
    Ok(())
}

/// Camera-to-world pose at `eye` looking at `target`. `up` is the world
/// direction that should appear upward in the image.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Matrix4<f32>> {
    let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| {
        Error::InvalidConfig("look_at eye and target coincide".into())
    })?;
    let right = forward
        .cross(&up)
        .try_normalize(1e-6)
        .ok_or_else(|| Error::InvalidConfig("look_at up vector is parallel to the view".into()))?;
    let down = forward.cross(&right);
    let mut pose = Matrix4::identity();
    pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
    pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&down);
    pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&forward);
    pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    Ok(pose)
}
