//! Pinhole camera model, ray generation, point projection, positional
//! encoding and view-angle computation.
//!
//! Conventions used across the whole crate: the camera looks down its local
//! +z axis; pixel `(u, v)` maps to the camera-space direction
//! `((u-cx)/fx, (v-cy)/fy, 1)` before normalisation; pixel centers sit at
//! integer coordinates; `camera_to_world` is a row-major 4x4 rigid transform.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) outside image bounds {width}x{height}")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("query point coincides with the source camera center")]
    DegenerateViewAngle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub camera_to_world: Matrix4<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl CameraPose {
    pub fn new(camera_to_world: Matrix4<f64>) -> Result<Self, GeometryError> {
        let r = camera_to_world.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = r.transpose() * r;
        let eye = Matrix3::identity();
        let dev = (gram - eye).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation block not orthonormal (max deviation {dev:.2e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} != +1"
            )));
        }
        let bottom = camera_to_world.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(GeometryError::InvalidPose(
                "bottom row must be (0,0,0,1)".into(),
            ));
        }
        Ok(Self { camera_to_world })
    }

    pub fn identity() -> Self {
        Self {
            camera_to_world: Matrix4::identity(),
        }
    }

    /// Pose looking from `eye` toward `target`, `up` fixing the roll.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&z);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self { camera_to_world: m }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Intrinsics plus pose: the geometric identity of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// One world-space ray per requested pixel, originating at the camera center.
pub fn generate_rays(view: &CameraView, pixels: &[(f64, f64)]) -> Result<Vec<Ray>, GeometryError> {
    let k = &view.intrinsics;
    let rot = view.pose.rotation();
    let origin = view.pose.center();
    let mut rays = Vec::with_capacity(pixels.len());
    for &(u, v) in pixels {
        if u < 0.0 || u > (k.width - 1) as f64 || v < 0.0 || v > (k.height - 1) as f64 {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: k.width,
                height: k.height,
            });
        }
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let direction = (rot * dir_cam).normalize();
        rays.push(Ray { origin, direction });
    }
    Ok(rays)
}

/// Project a world point into a view. Returns continuous pixel coordinates
/// and the camera-frame depth; fails for points at or behind the camera.
pub fn project_point(q: Vector3<f64>, view: &CameraView) -> Result<(f64, f64, f64), GeometryError> {
    let rot = view.pose.rotation();
    let p_cam = rot.transpose() * (q - view.pose.center());
    let depth = p_cam.z;
    if depth <= 0.0 {
        return Err(GeometryError::BehindCamera { depth });
    }
    let k = &view.intrinsics;
    let u = k.fx * p_cam.x / depth + k.cx;
    let v = k.fy * p_cam.y / depth + k.cy;
    Ok((u, v, depth))
}

/// NeRF-style positional encoding
/// `(sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x))`
/// applied componentwise; output length is `2 * L * input.len()`.
pub fn positional_encoding(input: &[f64], frequencies: usize) -> Vec<f64> {
    assert!(frequencies >= 1, "positional encoding needs L >= 1");
    let mut out = Vec::with_capacity(input.len() * 2 * frequencies);
    for &x in input {
        for l in 0..frequencies {
            let arg = (1u64 << l) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Angle between a ray direction and the line from a source camera center to
/// the queried point, in `[0, pi]`.
pub fn view_angle(
    ray: &Ray,
    source_center: Vector3<f64>,
    q: Vector3<f64>,
) -> Result<f64, GeometryError> {
    let to_point = q - source_center;
    let norm = to_point.norm();
    if norm < 1e-12 {
        return Err(GeometryError::DegenerateViewAngle);
    }
    let cosine = (ray.direction.dot(&to_point) / (ray.direction.norm() * norm)).clamp(-1.0, 1.0);
    Ok(cosine.acos())
}
