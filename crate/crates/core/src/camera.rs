//! Rotation parameterisation, scaled-orthographic and pinhole projection.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this norm the rotation derivative uses the exact `r = 0` limit.
pub const SMALL_ANGLE: f64 = 1e-9;

/// Cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    if theta == 0.0 {
        return Matrix3::identity();
    }
    let axis = r / theta;
    let (s, c) = theta.sin_cos();
    Matrix3::identity() * c + skew(&axis) * s + axis * axis.transpose() * (1.0 - c)
}

/// Inverse of [`rodrigues`] for a proper rotation (angle in `[0, pi]`).
pub fn rotation_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*rot).scaled_axis()
}

/// Derivative of [`rodrigues`] with respect to `r[i]` (`i` in `0..3`).
pub fn rodrigues_derivative(r: &Vector3<f64>, i: usize) -> Matrix3<f64> {
    let e = Vector3::ith(i, 1.0);
    let n2 = r.norm_squared();
    if n2.sqrt() < SMALL_ANGLE {
        return skew(&e);
    }
    let rot = rodrigues(r);
    let v = r.cross(&((Matrix3::identity() - rot) * e));
    (skew(r) * r[i] + skew(&v)) / n2 * rot
}

/// All three rotation derivatives at once.
pub fn rodrigues_derivatives(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    [0, 1, 2].map(|i| rodrigues_derivative(r, i))
}

/// Scaled-orthographic pose: `x = s * P * R * v + s * t2d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoPose {
    pub rotation: Vector3<f64>,
    /// In model units; multiplied by `scale` like the rotated points.
    pub t2d: Vector2<f64>,
    pub scale: f64,
}

impl OrthoPose {
    pub fn new(rotation: Vector3<f64>, t2d: Vector2<f64>, scale: f64) -> Result<Self> {
        let pose = Self { rotation, t2d, scale };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        if self.rotation.iter().chain(self.t2d.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        Ok(())
    }

    pub fn project(&self, v: &Vector3<f64>) -> Vector2<f64> {
        sop_project(v, self)
    }
}

/// Pinhole camera with known principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspCamera {
    pub rotation: Vector3<f64>,
    /// `[t_x, t_y, t_z]` in metres; `t_z` is the subject distance.
    pub t3d: Vector3<f64>,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
}

impl PerspCamera {
    pub fn new(rotation: Vector3<f64>, t3d: Vector3<f64>, focal: f64, principal_point: Vector2<f64>) -> Result<Self> {
        let cam = Self {
            rotation,
            t3d,
            focal,
            principal_point,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::invalid(format!("focal length must be positive, got {}", self.focal)));
        }
        if !(self.t3d.z > 0.0) {
            return Err(Error::invalid(format!("t_z must be positive, got {}", self.t3d.z)));
        }
        if self
            .rotation
            .iter()
            .chain(self.t3d.iter())
            .chain(self.principal_point.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::invalid("camera contains non-finite values"));
        }
        Ok(())
    }

    /// Intrinsic matrix `K(f)`.
    pub fn intrinsics(&self) -> Matrix3<f64> {
        intrinsics(self.focal, &self.principal_point)
    }

    pub fn to_camera(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rodrigues(&self.rotation) * v + self.t3d
    }
}

pub fn intrinsics(focal: f64, pp: &Vector2<f64>) -> Matrix3<f64> {
    Matrix3::new(focal, 0.0, pp.x, 0.0, focal, pp.y, 0.0, 0.0, 1.0)
}

/// `dK/df`.
pub fn intrinsics_derivative() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
}

pub fn sop_project(v: &Vector3<f64>, pose: &OrthoPose) -> Vector2<f64> {
    let p = rodrigues(&pose.rotation) * v;
    Vector2::new(p.x + pose.t2d.x, p.y + pose.t2d.y) * pose.scale
}

/// Pinhole projection of one vertex; `vertex` names it in the error.
pub fn pinhole_project_vertex(v: &Vector3<f64>, cam: &PerspCamera, vertex: usize) -> Result<Vector2<f64>> {
    let x = cam.to_camera(v);
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera { vertex, depth: x.z });
    }
    Ok(Vector2::new(
        cam.focal * x.x / x.z + cam.principal_point.x,
        cam.focal * x.y / x.z + cam.principal_point.y,
    ))
}

pub fn pinhole_project(v: &Vector3<f64>, cam: &PerspCamera) -> Result<Vector2<f64>> {
    pinhole_project_vertex(v, cam, 0)
}

/// Collinearity residual `[x~]x K [R | t] v~`, zero iff `v` projects onto `x`.
pub fn dlt_rows(x: &Vector2<f64>, cam: &PerspCamera, v: &Vector3<f64>) -> Vector3<f64> {
    let xh = Vector3::new(x.x, x.y, 1.0);
    skew(&xh) * (cam.intrinsics() * cam.to_camera(v))
}

/// Either camera model, as produced by a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Camera {
    Ortho(OrthoPose),
    Persp(PerspCamera),
}

impl Camera {
    pub fn rotation(&self) -> Vector3<f64> {
        match self {
            Camera::Ortho(p) => p.rotation,
            Camera::Persp(c) => c.rotation,
        }
    }

    pub fn kind(&self) -> CameraKind {
        match self {
            Camera::Ortho(_) => CameraKind::Ortho,
            Camera::Persp(_) => CameraKind::Persp,
        }
    }

    /// Project vertex `index` at position `v`.
    pub fn project(&self, v: &Vector3<f64>, index: usize) -> Result<Vector2<f64>> {
        match self {
            Camera::Ortho(p) => Ok(sop_project(v, p)),
            Camera::Persp(c) => pinhole_project_vertex(v, c, index),
        }
    }

    /// Point in the camera frame (orthographic: rotation only).
    pub fn to_camera(&self, v: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Camera::Ortho(p) => rodrigues(&p.rotation) * v,
            Camera::Persp(c) => c.to_camera(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraKind {
    Ortho,
    Persp,
}

impl std::str::FromStr for CameraKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ortho" => Ok(CameraKind::Ortho),
            "persp" => Ok(CameraKind::Persp),
            other => Err(Error::invalid(format!("unknown camera kind {other:?}"))),
        }
    }
}
