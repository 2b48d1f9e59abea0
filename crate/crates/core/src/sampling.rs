//! Seeded generation of synthetic fitting instances.

use nalgebra::{DVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{Camera, OrthoPose, PerspCamera};
use crate::error::Result;
use crate::fit::project_landmarks;
use crate::landmarks::Landmarks2D;
use crate::shapemodel::ShapeModel;

/// Coefficients drawn uniformly from `[-k sigma_i, k sigma_i]`.
pub fn sample_alpha<R: Rng + ?Sized>(model: &ShapeModel, rng: &mut R, k: f64) -> DVector<f64> {
    model.sigma().map(|s| rng.random_range(-k * s..=k * s))
}

/// Rotation with yaw/pitch/roll magnitudes below the given bounds (radians).
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R, max_yaw: f64, max_pitch: f64, max_roll: f64) -> Vector3<f64> {
    let mut pick = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    Vector3::new(pick(max_pitch), pick(max_yaw), pick(max_roll))
}

/// Perspective camera at distance `tz` whose focal length maps the model's
/// nominal interocular distance to `interocular_px` pixels.
pub fn frontal_camera(model: &ShapeModel, tz: f64, interocular_px: f64) -> Result<PerspCamera> {
    let (a, b) = model
        .eye_indices()
        .ok_or_else(|| crate::Error::invalid("model designates no eye landmarks"))?;
    let mean = model.mean();
    let eye_gap = (crate::shapemodel::vertex(mean, a) - crate::shapemodel::vertex(mean, b)).norm();
    PerspCamera::new(
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, tz),
        interocular_px * tz / eye_gap,
        Vector2::zeros(),
    )
}

/// Orthographic pose that maps the nominal interocular distance to
/// `interocular_px` pixels.
pub fn frontal_pose(model: &ShapeModel, interocular_px: f64) -> Result<OrthoPose> {
    let cam = frontal_camera(model, 1.0, interocular_px)?;
    OrthoPose::new(Vector3::zeros(), Vector2::zeros(), cam.focal)
}

/// Project the given vertices, optionally with isotropic Gaussian pixel noise.
pub fn observe<R: Rng + ?Sized>(
    model: &ShapeModel,
    alpha: &DVector<f64>,
    camera: &Camera,
    indices: &[usize],
    noise_px: f64,
    rng: &mut R,
) -> Result<Landmarks2D> {
    let mut points = project_landmarks(model, alpha, camera, indices)?;
    if noise_px > 0.0 {
        let normal = Normal::new(0.0, noise_px).map_err(|e| crate::Error::invalid(e.to_string()))?;
        for p in &mut points {
            p.x += normal.sample(rng);
            p.y += normal.sample(rng);
        }
    }
    Landmarks2D::from_pairs(indices, &points)
}
