//! Configuration and results shared by the landmark and contour fitters.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraKind};
use crate::error::{Error, Result};
use crate::landmarks::Landmarks2D;
use crate::metrics::landmark_distance;
use crate::nls::{SolveReport, SolverOptions};
use crate::shapemodel::{vertex, ShapeModel};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Weight of `|alpha / sigma|^2` in the linear solve.
    pub tikhonov_weight: f64,
    /// Box bound `|alpha_i| <= k sigma_i`; `None` disables it.
    pub coeff_bound_sigmas: Option<f64>,
    pub init_rotation: Option<Vector3<f64>>,
    /// Round limit of the alternating baseline.
    pub max_outer_iters: usize,
    /// Orthographic restarts are tried when the first fit ends above this
    /// landmark error (% interocular).
    pub restart_threshold: f64,
    /// Assumed subject distance (metres) for the focal-length initialisation.
    pub initial_distance: f64,
    pub principal_point: Vector2<f64>,
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tikhonov_weight: 1e-3,
            coeff_bound_sigmas: Some(2.0),
            init_rotation: None,
            max_outer_iters: 100,
            restart_threshold: 5.0,
            initial_distance: 1.0,
            principal_point: Vector2::zeros(),
            solver: SolverOptions::default(),
        }
    }
}

impl FitConfig {
    /// No regularisation and no coefficient bounds.
    pub fn unconstrained() -> Self {
        Self {
            tikhonov_weight: 0.0,
            coeff_bound_sigmas: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tikhonov_weight >= 0.0) || !self.tikhonov_weight.is_finite() {
            return Err(Error::invalid(format!(
                "Tikhonov weight must be non-negative, got {}",
                self.tikhonov_weight
            )));
        }
        if let Some(k) = self.coeff_bound_sigmas {
            if !(k > 0.0) {
                return Err(Error::invalid(format!("coefficient bound must be positive, got {k}")));
            }
        }
        if !(self.initial_distance > 0.0) || !self.initial_distance.is_finite() {
            return Err(Error::invalid(format!(
                "initial distance must be positive, got {}",
                self.initial_distance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    /// The linear stage dropped singular values.
    pub rank_deficient: bool,
    /// Some Jacobian came from finite differences.
    pub finite_difference_jacobian: bool,
    pub restarts_used: usize,
    /// Coefficients moved onto the box bound by clamping.
    pub clamped_coefficients: usize,
    /// The distance estimate is poorly constrained by the data.
    pub low_confidence_distance: bool,
    /// A contour round found no correspondences.
    pub no_correspondences: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub alpha: DVector<f64>,
    pub camera: Camera,
    /// Reprojection minus observation, `[dx1, dy1, ...]`.
    pub residuals: DVector<f64>,
    /// `residuals . residuals`.
    pub objective: f64,
    /// Report of the last nonlinear solve.
    pub report: SolveReport,
    /// Reports of earlier stages (perspective initialisation, contour rounds).
    pub stage_reports: Vec<SolveReport>,
    pub flags: FitFlags,
    /// Mean landmark error in % of the interocular distance, when defined.
    pub landmark_error: Option<f64>,
}

impl FitResult {
    pub fn shape(&self, model: &ShapeModel) -> Result<DVector<f64>> {
        model.synthesize(&self.alpha)
    }

    pub fn projected(&self, model: &ShapeModel, landmarks: &Landmarks2D) -> Result<Vec<Vector2<f64>>> {
        project_landmarks(model, &self.alpha, &self.camera, &landmarks.indices())
    }
}

/// Landmark fit with either camera model. `fixed_tz` freezes the subject
/// distance of a perspective fit and is rejected for orthographic fits.
pub fn fit_landmarks(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    config: &FitConfig,
    kind: CameraKind,
    fixed_tz: Option<f64>,
) -> Result<FitResult> {
    match (kind, fixed_tz) {
        (CameraKind::Ortho, None) => crate::ortho::fit_landmarks_ortho(model, landmarks, config),
        (CameraKind::Ortho, Some(_)) => Err(Error::invalid("a fixed distance needs the perspective camera")),
        (CameraKind::Persp, None) => crate::persp::fit_landmarks_persp(model, landmarks, config),
        (CameraKind::Persp, Some(k)) => crate::persp::fit_landmarks_persp_fixed_tz(model, landmarks, k, config),
    }
}

pub fn project_landmarks(
    model: &ShapeModel,
    alpha: &DVector<f64>,
    camera: &Camera,
    indices: &[usize],
) -> Result<Vec<Vector2<f64>>> {
    let shape = model.synthesize(alpha)?;
    indices
        .iter()
        .map(|&i| camera.project(&vertex(&shape, i), i))
        .collect()
}

/// Interocular distance in pixels: from the observed eye landmarks when
/// both are present, otherwise from the projected eye vertices.
pub fn interocular_distance(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    alpha: &DVector<f64>,
    camera: &Camera,
) -> Result<f64> {
    let (a, b) = model
        .eye_indices()
        .ok_or_else(|| Error::invalid("model designates no eye landmarks"))?;
    let d = match (landmarks.position_of(a), landmarks.position_of(b)) {
        (Some(pa), Some(pb)) => (pa - pb).norm(),
        _ => {
            let p = project_landmarks(model, alpha, camera, &[a, b])?;
            (p[0] - p[1]).norm()
        }
    };
    if !(d > 0.0) {
        return Err(Error::invalid("interocular distance is zero"));
    }
    Ok(d)
}

/// d_L of a fit, or `None` if the model has no eye landmarks.
pub fn fit_landmark_error(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    alpha: &DVector<f64>,
    camera: &Camera,
) -> Option<f64> {
    let io = interocular_distance(model, landmarks, alpha, camera).ok()?;
    let projected = project_landmarks(model, alpha, camera, &landmarks.indices()).ok()?;
    landmark_distance(&landmarks.positions(), &projected, io).ok()
}

/// Stacked reprojection residuals `projection - observation`.
pub fn reprojection_residuals(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    alpha: &DVector<f64>,
    camera: &Camera,
) -> Result<DVector<f64>> {
    let projected = project_landmarks(model, alpha, camera, &landmarks.indices())?;
    Ok(DVector::from_iterator(
        2 * landmarks.len(),
        projected
            .iter()
            .zip(landmarks.iter())
            .flat_map(|(p, l)| [p.x - l.position.x, p.y - l.position.y]),
    ))
}
