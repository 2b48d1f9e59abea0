//! Synthetic experiments on a shape model: how far perspective landmarks are
//! from orthographic ones, how well shapes fitted at the wrong distance still
//! explain the data, how biased distance estimates are, and how the separable
//! solver compares with alternating least squares.
//!
//! Every row is a deterministic function of its inputs and seed, so tables
//! are identical whether rows are computed sequentially or in parallel.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{rodrigues, rodrigues_derivative, Camera, OrthoPose, PerspCamera};
use crate::error::{Error, Result};
use crate::fit::{project_landmarks, FitConfig};
use crate::landmarks::{fmt_f64, Landmarks2D};
use crate::metrics::{landmark_distance, surface_distance};
use crate::nls::check_jacobian;
use crate::par::Exec;
use crate::sampling::{observe, sample_alpha, sample_rotation};
use crate::shapemodel::ShapeModel;
use crate::{ortho, persp};

/// Projected interocular distance (pixels) every experiment camera is scaled to.
pub const INTEROCULAR_PX: f64 = 200.0;

/// Coefficient range, in standard deviations, of sampled faces.
pub const FACE_RANGE_SIGMAS: f64 = 2.0;

/// Faces drawn with seeds `base, base + 1, …`.
pub fn sample_faces(model: &ShapeModel, count: usize, base_seed: u64) -> Vec<DVector<f64>> {
    (0..count as u64)
        .map(|i| sample_alpha(model, &mut ChaCha8Rng::seed_from_u64(base_seed + i), FACE_RANGE_SIGMAS))
        .collect()
}

fn eye_indices(model: &ShapeModel) -> Result<(usize, usize)> {
    model
        .eye_indices()
        .ok_or_else(|| Error::invalid("model designates no eye landmarks"))
}

/// Frontal camera at distance `tz`, principal point at the origin, whose
/// focal length puts the eyes of `alpha` exactly `interocular_px` apart.
pub fn normalized_camera(model: &ShapeModel, alpha: &DVector<f64>, tz: f64, interocular_px: f64) -> Result<PerspCamera> {
    let unit = PerspCamera::new(Vector3::zeros(), Vector3::new(0.0, 0.0, tz), 1.0, Vector2::zeros())?;
    let (a, b) = eye_indices(model)?;
    let p = project_landmarks(model, alpha, &Camera::Persp(unit), &[a, b])?;
    let gap = (p[0] - p[1]).norm();
    if !(gap > 0.0) {
        return Err(Error::invalid("eye vertices coincide in the image"));
    }
    PerspCamera::new(unit.rotation, unit.t3d, interocular_px / gap, Vector2::zeros())
}

/// Frontal orthographic pose with the eyes of `alpha` `interocular_px` apart.
pub fn normalized_pose(model: &ShapeModel, alpha: &DVector<f64>, interocular_px: f64) -> Result<OrthoPose> {
    let unit = OrthoPose::new(Vector3::zeros(), Vector2::zeros(), 1.0)?;
    let (a, b) = eye_indices(model)?;
    let p = project_landmarks(model, alpha, &Camera::Ortho(unit), &[a, b])?;
    let gap = (p[0] - p[1]).norm();
    if !(gap > 0.0) {
        return Err(Error::invalid("eye vertices coincide in the image"));
    }
    OrthoPose::new(unit.rotation, unit.t2d, interocular_px / gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub face: usize,
    pub distance: f64,
    /// d_L (% interocular) between perspective and orthographic landmarks.
    pub landmark_error: f64,
}

/// For each face and distance, d_L between the perspective projection
/// (interocular distance normalised) and the orthographic projection.
pub fn persp_vs_ortho_sweep(
    model: &ShapeModel,
    alphas: &[DVector<f64>],
    distances: &[f64],
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid(format!("distances must be positive, got {d}")));
    }
    let indices = model.landmark_indices().to_vec();
    let jobs: Vec<(usize, f64)> = (0..alphas.len())
        .flat_map(|f| distances.iter().map(move |&d| (f, d)))
        .collect();
    exec.map(&jobs, |&(face, distance)| {
        let alpha = &alphas[face];
        let pose = normalized_pose(model, alpha, INTEROCULAR_PX)?;
        let cam = normalized_camera(model, alpha, distance, INTEROCULAR_PX)?;
        let ortho = project_landmarks(model, alpha, &Camera::Ortho(pose), &indices)?;
        let persp = project_landmarks(model, alpha, &Camera::Persp(cam), &indices)?;
        Ok(SweepRow {
            face,
            distance,
            landmark_error: landmark_distance(&persp, &ortho, INTEROCULAR_PX)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: &mut W) -> Result<()> {
    writeln!(w, "face,distance_m,d_l_pct")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.face, fmt_f64(r.distance), fmt_f64(r.landmark_error))?;
    }
    Ok(())
}

/// Distance used for a fit: a fixed perspective `t_z`, or the orthographic pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitDistance {
    Metres(f64),
    Ortho,
}

impl fmt::Display for FitDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitDistance::Metres(d) => write!(f, "{}", fmt_f64(*d)),
            FitDistance::Ortho => f.write_str("ortho"),
        }
    }
}

impl FromStr for FitDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("ortho") {
            return Ok(FitDistance::Ortho);
        }
        let d: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("expected a distance in metres or 'ortho', got '{s}'")))?;
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("distances must be positive, got {d}")));
        }
        Ok(FitDistance::Metres(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityCell {
    pub gen_distance: f64,
    pub fit_distance: FitDistance,
    /// Per-face `(d_L %, d_S metres)`, in face order.
    pub per_face: Vec<(f64, f64)>,
}

impl AmbiguityCell {
    pub fn mean_landmark_error(&self) -> f64 {
        self.per_face.iter().map(|c| c.0).sum::<f64>() / self.per_face.len() as f64
    }

    pub fn mean_surface_error(&self) -> f64 {
        self.per_face.iter().map(|c| c.1).sum::<f64>() / self.per_face.len() as f64
    }
}

/// Landmarks of `alpha` seen frontally from `distance`, with optional noise
/// drawn from `seed`.
fn frontal_landmarks(model: &ShapeModel, alpha: &DVector<f64>, distance: f64, noise_px: f64, seed: u64) -> Result<Landmarks2D> {
    let cam = normalized_camera(model, alpha, distance, INTEROCULAR_PX)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    observe(model, alpha, &Camera::Persp(cam), model.landmark_indices(), noise_px, &mut rng)
}

/// Cell `(i, j)` fits data generated at `gen[i]` with the distance fixed at
/// `fit[j]` (or orthographically) and averages d_L and d_S over the faces.
/// Cells are returned row-major.
pub fn ambiguity_table(
    model: &ShapeModel,
    alphas: &[DVector<f64>],
    gen_distances: &[f64],
    fit_distances: &[FitDistance],
    noise_px: f64,
    config: &FitConfig,
    exec: Exec,
) -> Result<Vec<AmbiguityCell>> {
    if alphas.is_empty() {
        return Err(Error::invalid("no faces to fit"));
    }
    if let Some(d) = gen_distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid(format!("distances must be positive, got {d}")));
    }
    let mut config = config.clone();
    config.principal_point = Vector2::zeros();
    let jobs: Vec<(usize, usize, usize)> = (0..gen_distances.len())
        .flat_map(|g| (0..fit_distances.len()).flat_map(move |f| (0..alphas.len()).map(move |a| (g, f, a))))
        .collect();
    let results = exec.map(&jobs, |&(g, f, a)| -> Result<(f64, f64)> {
        let alpha = &alphas[a];
        let landmarks = frontal_landmarks(model, alpha, gen_distances[g], noise_px, a as u64)?;
        let fit = match fit_distances[f] {
            FitDistance::Metres(k) => persp::fit_landmarks_persp_fixed_tz(model, &landmarks, k, &config)?,
            FitDistance::Ortho => ortho::fit_landmarks_ortho(model, &landmarks, &config)?,
        };
        let d_l = fit
            .landmark_error
            .ok_or_else(|| Error::invalid("model designates no eye landmarks"))?;
        let d_s = surface_distance(&fit.shape(model)?, &model.synthesize(alpha)?)?;
        Ok((d_l, d_s))
    });
    let mut results = results.into_iter();
    let mut cells = Vec::with_capacity(gen_distances.len() * fit_distances.len());
    for &gen_distance in gen_distances {
        for &fit_distance in fit_distances {
            let per_face = results.by_ref().take(alphas.len()).collect::<Result<Vec<_>>>()?;
            cells.push(AmbiguityCell {
                gen_distance,
                fit_distance,
                per_face,
            });
        }
    }
    Ok(cells)
}

/// `gen_distance_m,fit_distance_m,d_l_pct,d_s_mm`, one row per cell.
pub fn write_ambiguity_csv<W: Write>(cells: &[AmbiguityCell], w: &mut W) -> Result<()> {
    writeln!(w, "gen_distance_m,fit_distance_m,d_l_pct,d_s_mm")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f64(c.gen_distance),
            c.fit_distance,
            fmt_f64(c.mean_landmark_error()),
            fmt_f64(c.mean_surface_error() * 1e3)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub face: usize,
    pub true_distance: f64,
    pub estimated_distance: f64,
    pub low_confidence: bool,
}

/// Estimate the distance of every face at every distance with a free-`t_z`
/// perspective fit started from the true rotation and focal length.
pub fn distance_bias_experiment(
    model: &ShapeModel,
    alphas: &[DVector<f64>],
    distances: &[f64],
    noise_px: f64,
    config: &FitConfig,
    exec: Exec,
) -> Result<Vec<DistanceEstimate>> {
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid(format!("distances must be positive, got {d}")));
    }
    let mut config = config.clone();
    config.principal_point = Vector2::zeros();
    let jobs: Vec<(usize, f64)> = (0..alphas.len())
        .flat_map(|f| distances.iter().map(move |&d| (f, d)))
        .collect();
    exec.map(&jobs, |&(face, distance)| {
        let alpha = &alphas[face];
        let cam = normalized_camera(model, alpha, distance, INTEROCULAR_PX)?;
        let landmarks = frontal_landmarks(model, alpha, distance, noise_px, face as u64)?;
        let mut cfg = config.clone();
        cfg.init_rotation = Some(cam.rotation);
        let fit = persp::fit_persp_from(model, &landmarks, &cfg, None, &[cam.rotation], cam.focal, None)?;
        let (estimated_distance, fit) = persp::finish_estimate(model, &landmarks, fit)?;
        Ok(DistanceEstimate {
            face,
            true_distance: distance,
            estimated_distance,
            low_confidence: fit.flags.low_confidence_distance,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_distance_csv<W: Write>(rows: &[DistanceEstimate], w: &mut W) -> Result<()> {
    writeln!(w, "face,true_distance_m,estimated_distance_m,low_confidence")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.face,
            fmt_f64(r.true_distance),
            fmt_f64(r.estimated_distance),
            u8::from(r.low_confidence)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverComparison {
    pub seed: u64,
    pub snls_objective: f64,
    pub als_objective: f64,
    /// d_S in metres.
    pub snls_surface_error: f64,
    pub als_surface_error: f64,
}

/// Seeded orthographic instance: random face, pose within ±0.5 rad yaw, and
/// Gaussian landmark noise.
pub fn ortho_instance(model: &ShapeModel, seed: u64, noise_px: f64) -> Result<(DVector<f64>, OrthoPose, Landmarks2D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = sample_alpha(model, &mut rng, FACE_RANGE_SIGMAS);
    let mut pose = normalized_pose(model, &alpha, INTEROCULAR_PX)?;
    pose.rotation = sample_rotation(&mut rng, 0.5, 0.2, 0.1);
    let landmarks = observe(model, &alpha, &Camera::Ortho(pose), model.landmark_indices(), noise_px, &mut rng)?;
    Ok((alpha, pose, landmarks))
}

/// Separable solver against alternating least squares from the same start
/// (frontal rotation, scale from the landmark spread) on seeded instances.
pub fn snls_vs_als(
    model: &ShapeModel,
    seeds: &[u64],
    noise_px: f64,
    config: &FitConfig,
    exec: Exec,
) -> Result<Vec<SolverComparison>> {
    exec.map(seeds, |&seed| {
        let (alpha, _, landmarks) = ortho_instance(model, seed, noise_px)?;
        let r0 = config.init_rotation.unwrap_or_else(Vector3::zeros);
        let s0 = ortho::initial_scale(model, &landmarks, &r0)?;
        let snls = ortho::fit_landmarks_ortho_from(model, &landmarks, config, r0, s0)?;
        let als = ortho::fit_landmarks_ortho_als_from(model, &landmarks, config, r0, s0)?;
        let truth = model.synthesize(&alpha)?;
        Ok(SolverComparison {
            seed,
            snls_objective: snls.objective,
            als_objective: als.objective,
            snls_surface_error: surface_distance(&snls.shape(model)?, &truth)?,
            als_surface_error: surface_distance(&als.shape(model)?, &truth)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_comparison_csv<W: Write>(rows: &[SolverComparison], w: &mut W) -> Result<()> {
    writeln!(w, "seed,snls_objective,als_objective,snls_d_s_mm,als_d_s_mm")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.seed,
            fmt_f64(r.snls_objective),
            fmt_f64(r.als_objective),
            fmt_f64(r.snls_surface_error * 1e3),
            fmt_f64(r.als_surface_error * 1e3)
        )?;
    }
    Ok(())
}

/// Largest finite-difference deviations found on one random instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    pub trial: usize,
    pub ortho: f64,
    pub persp_dlt: f64,
    pub rodrigues: f64,
}

impl JacobianCheck {
    pub fn max(&self) -> f64 {
        self.ortho.max(self.persp_dlt).max(self.rodrigues)
    }
}

/// Compare the analytic reduced Jacobians and rotation derivatives with
/// central differences on `trials` random instances (up to 20 landmarks,
/// noisy observations, random evaluation point). Trial `i` uses seed `seed + i`;
/// trial 0 also checks the rotation derivative at `r = 0`.
pub fn jacobian_audit(model: &ShapeModel, trials: usize, seed: u64, exec: Exec) -> Result<Vec<JacobianCheck>> {
    let count = model.landmark_indices().len().min(20);
    if count < 3 {
        return Err(Error::invalid("the model needs at least 3 landmarks"));
    }
    let idx = &model.landmark_indices()[..count];
    exec.map_range(trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let alpha = sample_alpha(model, &mut rng, FACE_RANGE_SIGMAS);
        let weight = if trial % 2 == 0 { 0.0 } else { 1e-3 };

        let pose = OrthoPose::new(sample_rotation(&mut rng, 0.8, 0.4, 0.3), Vector2::zeros(), 1500.0)?;
        let l = observe(model, &alpha, &Camera::Ortho(pose), idx, 1.0, &mut rng)?;
        let r = sample_rotation(&mut rng, 1.0, 1.0, 1.0);
        let p = DVector::from_vec(vec![r.x, r.y, r.z, rng.random_range(500.0..3000.0)]);
        let ortho = check_jacobian(&ortho::OrthoProblem::new(model, &l, weight)?, &p, 1e-4)?;

        let cam = PerspCamera::new(
            sample_rotation(&mut rng, 0.6, 0.3, 0.2),
            Vector3::new(0.0, 0.0, rng.random_range(0.4..1.5)),
            rng.random_range(500.0..2000.0),
            Vector2::zeros(),
        )?;
        let l = observe(model, &alpha, &Camera::Persp(cam), idx, 1.0, &mut rng)?;
        let r = sample_rotation(&mut rng, 0.8, 0.8, 0.8);
        let p = DVector::from_vec(vec![r.x, r.y, r.z, rng.random_range(400.0..2500.0)]);
        let dlt = persp::DltProblem::new(model, &l, Vector2::zeros(), weight, None)?;
        let persp_dlt = check_jacobian(&dlt, &p, 1e-4)?;

        let r = if trial == 0 { Vector3::zeros() } else { sample_rotation(&mut rng, 1.5, 1.5, 1.5) };
        let h = 1e-6;
        let mut rodrigues_err: f64 = 0.0;
        for i in 0..3 {
            let e = Vector3::ith(i, h);
            let fd = (rodrigues(&(r + e)) - rodrigues(&(r - e))) / (2.0 * h);
            rodrigues_err = rodrigues_err.max((rodrigues_derivative(&r, i) - fd).amax());
        }
        Ok(JacobianCheck {
            trial,
            ortho,
            persp_dlt,
            rodrigues: rodrigues_err,
        })
    })
    .into_iter()
    .collect()
}
