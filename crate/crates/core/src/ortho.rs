//! Landmark fitting under scaled-orthographic projection.
//!
//! The residual `s (I (x) P R) (Q_L alpha + mean_L) + s (1 (x) I_2) t - x`
//! is linear in `(alpha, t)`. Those are eliminated by the pseudoinverse
//! and the trust-region solver works on `(r, s)` alone.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{rodrigues, rodrigues_derivatives, rotation_log, Camera, OrthoPose};
use crate::error::{Error, Result};
use crate::fit::{fit_landmark_error, reprojection_residuals, FitConfig, FitFlags, FitResult};
use crate::landmarks::Landmarks2D;
use crate::nls::{self, Bounds, Problem, SolveReport};
use crate::shapemodel::ShapeModel;
use crate::snls::{self, LinearSolve};

const P: Matrix2x3<f64> = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);

/// Apply the 2x3 block `m` to every vertex row triple of `q` (3L x n).
pub(crate) fn project_blocks(m: &Matrix2x3<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let l = q.nrows() / 3;
    let mut out = DMatrix::zeros(2 * l, q.ncols());
    for i in 0..l {
        out.fixed_rows_mut::<2>(2 * i).copy_from(&(m * q.fixed_rows::<3>(3 * i)));
    }
    out
}

pub(crate) fn project_blocks_vec(m: &Matrix2x3<f64>, v: &DVector<f64>) -> DVector<f64> {
    let l = v.len() / 3;
    let mut out = DVector::zeros(2 * l);
    for i in 0..l {
        out.fixed_rows_mut::<2>(2 * i).copy_from(&(m * v.fixed_rows::<3>(3 * i)));
    }
    out
}

/// The orthographic separable problem for one set of landmarks.
#[derive(Debug, Clone)]
pub struct OrthoProblem {
    q: DMatrix<f64>,
    mean: DVector<f64>,
    x: DVector<f64>,
    penalty: DVector<f64>,
}

impl OrthoProblem {
    pub fn new(model: &ShapeModel, landmarks: &Landmarks2D, tikhonov_weight: f64) -> Result<Self> {
        let (q, mean) = model.landmark_submatrix(&landmarks.indices())?;
        let s = model.num_modes();
        let w = tikhonov_weight.sqrt();
        let penalty = DVector::from_fn(s + 2, |j, _| if j < s { w / model.sigma()[j] } else { 0.0 });
        Ok(Self {
            q,
            mean,
            x: landmarks.stacked(),
            penalty,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.q.ncols()
    }

    /// `A(r, s)`, 2L x (S + 2).
    pub fn a(&self, r: &Vector3<f64>, s: f64) -> DMatrix<f64> {
        let pr = P * rodrigues(r);
        self.a_from(&pr) * s
    }

    fn a_from(&self, pr: &Matrix2x3<f64>) -> DMatrix<f64> {
        let l = self.x.len() / 2;
        let k = self.num_modes();
        let mut a = DMatrix::zeros(2 * l, k + 2);
        a.columns_mut(0, k).copy_from(&project_blocks(pr, &self.q));
        for i in 0..l {
            a[(2 * i, k)] = 1.0;
            a[(2 * i + 1, k + 1)] = 1.0;
        }
        a
    }

    /// `y(r, s) = x - s (I (x) P R) mean_L`, so that `A p - y` is the
    /// reprojection residual.
    pub fn y(&self, r: &Vector3<f64>, s: f64) -> DVector<f64> {
        &self.x - project_blocks_vec(&(P * rodrigues(r)), &self.mean) * s
    }

    pub fn linear(&self, r: &Vector3<f64>, s: f64) -> LinearSolve {
        snls::solve_linear(&self.a(r, s), &self.y(r, s), &self.penalty)
    }

    /// Analytic Jacobian of the reduced residual with respect to
    /// `(r1, r2, r3, s)`, together with the linear solve it linearises.
    pub fn reduced_jacobian(&self, r: &Vector3<f64>, s: f64) -> (DMatrix<f64>, LinearSolve) {
        let pr = P * rodrigues(r);
        let a_unit = self.a_from(&pr);
        let mean_proj = project_blocks_vec(&pr, &self.mean);
        let lin = snls::solve_linear(&(&a_unit * s), &(&self.x - &mean_proj * s), &self.penalty);
        let k = self.num_modes();
        let mut jac = DMatrix::zeros(self.x.len(), 4);
        for (i, dr) in rodrigues_derivatives(r).iter().enumerate() {
            let pdr = P * dr;
            let mut da = DMatrix::zeros(self.x.len(), k + 2);
            da.columns_mut(0, k).copy_from(&(project_blocks(&pdr, &self.q) * s));
            let dy = -project_blocks_vec(&pdr, &self.mean) * s;
            jac.set_column(i, &lin.residual_derivative(&da, &dy));
        }
        jac.set_column(3, &lin.residual_derivative(&a_unit, &(-mean_proj)));
        (jac, lin)
    }

    fn split(params: &DVector<f64>) -> (Vector3<f64>, f64) {
        (Vector3::new(params[0], params[1], params[2]), params[3])
    }
}

impl Problem for OrthoProblem {
    fn num_params(&self) -> usize {
        4
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let (r, s) = Self::split(p);
        if !(s > 0.0) {
            return None;
        }
        Some(self.linear(&r, s).residual)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (r, s) = Self::split(p);
        let (jac, lin) = self.reduced_jacobian(&r, s);
        (!lin.rank_deficient).then_some(jac)
    }
}

/// `A(r, s)` for raw coefficients `alpha` and model-unit `t2d`.
pub fn assemble_a(model: &ShapeModel, landmarks: &Landmarks2D, r: &Vector3<f64>, s: f64) -> Result<DMatrix<f64>> {
    Ok(OrthoProblem::new(model, landmarks, 0.0)?.a(r, s))
}

pub fn assemble_y(model: &ShapeModel, landmarks: &Landmarks2D, r: &Vector3<f64>, s: f64) -> Result<DVector<f64>> {
    Ok(OrthoProblem::new(model, landmarks, 0.0)?.y(r, s))
}

/// Optimal `(alpha, t2d)` for fixed `(r, s)`, minimising
/// `|A p - y|^2 + lambda |alpha / sigma|^2`.
pub fn solve_linear(a: &DMatrix<f64>, y: &DVector<f64>, sigma: &DVector<f64>, weight: f64) -> LinearSolve {
    let s = sigma.len();
    let w = weight.sqrt();
    let penalty = DVector::from_fn(a.ncols(), |j, _| if j < s { w / sigma[j] } else { 0.0 });
    snls::solve_linear(a, y, &penalty)
}

pub fn reduced_residual(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    r: &Vector3<f64>,
    s: f64,
    config: &FitConfig,
) -> Result<DVector<f64>> {
    Ok(OrthoProblem::new(model, landmarks, config.tikhonov_weight)?.linear(r, s).residual)
}

/// 2L x 4 Jacobian of [`reduced_residual`]; the flag is set when the linear
/// stage was rank deficient (the analytic formula then assumes locally
/// constant rank).
pub fn jacobian_ortho(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    r: &Vector3<f64>,
    s: f64,
    config: &FitConfig,
) -> Result<(DMatrix<f64>, bool)> {
    let (jac, lin) = OrthoProblem::new(model, landmarks, config.tikhonov_weight)?.reduced_jacobian(r, s);
    Ok((jac, lin.rank_deficient))
}

fn bbox_diagonal(points: impl Iterator<Item = Vector2<f64>>) -> f64 {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (hi - lo).norm()
}

/// Scale that matches the bounding-box diagonal of the rotated mean
/// landmarks to that of the observations.
pub fn initial_scale(model: &ShapeModel, landmarks: &Landmarks2D, r: &Vector3<f64>) -> Result<f64> {
    let (_, mean) = model.landmark_submatrix(&landmarks.indices())?;
    let proj = project_blocks_vec(&(P * rodrigues(r)), &mean);
    let model_diag = bbox_diagonal(proj.as_slice().chunks(2).map(|c| Vector2::new(c[0], c[1])));
    let obs_diag = bbox_diagonal(landmarks.iter().map(|l| l.position));
    if !(model_diag > 0.0) || !(obs_diag > 0.0) {
        return Err(Error::UnderDetermined(
            "landmarks span no area; cannot initialise the scale".into(),
        ));
    }
    Ok(obs_diag / model_diag)
}

pub(crate) fn check_inputs(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig, min: usize) -> Result<()> {
    config.validate()?;
    landmarks.validate_for(model)?;
    if landmarks.len() < min {
        return Err(Error::UnderDetermined(format!(
            "{} landmark(s) given, at least {min} required",
            landmarks.len()
        )));
    }
    Ok(())
}

/// Clamp raw coefficients to `|alpha_i| <= k sigma_i`; returns the count moved.
pub(crate) fn clamp_alpha(model: &ShapeModel, alpha: &mut DVector<f64>, config: &FitConfig) -> usize {
    let Some(k) = config.coeff_bound_sigmas else {
        return 0;
    };
    let mut moved = 0;
    for (a, s) in alpha.iter_mut().zip(model.sigma().iter()) {
        let c = a.clamp(-k * s, k * s);
        if c != *a {
            moved += 1;
            *a = c;
        }
    }
    moved
}

/// Best translation for fixed `(r, s, alpha)`.
fn resolve_translation(problem: &OrthoProblem, r: &Vector3<f64>, s: f64, alpha: &DVector<f64>) -> Vector2<f64> {
    let k = problem.num_modes();
    let a = problem.a(r, s);
    let rhs = problem.y(r, s) - a.columns(0, k) * alpha;
    let l = rhs.len() / 2;
    let mut t = Vector2::zeros();
    for i in 0..l {
        t += Vector2::new(rhs[2 * i], rhs[2 * i + 1]);
    }
    t / (l as f64 * s)
}

struct Attempt {
    alpha: DVector<f64>,
    pose: OrthoPose,
    report: SolveReport,
    rank_deficient: bool,
}

fn attempt(problem: &OrthoProblem, r0: Vector3<f64>, s0: f64, config: &FitConfig) -> Result<Attempt> {
    let p0 = DVector::from_vec(vec![r0.x, r0.y, r0.z, s0]);
    let mut bounds = Bounds::unbounded(4);
    bounds.lower[3] = s0 * 1e-8;
    let report = nls::solve(problem, &p0, &bounds, &config.solver)?;
    let (r, s) = OrthoProblem::split(&report.solution);
    let lin = problem.linear(&r, s);
    let k = problem.num_modes();
    let alpha = lin.coeffs.rows(0, k).into_owned();
    let t2d = Vector2::new(lin.coeffs[k], lin.coeffs[k + 1]);
    Ok(Attempt {
        alpha,
        pose: OrthoPose { rotation: r, t2d, scale: s },
        report,
        rank_deficient: lin.rank_deficient,
    })
}

fn finish(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    problem: &OrthoProblem,
    config: &FitConfig,
    mut best: Attempt,
    mut flags: FitFlags,
    stage_reports: Vec<SolveReport>,
) -> Result<FitResult> {
    flags.clamped_coefficients = clamp_alpha(model, &mut best.alpha, config);
    if flags.clamped_coefficients > 0 {
        best.pose.t2d = resolve_translation(problem, &best.pose.rotation, best.pose.scale, &best.alpha);
    }
    flags.rank_deficient |= best.rank_deficient;
    flags.finite_difference_jacobian |= best.report.used_finite_differences;
    let camera = Camera::Ortho(best.pose);
    let residuals = reprojection_residuals(model, landmarks, &best.alpha, &camera)?;
    let objective = residuals.norm_squared();
    if !objective.is_finite() {
        return Err(Error::Numeric {
            message: "non-finite objective after orthographic fit".into(),
            iterate: best.report.solution.iter().copied().collect(),
        });
    }
    Ok(FitResult {
        landmark_error: fit_landmark_error(model, landmarks, &best.alpha, &camera),
        alpha: best.alpha,
        camera,
        residuals,
        objective,
        report: best.report,
        stage_reports,
        flags,
    })
}

/// Restart rotations tried when the frontal start ends badly.
pub const RESTART_ROTATIONS: [[f64; 3]; 3] = [
    [0.0, std::f64::consts::FRAC_PI_4, 0.0],
    [0.0, -std::f64::consts::FRAC_PI_4, 0.0],
    [std::f64::consts::FRAC_PI_4, 0.0, 0.0],
];

pub fn fit_landmarks_ortho(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 2)?;
    let problem = OrthoProblem::new(model, landmarks, config.tikhonov_weight)?;
    let r0 = config.init_rotation.unwrap_or_else(Vector3::zeros);
    let mut best = attempt(&problem, r0, initial_scale(model, landmarks, &r0)?, config)?;
    let mut flags = FitFlags::default();
    if config.init_rotation.is_none() {
        if let Some(pose) = mean_shape_pose(model, landmarks)? {
            let next = attempt(&problem, pose.rotation, pose.scale, config)?;
            if next.report.objective < best.report.objective {
                best = next;
            }
        }
        // Depth reversal: the tilt-mirrored pose explains nearly the same
        // image and is a common second local minimum.
        let r = best.pose.rotation;
        let mirrored = Vector3::new(-r.x, -r.y, r.z);
        let next = attempt(&problem, mirrored, best.pose.scale, config)?;
        if next.report.objective < best.report.objective {
            best = next;
        }
        let err = fit_landmark_error(model, landmarks, &best.alpha, &Camera::Ortho(best.pose)).unwrap_or(0.0);
        if err > config.restart_threshold {
            for r in RESTART_ROTATIONS {
                let r = Vector3::from(r);
                let s0 = initial_scale(model, landmarks, &r)?;
                let next = attempt(&problem, r, s0, config)?;
                flags.restarts_used += 1;
                if next.report.objective < best.report.objective {
                    best = next;
                }
            }
        }
    }
    finish(model, landmarks, &problem, config, best, flags, Vec::new())
}

/// Closed-form pose of the mean shape's landmarks.
fn mean_shape_pose(model: &ShapeModel, landmarks: &Landmarks2D) -> Result<Option<OrthoPose>> {
    let (_, mean) = model.landmark_submatrix(&landmarks.indices())?;
    let points: Vec<Vector3<f64>> = mean.as_slice().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    Ok(sop_procrustes(&points, &landmarks.positions()).filter(|p| p.scale > 0.0 && p.rotation.iter().all(|v| v.is_finite())))
}

/// Fit starting from a known pose (no initialisation heuristics, no restarts).
pub fn fit_landmarks_ortho_from(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    config: &FitConfig,
    r0: Vector3<f64>,
    s0: f64,
) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 2)?;
    if !(s0 > 0.0) {
        return Err(Error::invalid(format!("initial scale must be positive, got {s0}")));
    }
    let problem = OrthoProblem::new(model, landmarks, config.tikhonov_weight)?;
    let best = attempt(&problem, r0, s0, config)?;
    finish(model, landmarks, &problem, config, best, FitFlags::default(), Vec::new())
}

/// Rigid pose refinement with the shape held fixed: parameters
/// `(r1, r2, r3, s, tx, ty)`, residuals `s (P R v + t) - x`.
struct PoseProblem<'a> {
    points: &'a [Vector3<f64>],
    x: &'a DVector<f64>,
}

impl Problem for PoseProblem<'_> {
    fn num_params(&self) -> usize {
        6
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let rot = rodrigues(&Vector3::new(p[0], p[1], p[2]));
        let t = Vector2::new(p[4], p[5]);
        let mut d = DVector::zeros(self.x.len());
        for (i, v) in self.points.iter().enumerate() {
            let q = (P * rot * v + t) * p[3];
            d[2 * i] = q.x - self.x[2 * i];
            d[2 * i + 1] = q.y - self.x[2 * i + 1];
        }
        Some(d)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let r = Vector3::new(p[0], p[1], p[2]);
        let pr = P * rodrigues(&r);
        let dr = rodrigues_derivatives(&r).map(|d| P * d);
        let s = p[3];
        let t = Vector2::new(p[4], p[5]);
        let mut j = DMatrix::zeros(self.x.len(), 6);
        for (i, v) in self.points.iter().enumerate() {
            for (c, d) in dr.iter().enumerate() {
                j.fixed_view_mut::<2, 1>(2 * i, c).copy_from(&(d * v * s));
            }
            j.fixed_view_mut::<2, 1>(2 * i, 3).copy_from(&(pr * v + t));
            j[(2 * i, 4)] = s;
            j[(2 * i + 1, 5)] = s;
        }
        Some(j)
    }
}

/// Closed-form scaled-orthographic pose: affine least squares followed by
/// projection of the 2x3 part onto scaled orthonormal rows.
pub fn sop_procrustes(points: &[Vector3<f64>], x: &[Vector2<f64>]) -> Option<OrthoPose> {
    let n = points.len() as f64;
    let cv = points.iter().sum::<Vector3<f64>>() / n;
    let cx = x.iter().sum::<Vector2<f64>>() / n;
    let mut vv = Matrix3::zeros();
    let mut xv = Matrix2x3::zeros();
    for (v, p) in points.iter().zip(x) {
        let a = v - cv;
        vv += a * a.transpose();
        xv += (p - cx) * a.transpose();
    }
    let m = xv * vv.try_inverse()?;
    let svd = m.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let rows = u * vt;
    let s = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    if !(s > 0.0) {
        return None;
    }
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let rot = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r1.cross(&r2).transpose()]);
    let t2d = cx / s - P * rot * cv;
    Some(OrthoPose {
        rotation: rotation_log(&rot),
        t2d,
        scale: s,
    })
}

/// Alternating baseline: pose update with the shape fixed, then the linear
/// shape-and-translation solve with the pose fixed.
pub fn fit_landmarks_ortho_als(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig) -> Result<FitResult> {
    let r0 = config.init_rotation.unwrap_or_else(Vector3::zeros);
    let s0 = initial_scale(model, landmarks, &r0)?;
    fit_landmarks_ortho_als_from(model, landmarks, config, r0, s0)
}

pub fn fit_landmarks_ortho_als_from(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    config: &FitConfig,
    r0: Vector3<f64>,
    s0: f64,
) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 2)?;
    let problem = OrthoProblem::new(model, landmarks, config.tikhonov_weight)?;
    let indices = landmarks.indices();
    let k = model.num_modes();
    let x = landmarks.stacked();
    let obs = landmarks.positions();
    let (mut r, mut s) = (r0, s0);
    let mut lin = problem.linear(&r, s);
    let mut objective = lin.penalized_objective();
    let mut trace = vec![objective];
    let mut last = None;
    let mut rounds = 0;
    let mut fd = false;
    while rounds < config.max_outer_iters {
        rounds += 1;
        let alpha = lin.coeffs.rows(0, k).into_owned();
        let shape = model.synthesize(&alpha)?;
        let points: Vec<Vector3<f64>> = indices.iter().map(|&i| crate::shapemodel::vertex(&shape, i)).collect();
        let pose_problem = PoseProblem { points: &points, x: &x };
        let current = DVector::from_vec(vec![r.x, r.y, r.z, s, lin.coeffs[k], lin.coeffs[k + 1]]);
        let mut start = current.clone();
        if let Some(c) = sop_procrustes(&points, &obs) {
            let cand = DVector::from_vec(vec![
                c.rotation.x,
                c.rotation.y,
                c.rotation.z,
                c.scale,
                c.t2d.x,
                c.t2d.y,
            ]);
            let f = |p: &DVector<f64>| pose_problem.residuals(p).map_or(f64::INFINITY, |d| d.norm_squared());
            if f(&cand) < f(&current) {
                start = cand;
            }
        }
        let mut bounds = Bounds::unbounded(6);
        bounds.lower[3] = start[3] * 1e-8;
        let report = nls::solve(&pose_problem, &start, &bounds, &config.solver)?;
        fd |= report.used_finite_differences;
        r = Vector3::new(report.solution[0], report.solution[1], report.solution[2]);
        s = report.solution[3];
        lin = problem.linear(&r, s);
        let next = lin.penalized_objective();
        trace.push(next);
        let change = (objective - next).abs() / objective.max(f64::MIN_POSITIVE);
        objective = next;
        last = Some(report);
        if change < 1e-10 || next == 0.0 {
            break;
        }
    }
    let mut report = last.unwrap_or_else(|| SolveReport {
        solution: DVector::from_vec(vec![r.x, r.y, r.z, s]),
        residuals: lin.residual.clone(),
        objective: lin.residual.norm_squared(),
        iterations: 0,
        accepted: 0,
        termination: nls::Termination::ObjectiveChange,
        trace: Vec::new(),
        iterates: Vec::new(),
        used_finite_differences: false,
    });
    report.iterations = rounds;
    report.trace = trace;
    let best = Attempt {
        alpha: lin.coeffs.rows(0, k).into_owned(),
        pose: OrthoPose {
            rotation: r,
            t2d: Vector2::new(lin.coeffs[k], lin.coeffs[k + 1]),
            scale: s,
        },
        report,
        rank_deficient: lin.rank_deficient,
    };
    let flags = FitFlags {
        finite_difference_jacobian: fd,
        ..FitFlags::default()
    };
    finish(model, landmarks, &problem, config, best, flags, Vec::new())
}
