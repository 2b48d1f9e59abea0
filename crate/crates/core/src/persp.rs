//! Landmark fitting under perspective projection.
//!
//! Stage 1 eliminates `(alpha, t3d)` from the linear collinearity residuals
//! `[x~]x K (R v + t)` and solves for `(r, f)`. Stage 2 refines all
//! parameters against the true reprojection error, with the shape in
//! unit-variance coefficients so the coefficient bound is a cube.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector2, Vector3};

use crate::camera::{
    intrinsics, intrinsics_derivative, rodrigues, rodrigues_derivatives, skew, Camera, PerspCamera,
};
use crate::error::{Error, Result};
use crate::fit::{fit_landmark_error, reprojection_residuals, FitConfig, FitFlags, FitResult};
use crate::landmarks::{Landmark, Landmarks2D};
use crate::nls::{self, Bounds, Problem};
use crate::ortho::{check_inputs, fit_landmarks_ortho};
use crate::shapemodel::ShapeModel;
use crate::snls::{self, LinearSolve};

/// Apply the per-landmark 3x3 blocks to the row triples of `q` (3L x n).
fn apply_blocks(blocks: &[Matrix3<f64>], q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(q.nrows(), q.ncols());
    for (i, b) in blocks.iter().enumerate() {
        out.fixed_rows_mut::<3>(3 * i).copy_from(&(b * q.fixed_rows::<3>(3 * i)));
    }
    out
}

fn apply_blocks_vec(blocks: &[Matrix3<f64>], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (i, b) in blocks.iter().enumerate() {
        out.fixed_rows_mut::<3>(3 * i).copy_from(&(b * v.fixed_rows::<3>(3 * i)));
    }
    out
}

/// The separable collinearity problem over `(r1, r2, r3, f)`.
///
/// Linear parameters are `[alpha; t_x; t_y; t_z]`, or `[alpha; t_x; t_y]`
/// when the distance is fixed.
#[derive(Debug, Clone)]
pub struct DltProblem {
    q: DMatrix<f64>,
    mean: DVector<f64>,
    /// `[x_l; 1]_x` per landmark.
    d: Vec<Matrix3<f64>>,
    pp: Vector2<f64>,
    penalty: DVector<f64>,
    fixed_tz: Option<f64>,
    focal_normalized: bool,
}

impl DltProblem {
    pub fn new(
        model: &ShapeModel,
        landmarks: &Landmarks2D,
        principal_point: Vector2<f64>,
        tikhonov_weight: f64,
        fixed_tz: Option<f64>,
    ) -> Result<Self> {
        let (q, mean) = model.landmark_submatrix(&landmarks.indices())?;
        let d = landmarks
            .iter()
            .map(|l| skew(&Vector3::new(l.position.x, l.position.y, 1.0)))
            .collect();
        let s = model.num_modes();
        let nt = if fixed_tz.is_some() { 2 } else { 3 };
        let w = tikhonov_weight.sqrt();
        let penalty = DVector::from_fn(s + nt, |j, _| if j < s { w / model.sigma()[j] } else { 0.0 });
        Ok(Self {
            q,
            mean,
            d,
            pp: principal_point,
            penalty,
            fixed_tz,
            focal_normalized: false,
        })
    }

    /// Use `K(f) / f` in place of `K(f)`. Dividing every row by `f` leaves
    /// the linear optimum unchanged but removes the trivial minimum at
    /// `f -> 0`, where a depth-flattened shape at `Z = 0` zeroes the
    /// homogeneous residual.
    pub fn focal_normalized(mut self) -> Self {
        self.focal_normalized = true;
        self
    }

    fn k(&self, f: f64) -> Matrix3<f64> {
        let k = intrinsics(f, &self.pp);
        if self.focal_normalized { k / f } else { k }
    }

    fn dk(&self, f: f64) -> Matrix3<f64> {
        if self.focal_normalized {
            Matrix3::new(0.0, 0.0, -self.pp.x, 0.0, 0.0, -self.pp.y, 0.0, 0.0, -1.0) / (f * f)
        } else {
            intrinsics_derivative()
        }
    }

    fn num_modes(&self) -> usize {
        self.q.ncols()
    }

    fn num_translation(&self) -> usize {
        if self.fixed_tz.is_some() { 2 } else { 3 }
    }

    /// Full `B(r, f)` with all three translation columns.
    fn b_full(&self, k: &Matrix3<f64>, rot: &Matrix3<f64>) -> DMatrix<f64> {
        let s = self.num_modes();
        let l = self.d.len();
        let shape_blocks: Vec<Matrix3<f64>> = self.d.iter().map(|d| d * k * rot).collect();
        let mut b = DMatrix::zeros(3 * l, s + 3);
        b.columns_mut(0, s).copy_from(&apply_blocks(&shape_blocks, &self.q));
        for (i, d) in self.d.iter().enumerate() {
            b.fixed_view_mut::<3, 3>(3 * i, s).copy_from(&(d * k));
        }
        b
    }

    fn z_full(&self, k: &Matrix3<f64>, rot: &Matrix3<f64>) -> DVector<f64> {
        let blocks: Vec<Matrix3<f64>> = self.d.iter().map(|d| d * k * rot).collect();
        -apply_blocks_vec(&blocks, &self.mean)
    }

    /// Split off the fixed `t_z` column, moving its contribution into `z`.
    fn reduce(&self, b: DMatrix<f64>, z: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        match self.fixed_tz {
            None => (b, z),
            Some(k) => {
                let s = self.num_modes();
                let z = z - b.column(s + 2) * k;
                (b.remove_column(s + 2), z)
            }
        }
    }

    pub fn b(&self, r: &Vector3<f64>, f: f64) -> DMatrix<f64> {
        let (b, _) = self.reduce(self.b_full(&self.k(f), &rodrigues(r)), DVector::zeros(3 * self.d.len()));
        b
    }

    pub fn z(&self, r: &Vector3<f64>, f: f64) -> DVector<f64> {
        let k = self.k(f);
        let rot = rodrigues(r);
        self.reduce(self.b_full(&k, &rot), self.z_full(&k, &rot)).1
    }

    pub fn linear(&self, r: &Vector3<f64>, f: f64) -> LinearSolve {
        let k = self.k(f);
        let rot = rodrigues(r);
        let (b, z) = self.reduce(self.b_full(&k, &rot), self.z_full(&k, &rot));
        snls::solve_linear(&b, &z, &self.penalty)
    }

    /// Jacobian of the reduced collinearity residual in `(r1, r2, r3, f)`.
    pub fn reduced_jacobian(&self, r: &Vector3<f64>, f: f64) -> (DMatrix<f64>, LinearSolve) {
        let k = self.k(f);
        let rot = rodrigues(r);
        let lin = self.linear(r, f);
        let m = 3 * self.d.len();
        let mut jac = DMatrix::zeros(m, 4);
        for (i, dr) in rodrigues_derivatives(r).iter().enumerate() {
            let mut db = self.b_full(&k, dr);
            // translation columns do not depend on r
            db.columns_mut(self.num_modes(), 3).fill(0.0);
            let (db, dz) = self.reduce(db, self.z_full(&k, dr));
            jac.set_column(i, &lin.residual_derivative(&db, &dz));
        }
        let dk = self.dk(f);
        // B and z are linear in K, so their f-derivatives are B and z built with dK/df
        let (db, dz) = self.reduce(self.b_full(&dk, &rot), self.z_full(&dk, &rot));
        jac.set_column(3, &lin.residual_derivative(&db, &dz));
        (jac, lin)
    }

    /// `(alpha, t3d)` from a linear solve.
    fn unpack(&self, lin: &LinearSolve) -> (DVector<f64>, Vector3<f64>) {
        let s = self.num_modes();
        let c = &lin.coeffs;
        let t = match self.fixed_tz {
            Some(k) => Vector3::new(c[s], c[s + 1], k),
            None => Vector3::new(c[s], c[s + 1], c[s + 2]),
        };
        (c.rows(0, s).into_owned(), t)
    }

    /// Best translation for fixed `(r, f, alpha)`.
    fn translation_for(&self, r: &Vector3<f64>, f: f64, alpha: &DVector<f64>) -> Vector3<f64> {
        let s = self.num_modes();
        let b = self.b(r, f);
        let z = self.z(r, f) - b.columns(0, s) * alpha;
        let nt = self.num_translation();
        let lin = snls::solve_linear(&b.columns(s, nt).into_owned(), &z, &DVector::zeros(nt));
        match self.fixed_tz {
            Some(k) => Vector3::new(lin.coeffs[0], lin.coeffs[1], k),
            None => Vector3::new(lin.coeffs[0], lin.coeffs[1], lin.coeffs[2]),
        }
    }
}

impl Problem for DltProblem {
    fn num_params(&self) -> usize {
        4
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        if !(p[3] > 0.0) {
            return None;
        }
        Some(self.linear(&Vector3::new(p[0], p[1], p[2]), p[3]).residual)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (jac, lin) = self.reduced_jacobian(&Vector3::new(p[0], p[1], p[2]), p[3]);
        (!lin.rank_deficient).then_some(jac)
    }
}

/// `B(r, f)`, 3L x (S + 3), for raw coefficients and `t3d`.
pub fn assemble_b(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    r: &Vector3<f64>,
    f: f64,
    principal_point: Vector2<f64>,
) -> Result<DMatrix<f64>> {
    Ok(DltProblem::new(model, landmarks, principal_point, 0.0, None)?.b(r, f))
}

pub fn assemble_z(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    r: &Vector3<f64>,
    f: f64,
    principal_point: Vector2<f64>,
) -> Result<DVector<f64>> {
    Ok(DltProblem::new(model, landmarks, principal_point, 0.0, None)?.z(r, f))
}

/// 3L x 4 Jacobian of the reduced collinearity residual; the flag reports a
/// rank-deficient linear stage.
pub fn jacobian_persp_dlt(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    r: &Vector3<f64>,
    f: f64,
    config: &FitConfig,
) -> Result<(DMatrix<f64>, bool)> {
    let p = DltProblem::new(model, landmarks, config.principal_point, config.tikhonov_weight, None)?;
    let (jac, lin) = p.reduced_jacobian(r, f);
    Ok((jac, lin.rank_deficient))
}

/// Reprojection problem over `[r (3), t3d (3), f, beta (S)]`.
pub struct ReprojectionProblem {
    /// Landmark rows of the sigma-scaled basis, 3L x S.
    q: DMatrix<f64>,
    mean: DVector<f64>,
    x: Vec<Vector2<f64>>,
    pp: Vector2<f64>,
    reg: f64,
}

impl ReprojectionProblem {
    pub fn new(model: &ShapeModel, landmarks: &Landmarks2D, principal_point: Vector2<f64>, tikhonov_weight: f64) -> Result<Self> {
        let (q, mean) = model.landmark_submatrix(&landmarks.indices())?;
        Ok(Self {
            q: q * DMatrix::from_diagonal(model.sigma()),
            mean,
            x: landmarks.positions(),
            pp: principal_point,
            reg: tikhonov_weight.sqrt(),
        })
    }

    fn num_modes(&self) -> usize {
        self.q.ncols()
    }

    fn points(&self, beta: &DVector<f64>) -> Matrix3xX<f64> {
        let v = &self.mean + &self.q * beta;
        Matrix3xX::from_column_slice(v.as_slice())
    }

    pub fn pack(cam: &PerspCamera, beta: &DVector<f64>) -> DVector<f64> {
        let mut p = DVector::zeros(7 + beta.len());
        p.fixed_rows_mut::<3>(0).copy_from(&cam.rotation);
        p.fixed_rows_mut::<3>(3).copy_from(&cam.t3d);
        p[6] = cam.focal;
        p.rows_mut(7, beta.len()).copy_from(beta);
        p
    }

    pub fn unpack(&self, p: &DVector<f64>) -> (PerspCamera, DVector<f64>) {
        let cam = PerspCamera {
            rotation: p.fixed_rows::<3>(0).into_owned(),
            t3d: p.fixed_rows::<3>(3).into_owned(),
            focal: p[6],
            principal_point: self.pp,
        };
        (cam, p.rows(7, self.num_modes()).into_owned())
    }

    /// Pure reprojection residuals (no regularisation rows).
    pub fn data_residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let (cam, beta) = self.unpack(p);
        let rot = rodrigues(&cam.rotation);
        let pts = self.points(&beta);
        let mut d = DVector::zeros(2 * self.x.len());
        for (i, x) in self.x.iter().enumerate() {
            let c = rot * pts.column(i) + cam.t3d;
            if !(c.z > 0.0) {
                return None;
            }
            d[2 * i] = cam.focal * c.x / c.z + self.pp.x - x.x;
            d[2 * i + 1] = cam.focal * c.y / c.z + self.pp.y - x.y;
        }
        Some(d)
    }
}

impl Problem for ReprojectionProblem {
    fn num_params(&self) -> usize {
        7 + self.num_modes()
    }

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let d = self.data_residuals(p)?;
        if self.reg == 0.0 {
            return Some(d);
        }
        let s = self.num_modes();
        let mut out = DVector::zeros(d.len() + s);
        out.rows_mut(0, d.len()).copy_from(&d);
        out.rows_mut(d.len(), s).copy_from(&(p.rows(7, s) * self.reg));
        Some(out)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (cam, beta) = self.unpack(p);
        let s = self.num_modes();
        let rot = rodrigues(&cam.rotation);
        let drs = rodrigues_derivatives(&cam.rotation);
        let pts = self.points(&beta);
        let l = self.x.len();
        let extra = if self.reg == 0.0 { 0 } else { s };
        let mut j = DMatrix::zeros(2 * l + extra, 7 + s);
        let f = cam.focal;
        for i in 0..l {
            let v = pts.column(i).into_owned();
            let c = rot * v + cam.t3d;
            if !(c.z > 0.0) {
                return None;
            }
            let iz = 1.0 / c.z;
            // d(projection)/d(camera point), 2x3
            let dp = nalgebra::Matrix2x3::new(f * iz, 0.0, -f * c.x * iz * iz, 0.0, f * iz, -f * c.y * iz * iz);
            for (k, dr) in drs.iter().enumerate() {
                j.fixed_view_mut::<2, 1>(2 * i, k).copy_from(&(dp * (dr * v)));
            }
            j.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&dp);
            j[(2 * i, 6)] = c.x * iz;
            j[(2 * i + 1, 6)] = c.y * iz;
            let qi = self.q.fixed_rows::<3>(3 * i);
            j.view_mut((2 * i, 7), (2, s)).copy_from(&(dp * rot * qi));
        }
        for k in 0..extra {
            j[(2 * l + k, 7 + k)] = self.reg;
        }
        Some(j)
    }
}

/// Landmarks relative to the principal point, for the orthographic
/// initialisation.
fn centred(landmarks: &Landmarks2D, pp: &Vector2<f64>) -> Landmarks2D {
    Landmarks2D::new(
        landmarks
            .iter()
            .map(|l| Landmark {
                vertex: l.vertex,
                position: l.position - pp,
            })
            .collect(),
    )
    .expect("shifting keeps landmarks valid")
}

pub fn fit_landmarks_persp(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig) -> Result<FitResult> {
    fit_persp(model, landmarks, config, None)
}

/// Perspective fit with the subject distance frozen at `k` metres.
pub fn fit_landmarks_persp_fixed_tz(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    k: f64,
    config: &FitConfig,
) -> Result<FitResult> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::invalid(format!("fixed distance must be positive, got {k}")));
    }
    fit_persp(model, landmarks, config, Some(k))
}

fn fit_persp(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig, fixed_tz: Option<f64>) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 4)?;
    let ortho = fit_landmarks_ortho(model, &centred(landmarks, &config.principal_point), config)?;
    let Camera::Ortho(pose) = ortho.camera else {
        unreachable!("orthographic fit returns an orthographic pose")
    };
    let k0 = fixed_tz.unwrap_or(config.initial_distance);
    let fallback = (ortho.alpha.clone(), Vector3::new(pose.t2d.x, pose.t2d.y, k0));
    let mut starts = vec![pose.rotation];
    if config.init_rotation.is_none() {
        let r = pose.rotation;
        starts.push(Vector3::new(-r.x, -r.y, r.z));
        starts.push(Vector3::zeros());
        starts.extend(crate::ortho::RESTART_ROTATIONS.iter().map(|r| Vector3::from(*r)));
    }
    let mut result = fit_persp_from(model, landmarks, config, fixed_tz, &starts, pose.scale * k0, Some(fallback))?;
    result.flags.restarts_used += ortho.flags.restarts_used;
    result.stage_reports.insert(0, ortho.report);
    Ok(result)
}

struct Candidate {
    rot: Vector3<f64>,
    t: Vector3<f64>,
    focal: f64,
    alpha: DVector<f64>,
    rank_deficient: bool,
    /// Regularised reprojection objective at the start.
    score: f64,
    report: Option<nls::SolveReport>,
}

/// Both stages from a focal length and one or more starting rotations. `fallback` supplies
/// `(alpha, t3d)` for stage 2 if stage 1 ends with a landmark behind the
/// camera.
pub fn fit_persp_from(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    config: &FitConfig,
    fixed_tz: Option<f64>,
    starts: &[Vector3<f64>],
    f0: f64,
    fallback: Option<(DVector<f64>, Vector3<f64>)>,
) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 4)?;
    let r0 = *starts.first().ok_or_else(|| Error::invalid("no starting rotation"))?;
    if !(f0 > 0.0) || !f0.is_finite() {
        return Err(Error::invalid(format!("initial focal length must be positive, got {f0}")));
    }
    let pp = config.principal_point;
    let dlt = DltProblem::new(model, landmarks, pp, config.tikhonov_weight, fixed_tz)?.focal_normalized();
    let reproj = ReprojectionProblem::new(model, landmarks, pp, config.tikhonov_weight)?;
    let clamp = |alpha: &mut DVector<f64>| crate::ortho::clamp_alpha(model, alpha, config);
    let score = |rot: &Vector3<f64>, t: &Vector3<f64>, f: f64, alpha: &DVector<f64>| {
        let cam = PerspCamera { rotation: *rot, t3d: *t, focal: f, principal_point: pp };
        reproj
            .residuals(&ReprojectionProblem::pack(&cam, &model.normalize(alpha)))
            .map(|r| r.norm_squared())
    };

    let mut bounds = Bounds::unbounded(4);
    bounds.lower[3] = f0 * 1e-8;
    let mut candidates = Vec::new();
    let mut stage1_best: Option<nls::SolveReport> = None;
    for (i, r) in starts.iter().enumerate() {
        if starts[..i].contains(r) {
            continue;
        }
        let p0 = DVector::from_vec(vec![r.x, r.y, r.z, f0]);
        let report = nls::solve(&dlt, &p0, &bounds, &config.solver)?;
        let rot = Vector3::new(report.solution[0], report.solution[1], report.solution[2]);
        let f = report.solution[3];
        let lin = dlt.linear(&rot, f);
        let (mut alpha, mut t) = dlt.unpack(&lin);
        if clamp(&mut alpha) > 0 {
            t = dlt.translation_for(&rot, f, &alpha);
        }
        if let Some(score) = score(&rot, &t, f, &alpha) {
            candidates.push(Candidate {
                rot,
                t,
                focal: f,
                alpha,
                rank_deficient: lin.rank_deficient,
                score,
                report: Some(report.clone()),
            });
        }
        if stage1_best.as_ref().is_none_or(|b| report.objective < b.objective) {
            stage1_best = Some(report);
        }
    }
    if let Some((mut alpha, t)) = fallback {
        clamp(&mut alpha);
        if let Some(score) = score(&r0, &t, f0, &alpha) {
            candidates.push(Candidate {
                rot: r0,
                t,
                focal: f0,
                alpha,
                rank_deficient: false,
                score,
                report: None,
            });
        }
    }
    // Stage 2 runs from the start closest to the reprojection optimum and
    // from the best collinearity fit; neither ranking is reliable alone.
    let by_score = (0..candidates.len()).min_by(|&i, &j| candidates[i].score.total_cmp(&candidates[j].score));
    let by_dlt = (0..candidates.len())
        .filter(|&i| candidates[i].report.is_some())
        .min_by(|&i, &j| {
            let obj = |k: usize| candidates[k].report.as_ref().map_or(f64::INFINITY, |r| r.objective);
            obj(i).total_cmp(&obj(j))
        });
    let Some(first) = by_score else {
        return Err(Error::Fit("no initial camera places every landmark in front of the camera".into()));
    };
    let mut chosen = vec![first];
    if let Some(i) = by_dlt.filter(|&i| i != first) {
        chosen.push(i);
    }

    let s = model.num_modes();
    let mut best: Option<(nls::SolveReport, &Candidate)> = None;
    for &i in &chosen {
        let c = &candidates[i];
        let start_cam = PerspCamera {
            rotation: c.rot,
            t3d: c.t,
            focal: c.focal,
            principal_point: pp,
        };
        let mut stage2_bounds = Bounds::unbounded(7 + s);
        stage2_bounds.lower[6] = c.focal * 1e-8;
        match fixed_tz {
            Some(k) => {
                stage2_bounds.lower[5] = k;
                stage2_bounds.upper[5] = k;
            }
            None => stage2_bounds.lower[5] = c.t.z.abs() * 1e-8,
        }
        if let Some(kb) = config.coeff_bound_sigmas {
            for j in 0..s {
                stage2_bounds.lower[7 + j] = -kb;
                stage2_bounds.upper[7 + j] = kb;
            }
        }
        let start = stage2_bounds.clamp(&ReprojectionProblem::pack(&start_cam, &model.normalize(&c.alpha)));
        let stage2 = nls::solve(&reproj, &start, &stage2_bounds, &config.solver)?;
        if best.as_ref().is_none_or(|(b, _)| stage2.objective < b.objective) {
            best = Some((stage2, c));
        }
    }
    let (stage2, c) = best.expect("at least one stage-2 start");
    let stage1 = c.report.clone().or(stage1_best).expect("at least one start");
    let flags = FitFlags {
        rank_deficient: c.rank_deficient,
        finite_difference_jacobian: stage1.used_finite_differences || stage2.used_finite_differences,
        ..FitFlags::default()
    };
    let (cam, beta) = reproj.unpack(&stage2.solution);
    let alpha = model.denormalize(&beta);
    let camera = Camera::Persp(cam);
    let residuals = reprojection_residuals(model, landmarks, &alpha, &camera)?;
    let objective = residuals.norm_squared();
    Ok(FitResult {
        landmark_error: fit_landmark_error(model, landmarks, &alpha, &camera),
        alpha,
        camera,
        residuals,
        objective,
        report: stage2,
        stage_reports: vec![stage1],
        flags,
    })
}

/// Refine all perspective parameters from a complete starting point.
pub fn refine_persp(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    config: &FitConfig,
    fixed_tz: Option<f64>,
    camera: &PerspCamera,
    alpha: &DVector<f64>,
) -> Result<FitResult> {
    check_inputs(model, landmarks, config, 4)?;
    let mut cam = *camera;
    cam.principal_point = config.principal_point;
    if let Some(k) = fixed_tz {
        cam.t3d.z = k;
    }
    let reproj = ReprojectionProblem::new(model, landmarks, cam.principal_point, config.tikhonov_weight)?;
    let s = model.num_modes();
    let mut bounds = Bounds::unbounded(7 + s);
    bounds.lower[6] = cam.focal * 1e-8;
    match fixed_tz {
        Some(k) => {
            bounds.lower[5] = k;
            bounds.upper[5] = k;
        }
        None => bounds.lower[5] = cam.t3d.z.abs() * 1e-8,
    }
    if let Some(kb) = config.coeff_bound_sigmas {
        for j in 0..s {
            bounds.lower[7 + j] = -kb;
            bounds.upper[7 + j] = kb;
        }
    }
    let start = bounds.clamp(&ReprojectionProblem::pack(&cam, &model.normalize(alpha)));
    if reproj.data_residuals(&start).is_none() {
        return Err(Error::Fit("starting camera puts a landmark behind the camera".into()));
    }
    let report = nls::solve(&reproj, &start, &bounds, &config.solver)?;
    let (cam, beta) = reproj.unpack(&report.solution);
    let alpha = model.denormalize(&beta);
    let camera = Camera::Persp(cam);
    let residuals = reprojection_residuals(model, landmarks, &alpha, &camera)?;
    Ok(FitResult {
        landmark_error: fit_landmark_error(model, landmarks, &alpha, &camera),
        objective: residuals.norm_squared(),
        alpha,
        camera,
        residuals,
        flags: FitFlags {
            finite_difference_jacobian: report.used_finite_differences,
            ..FitFlags::default()
        },
        report,
        stage_reports: Vec::new(),
    })
}

/// Root-mean-square landmark shift (pixels) caused by a 10% change of the
/// distance once every other parameter has re-adjusted, from the local
/// Gauss-Newton model of the stage-2 objective.
pub fn distance_sensitivity(model: &ShapeModel, landmarks: &Landmarks2D, fit: &FitResult) -> Result<f64> {
    let Camera::Persp(cam) = fit.camera else {
        return Err(Error::invalid("distance sensitivity needs a perspective fit"));
    };
    let reproj = ReprojectionProblem::new(model, landmarks, cam.principal_point, 0.0)?;
    let p = ReprojectionProblem::pack(&cam, &model.normalize(&fit.alpha));
    let j = reproj
        .jacobian(&p)
        .ok_or_else(|| Error::Fit("fitted camera puts a landmark behind the camera".into()))?;
    let jt = j.column(5).into_owned();
    let mut others = j.remove_column(5);
    for mut c in others.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let pinv = snls::pseudoinverse(&others).matrix;
    let orth = &jt - &others * (pinv * &jt);
    Ok(orth.norm() * 0.1 * cam.t3d.z / (landmarks.len() as f64).sqrt())
}

/// Below this RMS pixel shift for a 10% distance change the distance
/// estimate is flagged as poorly constrained.
pub const DISTANCE_CONFIDENCE_PX: f64 = 0.1;

/// Unconstrained perspective fit; returns its `t_z` and flags weakly
/// constrained estimates.
pub fn estimate_distance(model: &ShapeModel, landmarks: &Landmarks2D, config: &FitConfig) -> Result<(f64, FitResult)> {
    let fit = fit_landmarks_persp(model, landmarks, config)?;
    finish_estimate(model, landmarks, fit)
}

pub(crate) fn finish_estimate(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    mut fit: FitResult,
) -> Result<(f64, FitResult)> {
    let Camera::Persp(cam) = fit.camera else {
        unreachable!("perspective fit returns a perspective camera")
    };
    let sens = distance_sensitivity(model, landmarks, &fit)?;
    fit.flags.low_confidence_distance = !(sens >= DISTANCE_CONFIDENCE_PX);
    Ok((cam.t3d.z, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{dlt_rows, pinhole_project};
    use crate::nls::check_jacobian;
    use crate::sampling::{frontal_camera, observe, sample_alpha, sample_rotation};
    use crate::shapemodel::tests::toy_model;
    use crate::shapemodel::{make_synthetic_model, vertex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> PerspCamera {
        PerspCamera::new(
            sample_rotation(rng, 0.6, 0.3, 0.2),
            Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.4..1.5)),
            rng.random_range(500.0..2000.0),
            Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
        )
        .unwrap()
    }

    #[test]
    fn single_landmark_block_at_origin() {
        let m = toy_model();
        let l = Landmarks2D::from_pairs(&[1], &[Vector2::zeros()]).unwrap();
        let b = assemble_b(&m, &l, &Vector3::zeros(), 1.0, Vector2::zeros()).unwrap();
        let e3 = skew(&Vector3::z());
        let q1 = m.basis().fixed_rows::<3>(3).into_owned();
        assert!((b.columns(0, 2) - e3 * q1).amax() < 1e-15);
        assert!((b.fixed_view::<3, 3>(0, 2) - e3).amax() < 1e-15);
    }

    #[test]
    fn linear_form_matches_collinearity_rows() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let idx = [3usize, 0, 2];
            let pts: Vec<_> = idx
                .iter()
                .map(|_| Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)))
                .collect();
            let l = Landmarks2D::from_pairs(&idx, &pts).unwrap();
            let cam = random_camera(&mut rng);
            let alpha = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let b = assemble_b(&m, &l, &cam.rotation, cam.focal, cam.principal_point).unwrap();
            let z = assemble_z(&m, &l, &cam.rotation, cam.focal, cam.principal_point).unwrap();
            let p = DVector::from_vec(vec![alpha[0], alpha[1], cam.t3d.x, cam.t3d.y, cam.t3d.z]);
            let lin = b * p - z;
            let shape = m.synthesize(&alpha).unwrap();
            for (j, lm) in l.iter().enumerate() {
                let oracle = dlt_rows(&lm.position, &cam, &vertex(&shape, lm.vertex));
                assert!((lin.fixed_rows::<3>(3 * j) - oracle).amax() < 1e-9 * oracle.amax().max(1.0));
            }
        }
    }

    #[test]
    fn z_vanishes_for_zero_mean_and_matches_mean_rows() {
        let m = toy_model();
        let l = Landmarks2D::from_pairs(&[0, 1], &[Vector2::new(1.0, 2.0), Vector2::new(-3.0, 0.5)]).unwrap();
        let cam = PerspCamera::new(Vector3::new(0.1, 0.2, 0.3), Vector3::zeros() + Vector3::z(), 800.0, Vector2::zeros()).unwrap();
        let z = assemble_z(&m, &l, &cam.rotation, cam.focal, cam.principal_point).unwrap();
        // at alpha = 0, t = 0: residual B*0 - z = -z equals the collinearity rows
        let no_t = PerspCamera { t3d: Vector3::zeros(), ..cam };
        for (j, lm) in l.iter().enumerate() {
            let oracle = dlt_rows(&lm.position, &no_t, &vertex(m.mean(), lm.vertex));
            assert!((-z.fixed_rows::<3>(3 * j) - oracle).amax() < 1e-9);
        }
        let zero = ShapeModel::new(
            DVector::zeros(12),
            m.basis().clone(),
            m.sigma().clone(),
            vec![],
            m.topology().clone(),
        )
        .unwrap();
        assert_eq!(assemble_z(&zero, &l, &cam.rotation, cam.focal, cam.principal_point).unwrap().amax(), 0.0);
    }

    #[test]
    fn doubling_focal_scales_only_focal_rows() {
        let m = toy_model();
        let l = Landmarks2D::from_pairs(&[0, 2], &[Vector2::new(1.0, 2.0), Vector2::new(-3.0, 0.5)]).unwrap();
        let r = Vector3::new(0.2, -0.1, 0.4);
        let b1 = assemble_b(&m, &l, &r, 1.0, Vector2::zeros()).unwrap();
        let b2 = assemble_b(&m, &l, &r, 2.0, Vector2::zeros()).unwrap();
        // with c = 0, K(f) = diag(f, f, 1): B(2) - B(1) = B(1) - B(0)
        let b0 = assemble_b(&m, &l, &r, 1e-300, Vector2::zeros()).unwrap();
        assert!(((&b2 - &b1) - (&b1 - &b0)).amax() < 1e-12);
    }

    #[test]
    fn dlt_jacobian_matches_finite_differences() {
        let m = make_synthetic_model(11, 100, 10, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx: Vec<usize> = m.landmark_indices()[..20].to_vec();
        for trial in 0..20 {
            let alpha = sample_alpha(&m, &mut rng, 2.0);
            let cam = random_camera(&mut rng);
            let l = observe(&m, &alpha, &Camera::Persp(cam), &idx, 1.0, &mut rng).unwrap();
            let weight = if trial % 2 == 0 { 0.0 } else { 1e-3 };
            let fixed = if trial % 3 == 0 { Some(0.8) } else { None };
            let mut p = DltProblem::new(&m, &l, cam.principal_point, weight, fixed).unwrap();
            if trial % 4 == 1 {
                p = p.focal_normalized();
            }
            let r = sample_rotation(&mut rng, 0.8, 0.8, 0.8);
            let x = DVector::from_vec(vec![r.x, r.y, r.z, rng.random_range(400.0..2500.0)]);
            let err = check_jacobian(&p, &x, 1e-4).unwrap();
            assert!(err < 1e-5, "trial {trial}: {err}");
        }
    }

    #[test]
    fn reprojection_jacobian_matches_finite_differences() {
        let m = make_synthetic_model(12, 100, 8, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx: Vec<usize> = m.landmark_indices()[..20].to_vec();
        for trial in 0..10 {
            let alpha = sample_alpha(&m, &mut rng, 2.0);
            let cam = random_camera(&mut rng);
            let l = observe(&m, &alpha, &Camera::Persp(cam), &idx, 1.0, &mut rng).unwrap();
            let weight = if trial % 2 == 0 { 0.0 } else { 1e-2 };
            let p = ReprojectionProblem::new(&m, &l, cam.principal_point, weight).unwrap();
            let x = ReprojectionProblem::pack(&cam, &m.normalize(&alpha));
            let err = check_jacobian(&p, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "trial {trial}: {err}");
        }
    }

    #[test]
    fn focal_column_vanishes_on_axis() {
        // Every landmark on the optical axis at the principal point: the
        // image of that configuration does not depend on f.
        let pts = DVector::from_vec(vec![0.0, 0.0, 0.1, 0.0, 0.0, -0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.3]);
        let basis = DMatrix::from_fn(12, 1, |i, _| if i % 3 == 2 { 0.01 } else { 0.0 });
        let m = ShapeModel::new(
            pts,
            basis,
            DVector::from_element(1, 1.0),
            vec![],
            crate::shapemodel::MeshTopology::new(vec![[0, 1, 2], [1, 2, 3]], 4).unwrap(),
        )
        .unwrap();
        let l = Landmarks2D::from_pairs(&[0, 1, 2, 3], &[Vector2::zeros(); 4]).unwrap();
        let (j, _) = jacobian_persp_dlt(&m, &l, &Vector3::zeros(), 700.0, &FitConfig::unconstrained()).unwrap();
        assert!(j.column(3).amax() < 1e-12);
    }

    fn persp_instance(seed: u64, tz: f64) -> (ShapeModel, Landmarks2D, DVector<f64>, PerspCamera) {
        let m = make_synthetic_model(5, 300, 10, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = sample_alpha(&m, &mut rng, 2.0);
        let mut cam = frontal_camera(&m, tz, 200.0).unwrap();
        cam.rotation = sample_rotation(&mut rng, 0.5, 0.2, 0.1);
        let l = observe(&m, &alpha, &Camera::Persp(cam), m.landmark_indices(), 0.0, &mut rng).unwrap();
        (m, l, alpha, cam)
    }

    #[test]
    fn noiseless_round_trip() {
        for seed in 0..3 {
            let (m, l, alpha, cam) = persp_instance(seed, 0.6);
            let fit = fit_landmarks_persp(&m, &l, &FitConfig::unconstrained()).unwrap();
            assert!(fit.landmark_error.unwrap() < 1e-3, "seed {seed}: {:?}", fit.landmark_error);
            assert!(fit.report.iterations <= 10, "seed {seed}: {}", fit.report.iterations);
            let Camera::Persp(c) = fit.camera else { unreachable!() };
            assert!((c.t3d.z - cam.t3d.z).abs() < 1e-3 * cam.t3d.z, "{} vs {}", c.t3d.z, cam.t3d.z);
            assert!((&fit.alpha - &alpha).component_div(m.sigma()).amax() < 1e-3);
        }
    }

    #[test]
    fn stage_two_never_worsens_stage_one() {
        let (m, l, _, _) = persp_instance(9, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noisy = Landmarks2D::from_pairs(
            &l.indices(),
            &l.positions().iter().map(|p| p + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = FitConfig::default();
        let fit = fit_landmarks_persp(&m, &noisy, &cfg).unwrap();
        let stage1_start = fit.report.trace[0];
        assert!(fit.report.objective <= stage1_start);
    }

    #[test]
    fn truth_initialised_refinement_stops_immediately() {
        let (m, l, alpha, cam) = persp_instance(4, 0.5);
        let fit = refine_persp(&m, &l, &FitConfig::unconstrained(), None, &cam, &alpha).unwrap();
        assert!(fit.report.accepted <= 1);
        assert!((&fit.alpha - &alpha).amax() < 1e-9 * m.sigma().max());
    }

    #[test]
    fn fixed_distance_at_truth_matches_free_fit() {
        let (m, l, _, cam) = persp_instance(6, 0.5);
        let cfg = FitConfig::unconstrained();
        let free = fit_landmarks_persp(&m, &l, &cfg).unwrap();
        let fixed = fit_landmarks_persp_fixed_tz(&m, &l, cam.t3d.z, &cfg).unwrap();
        assert!((free.objective - fixed.objective).abs() < 1e-8);
        let Camera::Persp(c) = fixed.camera else { unreachable!() };
        assert_eq!(c.t3d.z, cam.t3d.z);
    }

    #[test]
    fn orthographic_data_gives_matching_focal_ratio() {
        let m = make_synthetic_model(5, 300, 10, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let alpha = sample_alpha(&m, &mut rng, 1.0);
        let pose = crate::camera::OrthoPose::new(Vector3::new(0.1, 0.3, 0.0), Vector2::zeros(), 1500.0).unwrap();
        let l = observe(&m, &alpha, &Camera::Ortho(pose), m.landmark_indices(), 0.0, &mut rng).unwrap();
        let fit = fit_landmarks_persp_fixed_tz(&m, &l, 1e4, &FitConfig::unconstrained()).unwrap();
        let Camera::Persp(c) = fit.camera else { unreachable!() };
        assert!((c.focal / c.t3d.z / pose.scale - 1.0).abs() < 0.01);
    }

    #[test]
    fn fixed_distance_sweep_is_continuous() {
        let (m, l, _, _) = persp_instance(7, 0.3);
        let cfg = FitConfig::default();
        let ks = [0.3, 0.33, 0.36, 0.4, 0.44];
        let fits: Vec<_> = ks.iter().map(|&k| fit_landmarks_persp_fixed_tz(&m, &l, k, &cfg).unwrap()).collect();
        for w in fits.windows(2) {
            let step = (&w[1].alpha - &w[0].alpha).component_div(m.sigma()).amax();
            assert!(step < 1.0, "{step}");
        }
    }

    #[test]
    fn distance_estimate_and_confidence() {
        let (m, l, _, cam) = persp_instance(8, 0.4);
        let (tz, fit) = estimate_distance(&m, &l, &FitConfig::unconstrained()).unwrap();
        assert!((tz - cam.t3d.z).abs() < 0.05 * cam.t3d.z);
        assert!(!fit.flags.low_confidence_distance);

        let (m, l, _, _) = persp_instance(8, 1e4);
        let (_, far) = estimate_distance(&m, &l, &FitConfig::unconstrained()).unwrap();
        assert!(far.flags.low_confidence_distance);
    }

    #[test]
    fn behind_camera_start_is_rejected() {
        let (m, l, alpha, mut cam) = persp_instance(3, 0.5);
        cam.t3d.z = -0.5;
        assert!(refine_persp(&m, &l, &FitConfig::default(), None, &cam, &alpha).is_err());
        let few = Landmarks2D::from_pairs(&l.indices()[..3], &l.positions()[..3]).unwrap();
        assert!(matches!(fit_landmarks_persp(&m, &few, &FitConfig::default()), Err(Error::UnderDetermined(_))));
        let _ = pinhole_project;
    }
}
