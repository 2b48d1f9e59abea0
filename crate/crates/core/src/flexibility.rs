//! Flexibility modes of a converged fit: shape directions that change the 3D
//! surface a lot while moving the projected landmarks very little.
//!
//! With `Q` the shape basis and `Π` the linearised projection of the basis at
//! the landmarks, the modes are the generalised eigenvectors of
//! `QᵀQ f = λ ΠᵀΠ f`, largest `λ` first.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::camera::{rodrigues, skew, Camera, OrthoPose, PerspCamera};
use crate::error::{Error, Result};
use crate::fit::{interocular_distance, project_landmarks};
use crate::landmarks::{fmt_f64, Landmarks2D};
use crate::par::Exec;
use crate::shapemodel::{write_obj, ShapeModel};

/// Relative ridge added to a singular `ΠᵀΠ`.
pub const RIDGE: f64 = 1e-10;

const P: Matrix2x3<f64> = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);

/// `Π_ortho = (I_L ⊗ P R) Q_L`, `2L × S`. Scale and translation do not enter.
pub fn projection_matrix_ortho(model: &ShapeModel, landmarks: &Landmarks2D, pose: &OrthoPose) -> Result<DMatrix<f64>> {
    let (q, _) = model.landmark_submatrix(&landmarks.indices())?;
    let pr = P * rodrigues(&pose.rotation);
    let mut pi = DMatrix::zeros(2 * landmarks.len(), model.num_modes());
    for i in 0..landmarks.len() {
        pi.rows_mut(2 * i, 2).copy_from(&(pr * q.fixed_rows::<3>(3 * i)));
    }
    Ok(pi)
}

/// `Π_persp = D (I_L ⊗ K [R t] S) Q_L`, `3L × S`, where `D` stacks the
/// cross-product matrices of the observed homogeneous landmarks and the
/// selector `S` drops the translation column, leaving `K R`.
pub fn projection_matrix_persp(model: &ShapeModel, landmarks: &Landmarks2D, camera: &PerspCamera) -> Result<DMatrix<f64>> {
    let (q, _) = model.landmark_submatrix(&landmarks.indices())?;
    let kr = camera.intrinsics() * rodrigues(&camera.rotation);
    let mut pi = DMatrix::zeros(3 * landmarks.len(), model.num_modes());
    for (i, l) in landmarks.iter().enumerate() {
        let d = skew(&l.position.push(1.0));
        pi.rows_mut(3 * i, 3).copy_from(&(d * kr * q.fixed_rows::<3>(3 * i)));
    }
    Ok(pi)
}

/// `Π` for whichever camera a fit produced.
pub fn projection_matrix(model: &ShapeModel, landmarks: &Landmarks2D, camera: &Camera) -> Result<DMatrix<f64>> {
    match camera {
        Camera::Ortho(pose) => projection_matrix_ortho(model, landmarks, pose),
        Camera::Persp(cam) => projection_matrix_persp(model, landmarks, cam),
    }
}

/// Mean Euclidean displacement of the mesh vertices caused by `Q δ`.
pub fn mean_surface_change(model: &ShapeModel, delta: &DVector<f64>) -> Result<f64> {
    if delta.len() != model.num_modes() {
        return Err(Error::invalid(format!(
            "expected {} coefficients, got {}",
            model.num_modes(),
            delta.len()
        )));
    }
    let d = model.basis() * delta;
    let n = model.num_vertices();
    Ok(d.as_slice().chunks_exact(3).map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilitySpectrum {
    /// Columns are the modes in coefficient space, largest eigenvalue first.
    pub modes: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Mean surface change (model units) produced by a unit weight on any mode.
    pub k1: f64,
    /// Whether `ΠᵀΠ` needed the ridge.
    pub regularized: bool,
}

impl FlexibilitySpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn mode(&self, i: usize) -> DVector<f64> {
        self.modes.column(i).into_owned()
    }

    /// Mode `i` rescaled so a unit weight moves the surface by `k1` on average.
    pub fn mode_at(&self, i: usize, k1: f64) -> DVector<f64> {
        self.mode(i) * (k1 / self.k1)
    }
}

/// Solve `QᵀQ f = λ ΠᵀΠ f` and normalise every mode to a mean surface
/// change of `k1`.
pub fn flexibility_modes(model: &ShapeModel, pi: &DMatrix<f64>, k1: f64) -> Result<FlexibilitySpectrum> {
    let s = model.num_modes();
    if pi.nrows() == 0 || pi.ncols() != s {
        return Err(Error::invalid(format!(
            "projection matrix must be non-empty with {s} columns, got {}x{}",
            pi.nrows(),
            pi.ncols()
        )));
    }
    if !(k1 > 0.0) || !k1.is_finite() {
        return Err(Error::invalid(format!("k1 must be positive, got {k1}")));
    }
    let q = model.basis();
    let a = q.transpose() * q;
    let b = pi.transpose() * pi;
    let (eigenvalues, vectors, regularized) = generalized_eigen(&a, &b)?;

    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let mut modes = DMatrix::zeros(s, s);
    let mut sorted = Vec::with_capacity(s);
    for (c, &i) in order.iter().enumerate() {
        let mut f = vectors.column(i).into_owned();
        fix_sign(&mut f);
        let m = mean_surface_change(model, &f)?;
        if !(m > 0.0) {
            return Err(Error::Numeric {
                message: format!("flexibility mode {c} leaves the surface unchanged"),
                iterate: f.iter().copied().collect(),
            });
        }
        modes.set_column(c, &(f * (k1 / m)));
        sorted.push(eigenvalues[i]);
    }
    Ok(FlexibilitySpectrum {
        modes,
        eigenvalues: sorted,
        k1,
        regularized,
    })
}

/// Symmetric-definite generalised eigenproblem `A x = λ B x` by Cholesky
/// reduction. `B` gets a ridge of `RIDGE · trace(B) / n` if it is singular.
fn generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>, bool)> {
    let n = b.nrows();
    let spectrum = SymmetricEigen::new(b.clone()).eigenvalues;
    let top = spectrum.amax();
    let low = spectrum.min();
    let singular = !(low > RIDGE * top);
    let b = if singular {
        let ridge = RIDGE * b.trace() / n as f64;
        if !(ridge > 0.0) {
            return Err(Error::invalid("projection matrix is zero"));
        }
        b + DMatrix::identity(n, n) * ridge
    } else {
        b.clone()
    };
    let chol = Cholesky::new(b).ok_or_else(|| Error::Numeric {
        message: "projection Gram matrix is not positive definite".into(),
        iterate: Vec::new(),
    })?;
    let l = chol.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numeric {
            message: "singular Cholesky factor".into(),
            iterate: Vec::new(),
        })?;
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let vectors = linv.transpose() * eig.eigenvectors;
    Ok((eig.eigenvalues, vectors, singular))
}

/// Make the first clearly nonzero entry positive.
fn fix_sign(f: &mut DVector<f64>) {
    let tol = f.amax() * 1e-12;
    if let Some(x) = f.iter().find(|x| x.abs() > tol) {
        if *x < 0.0 {
            f.neg_mut();
        }
    }
}

/// `Q (α + w f) + ς̄`.
pub fn apply_mode(model: &ShapeModel, alpha: &DVector<f64>, mode: &DVector<f64>, w: f64) -> Result<DVector<f64>> {
    if mode.len() != alpha.len() {
        return Err(Error::invalid(format!(
            "mode has {} entries, coefficients have {}",
            mode.len(),
            alpha.len()
        )));
    }
    model.synthesize(&(alpha + mode * w))
}

/// Unit for the landmark threshold `k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LandmarkTolerance {
    Pixels(f64),
    /// Percent of the interocular distance.
    PercentInterocular(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeCheck {
    pub index: usize,
    pub eigenvalue: f64,
    /// Mean projected landmark displacement (pixels) at mean surface change `k1`.
    pub landmark_change: f64,
    pub retained: bool,
}

/// Mean pixel displacement of the projected landmarks when `delta` is added
/// to `alpha`, using the full camera projection.
pub fn landmark_change(
    model: &ShapeModel,
    alpha: &DVector<f64>,
    camera: &Camera,
    indices: &[usize],
    delta: &DVector<f64>,
) -> Result<f64> {
    let before = project_landmarks(model, alpha, camera, indices)?;
    let after = project_landmarks(model, &(alpha + delta), camera, indices)?;
    Ok(before.iter().zip(&after).map(|(a, b)| (a - b).norm()).sum::<f64>() / indices.len() as f64)
}

/// Test every mode on its own: scaled to mean surface change `k1`, it is
/// retained iff the projected landmarks move on average by less than `k2`.
#[allow(clippy::too_many_arguments)]
pub fn truncate_modes(
    spectrum: &FlexibilitySpectrum,
    model: &ShapeModel,
    alpha: &DVector<f64>,
    landmarks: &Landmarks2D,
    camera: &Camera,
    k1: f64,
    k2: LandmarkTolerance,
    exec: Exec,
) -> Result<Vec<ModeCheck>> {
    if !(k1 > 0.0) {
        return Err(Error::invalid(format!("k1 must be positive, got {k1}")));
    }
    let limit = match k2 {
        LandmarkTolerance::Pixels(px) => px,
        LandmarkTolerance::PercentInterocular(pct) => pct / 100.0 * interocular_distance(model, landmarks, alpha, camera)?,
    };
    if !(limit > 0.0) {
        return Err(Error::invalid(format!("k2 must be positive, got {k2:?}")));
    }
    let indices = landmarks.indices();
    exec.map_range(spectrum.len(), |i| {
        let change = landmark_change(model, alpha, camera, &indices, &spectrum.mode_at(i, k1))?;
        Ok(ModeCheck {
            index: i,
            eigenvalue: spectrum.eigenvalues[i],
            landmark_change: change,
            retained: change < limit,
        })
    })
    .into_iter()
    .collect()
}

/// Mean and standard deviation of a chi distribution with `k` degrees of freedom.
pub fn chi_moments(k: usize) -> (f64, f64) {
    let k = k as f64;
    let mean = std::f64::consts::SQRT_2 * (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp();
    (mean, (k - mean * mean).max(0.0).sqrt())
}

/// Whether `alpha + w f` and `alpha - w f` both stay within `n_sigmas`
/// standard deviations of the expected Mahalanobis length of a draw from the model.
pub fn is_plausible(alpha: &DVector<f64>, sigma: &DVector<f64>, mode: &DVector<f64>, w: f64, n_sigmas: f64) -> bool {
    let (mean, sd) = chi_moments(alpha.len());
    let limit = mean + n_sigmas * sd;
    [w, -w]
        .iter()
        .all(|&w| (alpha + mode * w).component_div(sigma).norm() <= limit)
}

/// Indices of the candidate modes that pass [`is_plausible`] at unit weight.
pub fn plausibility_filter(
    spectrum: &FlexibilitySpectrum,
    candidates: &[usize],
    alpha: &DVector<f64>,
    sigma: &DVector<f64>,
    n_sigmas: f64,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| is_plausible(alpha, sigma, &spectrum.mode(i), 1.0, n_sigmas))
        .collect()
}

/// Spectrum table: `mode,eigenvalue,landmark_change_px,retained,plausible`.
pub fn write_spectrum_csv<W: Write>(checks: &[ModeCheck], plausible: &[usize], w: &mut W) -> Result<()> {
    writeln!(w, "mode,eigenvalue,landmark_change_px,retained,plausible")?;
    for c in checks {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.index,
            fmt_f64(c.eigenvalue),
            fmt_f64(c.landmark_change),
            u8::from(c.retained),
            u8::from(plausible.contains(&c.index))
        )?;
    }
    Ok(())
}

/// `mode_<i>_<m1|0|p1>.obj` snapshots at weights -1, 0 and +1 for the given modes.
pub fn write_mode_meshes(
    dir: impl AsRef<Path>,
    model: &ShapeModel,
    alpha: &DVector<f64>,
    spectrum: &FlexibilitySpectrum,
    modes: &[usize],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for &i in modes {
        let f = spectrum.mode(i);
        for (w, tag) in [(-1.0, "m1"), (0.0, "0"), (1.0, "p1")] {
            let shape = apply_mode(model, alpha, &f, w)?;
            let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("mode_{i}_{tag}.obj")))?);
            write_obj(&shape, model.topology(), &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
