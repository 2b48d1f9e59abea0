//! Evaluation metrics: Procrustes-aligned surface error and interocular
//! normalised landmark error.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::shapemodel::vertices;

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity (or rigid, with `with_scale = false`) transform
/// taking `source` onto `target`. Reflections are never returned.
pub fn procrustes_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(Vec<Vector3<f64>>, Similarity)> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "point counts differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::invalid("Procrustes alignment needs at least 3 points"));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vector3<f64>>() / n;
    let ct = target.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let a = s - cs;
        cov += (t - ct) * a.transpose();
        var_s += a.norm_squared();
    }
    let extent = source.iter().map(|p| (p - cs).norm()).fold(0.0, f64::max);
    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    // Collinear sources leave the rotation about their line undetermined.
    let spread = {
        let mut sc = Matrix3::zeros();
        for s in source {
            let a = s - cs;
            sc += a * a.transpose();
        }
        let ev = sc.symmetric_eigenvalues();
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev[1]
    };
    if var_s == 0.0 || spread <= 1e-20 * extent * extent * n {
        return Err(Error::invalid("degenerate (collinear or coincident) source points"));
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale {
        (sv[0] + sv[1] + sign[(2, 2)] * sv[2]) / var_s
    } else {
        1.0
    };
    let translation = ct - rotation * cs * scale;
    let tf = Similarity {
        rotation,
        translation,
        scale,
    };
    Ok((source.iter().map(|p| tf.apply(p)).collect(), tf))
}

/// Mean per-vertex distance after aligning `recon` onto `truth` (both
/// interleaved shape vectors in the same vertex order).
pub fn surface_distance(recon: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    surface_distance_with(recon, truth, true)
}

pub fn surface_distance_with(recon: &DVector<f64>, truth: &DVector<f64>, with_scale: bool) -> Result<f64> {
    if recon.len() != truth.len() || !recon.len().is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "vertex count mismatch: {} vs {} coordinates",
            recon.len(),
            truth.len()
        )));
    }
    let r = vertices(recon);
    let t = vertices(truth);
    let (aligned, _) = procrustes_align(&r, &t, with_scale)?;
    Ok(aligned.iter().zip(&t).map(|(a, b)| (a - b).norm()).sum::<f64>() / t.len() as f64)
}

/// Mean pixel distance as a percentage of `interocular`.
pub fn landmark_distance(observed: &[Vector2<f64>], projected: &[Vector2<f64>], interocular: f64) -> Result<f64> {
    if observed.len() != projected.len() || observed.is_empty() {
        return Err(Error::invalid(format!(
            "landmark counts differ or are empty: {} vs {}",
            observed.len(),
            projected.len()
        )));
    }
    if !(interocular > 0.0) || !interocular.is_finite() {
        return Err(Error::invalid(format!("interocular distance must be positive, got {interocular}")));
    }
    let mean = observed.iter().zip(projected).map(|(a, b)| (a - b).norm()).sum::<f64>() / observed.len() as f64;
    Ok(100.0 * mean / interocular)
}
