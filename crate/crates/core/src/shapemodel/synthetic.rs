//! Deterministic face-like synthetic models for experiments and tests.
//!
//! The mean is a patch of an ellipsoid (wider than a hemisphere so that
//! frontal silhouettes fall inside the mesh) with a nose bump, facing `-w`.
//! The first basis directions are structured deformation fields (depth-weighted
//! radial scaling, depth scaling with narrowing, jaw-weighted width, height,
//! nose prominence with widening); the rest are random smooth polynomial
//! fields. All columns are orthonormalised.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{MeshTopology, ShapeModel};
use crate::error::{Error, Result};

const AZIMUTH_MAX: f64 = 110.0 * PI / 180.0;
const ELEVATION_MAX: f64 = 70.0 * PI / 180.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModelSpec {
    pub seed: u64,
    pub num_vertices: usize,
    pub num_modes: usize,
    /// Approximate face diameter in metres.
    pub scale: f64,
    /// Canonical landmarks to designate (clamped to what the mesh offers).
    pub num_landmarks: usize,
}

impl SyntheticModelSpec {
    pub fn new(seed: u64, num_vertices: usize, num_modes: usize, scale: f64) -> Self {
        Self {
            seed,
            num_vertices,
            num_modes,
            scale,
            num_landmarks: 70,
        }
    }

    pub fn with_landmarks(mut self, count: usize) -> Self {
        self.num_landmarks = count;
        self
    }

    pub fn build(&self) -> Result<ShapeModel> {
        let (n, s) = (self.num_vertices, self.num_modes);
        if n < 4 {
            return Err(Error::invalid(format!("need at least 4 vertices, got {n}")));
        }
        if s == 0 || s > 3 * n {
            return Err(Error::invalid(format!("mode count {s} must be in 1..={}", 3 * n)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let grid = Grid::new(n);
        let radii = Vector3::new(0.375, 0.5, 0.4) * self.scale;

        let mut angles = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            let (phi, theta) = grid.angles(k);
            angles.push((phi, theta));
            points.push(surface_point(phi, theta, &radii));
        }
        let triangles = grid.triangles(&points);
        let topology = MeshTopology::new(triangles, n)?;
        let landmarks = pick_landmarks(&angles, &points, self.num_landmarks);

        let front: Vec<usize> = (0..n).filter(|&k| in_front_region(angles[k])).collect();
        let w0 = if front.is_empty() {
            points.iter().map(|p| p.z).sum::<f64>() / n as f64
        } else {
            front.iter().map(|&k| points[k].z).sum::<f64>() / front.len() as f64
        };

        let mut candidates: Vec<DVector<f64>> = Vec::new();
        let field = |f: &dyn Fn(usize, &Vector3<f64>) -> Vector3<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(3 * n);
            for (k, p) in points.iter().enumerate() {
                out.fixed_rows_mut::<3>(3 * k).copy_from(&f(k, p));
            }
            out
        };
        let depth = radii.z;
        candidates.push(field(&|_, p| {
            let d = (p.z - w0) / depth;
            Vector3::new(p.x * d, p.y * d, 0.0)
        }));
        candidates.push(field(&|_, p| Vector3::new(-0.2 * p.x, 0.0, p.z - w0)));
        candidates.push(field(&|_, p| Vector3::new(p.x * (1.0 - 0.6 * p.y / radii.y), 0.0, 0.0)));
        candidates.push(field(&|_, p| {
            Vector3::new(0.0, p.y * (1.0 - 0.6 * (p.x / radii.x).powi(2)), 0.0)
        }));
        candidates.push(field(&|k, p| {
            let (phi, theta) = angles[k];
            let bump = nose_profile(phi, theta);
            Vector3::new(0.5 * p.x * bump, 0.0, -depth * bump)
        }));
        let bulge_norm = candidates[0].norm();

        let mut basis = DMatrix::zeros(3 * n, s);
        let mut filled = 0;
        let mut next = 0;
        while filled < s {
            let cand = if next < candidates.len() {
                next += 1;
                candidates[next - 1].clone()
            } else {
                random_smooth_field(&mut rng, &points, &radii)
            };
            if let Some(q) = orthonormalize(&cand, &basis.columns(0, filled).into_owned()) {
                basis.set_column(filled, &q);
                filled += 1;
            }
        }

        let sigma0 = if bulge_norm > 0.0 { 0.25 * bulge_norm } else { 0.01 * self.scale };
        let sigma = DVector::from_iterator(s, (0..s).map(|i| sigma0 * 0.85f64.powi(i as i32)));
        let mean = DVector::from_iterator(3 * n, points.iter().flat_map(|p| [p.x, p.y, p.z]));
        ShapeModel::new(mean, basis, sigma, landmarks, topology)
    }
}

pub fn make_synthetic_model(seed: u64, num_vertices: usize, num_modes: usize, scale: f64) -> Result<ShapeModel> {
    SyntheticModelSpec::new(seed, num_vertices, num_modes, scale).build()
}

struct Grid {
    rows: usize,
    cols: usize,
    n: usize,
}

impl Grid {
    fn new(n: usize) -> Self {
        let aspect = ELEVATION_MAX / AZIMUTH_MAX;
        let rows = ((n as f64 * aspect).sqrt().round() as usize).max(2);
        let cols = n.div_ceil(rows).max(2);
        let rows = n.div_ceil(cols);
        Self { rows, cols, n }
    }

    fn angles(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k / self.cols, k % self.cols);
        let phi = -AZIMUTH_MAX + 2.0 * AZIMUTH_MAX * j as f64 / (self.cols - 1) as f64;
        let theta = ELEVATION_MAX - 2.0 * ELEVATION_MAX * i as f64 / (self.rows - 1).max(1) as f64;
        (phi, theta)
    }

    fn index(&self, i: usize, j: usize) -> Option<usize> {
        let k = i * self.cols + j;
        (j < self.cols && k < self.n).then_some(k)
    }

    fn triangles(&self, points: &[Vector3<f64>]) -> Vec<[usize; 3]> {
        let mut tris = Vec::new();
        for i in 0..self.rows.saturating_sub(1) {
            for j in 0..self.cols - 1 {
                let (Some(a), Some(b)) = (self.index(i, j), self.index(i, j + 1)) else {
                    continue;
                };
                if let Some(c) = self.index(i + 1, j) {
                    tris.push([a, c, b]);
                    if let Some(d) = self.index(i + 1, j + 1) {
                        tris.push([b, c, d]);
                    }
                }
            }
        }
        // Outward normals: the patch is star-shaped about the origin.
        if let Some(t) = tris.first() {
            let (a, b, c) = (points[t[0]], points[t[1]], points[t[2]]);
            let normal = (b - a).cross(&(c - a));
            if normal.dot(&((a + b + c) / 3.0)) < 0.0 {
                for t in &mut tris {
                    t.swap(1, 2);
                }
            }
        }
        tris
    }
}

fn nose_profile(phi: f64, theta: f64) -> f64 {
    let d2 = phi * phi + (theta + 0.15) * (theta + 0.15);
    0.35 * (-d2 / (2.0 * 0.22 * 0.22)).exp()
}

fn surface_point(phi: f64, theta: f64, radii: &Vector3<f64>) -> Vector3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let bump = nose_profile(phi, theta);
    Vector3::new(
        radii.x * ct * sp,
        radii.y * st,
        -radii.z * ct * cp - radii.z * bump,
    )
}

fn in_front_region((phi, theta): (f64, f64)) -> bool {
    phi.abs() <= 1.2 && theta.abs() <= 0.9
}

/// Eye centres first, then farthest-point samples over the frontal region.
fn pick_landmarks(angles: &[(f64, f64)], points: &[Vector3<f64>], count: usize) -> Vec<usize> {
    let n = points.len();
    let nearest = |target: (f64, f64), taken: &[usize]| {
        (0..n)
            .filter(|k| !taken.contains(k))
            .min_by(|&a, &b| {
                let da = (angles[a].0 - target.0).powi(2) + (angles[a].1 - target.1).powi(2);
                let db = (angles[b].0 - target.0).powi(2) + (angles[b].1 - target.1).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
    };
    let mut chosen = Vec::new();
    for target in [(-0.4, 0.3), (0.4, 0.3)] {
        if chosen.len() < count {
            if let Some(k) = nearest(target, &chosen) {
                chosen.push(k);
            }
        }
    }
    let pool: Vec<usize> = (0..n)
        .filter(|&k| in_front_region(angles[k]) && !chosen.contains(&k))
        .collect();
    let mut dist: Vec<f64> = pool
        .iter()
        .map(|&k| {
            chosen
                .iter()
                .map(|&c| (points[k] - points[c]).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut used = vec![false; pool.len()];
    while chosen.len() < count {
        let best = (0..pool.len())
            .filter(|&i| !used[i])
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        let Some(i) = best else { break };
        used[i] = true;
        let k = pool[i];
        chosen.push(k);
        for (d, &other) in dist.iter_mut().zip(&pool) {
            *d = d.min((points[other] - points[k]).norm());
        }
    }
    chosen
}

fn random_smooth_field(rng: &mut ChaCha8Rng, points: &[Vector3<f64>], radii: &Vector3<f64>) -> DVector<f64> {
    // Random cubic polynomial plus a few low-frequency sinusoids in
    // normalised coordinates, independently for each output axis.
    let mut exps = Vec::new();
    for a in 0..=3u32 {
        for b in 0..=3 - a {
            for c in 0..=3 - a - b {
                exps.push([a, b, c]);
            }
        }
    }
    let mut coeffs = vec![[0.0f64; 3]; exps.len()];
    for (e, c) in exps.iter().zip(coeffs.iter_mut()) {
        let deg = (e[0] + e[1] + e[2]) as f64;
        for v in c.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = g / (1.0 + deg);
        }
    }
    let waves: Vec<(Vector3<f64>, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let k = Vector3::from_fn(|_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = [0; 3].map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
            (k, phase, amp)
        })
        .collect();
    let n = points.len();
    let mut out: DVector<f64> = DVector::zeros(3 * n);
    for (k, p) in points.iter().enumerate() {
        let q = [p.x / radii.x, p.y / radii.y, p.z / radii.z];
        for (e, c) in exps.iter().zip(&coeffs) {
            let m = q[0].powi(e[0] as i32) * q[1].powi(e[1] as i32) * q[2].powi(e[2] as i32);
            for axis in 0..3 {
                out[3 * k + axis] += c[axis] * m * radii[axis];
            }
        }
        let qv = Vector3::from(q);
        for (kv, phase, amp) in &waves {
            let w = (kv.dot(&qv) + phase).sin();
            for axis in 0..3 {
                out[3 * k + axis] += amp[axis] * w * radii[axis];
            }
        }
    }
    out
}

/// Gram-Schmidt against the (orthonormal) columns of `basis`, applied twice.
fn orthonormalize(v: &DVector<f64>, basis: &DMatrix<f64>) -> Option<DVector<f64>> {
    let norm0 = v.norm();
    if norm0 == 0.0 {
        return None;
    }
    let mut q = v.clone();
    for _ in 0..2 {
        for col in basis.column_iter() {
            let d = col.dot(&q);
            q.axpy(-d, &col, 1.0);
        }
    }
    let norm = q.norm();
    (norm > 1e-6 * norm0).then(|| q / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = make_synthetic_model(7, 120, 12, 0.2).unwrap();
        let b = make_synthetic_model(7, 120, 12, 0.2).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_model(8, 120, 12, 0.2).unwrap();
        assert_ne!(a.basis(), c.basis());
    }

    #[test]
    fn basis_is_orthogonal() {
        let m = make_synthetic_model(3, 100, 20, 0.2).unwrap();
        let g = m.basis().transpose() * m.basis();
        for i in 0..20 {
            for j in 0..20 {
                if i != j {
                    assert!(g[(i, j)].abs() < 1e-9, "({i},{j}) = {}", g[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn sigma_decays_geometrically() {
        let m = make_synthetic_model(1, 60, 6, 0.2).unwrap();
        let s = m.sigma();
        for i in 1..6 {
            assert!((s[i] / s[i - 1] - 0.85).abs() < 1e-12);
        }
    }

    #[test]
    fn argument_checks() {
        assert!(make_synthetic_model(0, 3, 1, 0.2).is_err());
        assert!(make_synthetic_model(0, 4, 13, 0.2).is_err());
        let m = make_synthetic_model(0, 4, 12, 0.2).unwrap();
        assert_eq!(m.num_modes(), 12);
        assert_eq!(m.num_vertices(), 4);
    }

    #[test]
    fn landmarks_start_with_eyes_and_are_distinct() {
        let m = make_synthetic_model(2, 400, 10, 0.2).unwrap();
        let lm = m.landmark_indices();
        assert_eq!(lm.len(), 70);
        let (l, r) = m.eye_indices().unwrap();
        let mean = m.mean();
        assert!(mean[3 * l] < 0.0 && mean[3 * r] > 0.0);
        let mut sorted = lm.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), lm.len());
    }

    #[test]
    fn face_points_towards_negative_depth() {
        let m = make_synthetic_model(2, 400, 10, 0.2).unwrap();
        let mean = m.mean();
        let (l, r) = m.eye_indices().unwrap();
        assert!(mean[3 * l + 2] < 0.0 && mean[3 * r + 2] < 0.0);
        // outward normals on the frontal part point towards -w
        let tri = m.topology().triangles()[m.topology().len() / 2];
        let p = |i: usize| Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]);
        let n = (p(tri[1]) - p(tri[0])).cross(&(p(tri[2]) - p(tri[0])));
        assert!(n.z < 0.0);
    }

    #[test]
    fn bounded_samples_stay_in_box() {
        let scale = 0.2;
        let m = make_synthetic_model(11, 150, 15, scale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let beta = DVector::from_fn(15, |_, _| rng.random_range(-3.0..=3.0));
            let shape = m.synthesize_normalized(&beta).unwrap();
            for axis in 0..3 {
                let vals = shape.iter().skip(axis).step_by(3);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
                assert!(hi - lo <= 4.0 * scale, "axis {axis}: extent {}", hi - lo);
            }
        }
    }
}
