//! Linear statistical shape model: `shape(alpha) = mean + basis * alpha`.
//!
//! Vertices are stored interleaved as `[u1, v1, w1, u2, ...]`, in metres.
//! Basis columns are raw principal directions; the per-mode standard
//! deviations live in `sigma`. Fitters work with unit-variance coefficients
//! `beta = alpha / sigma` so that priors and bounds are isotropic.

mod io;
mod synthetic;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};

pub use io::{load_model, read_model, save_model, write_model, write_obj};
pub use synthetic::{make_synthetic_model, SyntheticModelSpec};

/// Triangle mesh connectivity shared by every instance of the model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MeshTopology {
    triangles: Vec<[usize; 3]>,
}

impl MeshTopology {
    pub fn new(triangles: Vec<[usize; 3]>, num_vertices: usize) -> Result<Self> {
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= num_vertices) {
                return Err(Error::invalid(format!(
                    "triangle {t} references a vertex outside 0..{num_vertices}"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invalid(format!("triangle {t} is degenerate: {tri:?}")));
            }
        }
        Ok(Self { triangles })
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Map from undirected edge `(lo, hi)` to the triangles that contain it.
    pub fn edge_faces(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                map.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default().push(t);
            }
        }
        map
    }

    /// Edges that belong to exactly one triangle, sorted.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = self
            .edge_faces()
            .into_iter()
            .filter(|(_, faces)| faces.len() == 1)
            .map(|(e, _)| e)
            .collect();
        edges.sort_unstable();
        edges
    }

    /// Per-vertex flag: true when the vertex lies on a mesh boundary edge.
    pub fn boundary_vertex_mask(&self, num_vertices: usize) -> Vec<bool> {
        let mut mask = vec![false; num_vertices];
        for (a, b) in self.boundary_edges() {
            mask[a] = true;
            mask[b] = true;
        }
        mask
    }
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    sigma: DVector<f64>,
    landmark_indices: Vec<usize>,
    topology: MeshTopology,
}

impl ShapeModel {
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        sigma: DVector<f64>,
        landmark_indices: Vec<usize>,
        topology: MeshTopology,
    ) -> Result<Self> {
        if !mean.len().is_multiple_of(3) || mean.is_empty() {
            return Err(Error::invalid(format!(
                "mean length {} is not a positive multiple of 3",
                mean.len()
            )));
        }
        let n = mean.len() / 3;
        if basis.nrows() != mean.len() {
            return Err(Error::invalid(format!(
                "basis has {} rows, expected {}",
                basis.nrows(),
                mean.len()
            )));
        }
        if basis.ncols() == 0 || sigma.len() != basis.ncols() {
            return Err(Error::invalid(format!(
                "sigma length {} does not match {} modes",
                sigma.len(),
                basis.ncols()
            )));
        }
        if let Some(i) = sigma.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("sigma[{i}] = {} must be positive", sigma[i])));
        }
        if mean.iter().chain(basis.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("model contains non-finite values"));
        }
        check_indices(&landmark_indices, n)?;
        for tri in topology.triangles() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::invalid("topology references a missing vertex"));
            }
        }
        Ok(Self {
            mean,
            basis,
            sigma,
            landmark_indices,
            topology,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn num_modes(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    /// Canonical landmark vertices. The first two are the eye centres.
    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn topology(&self) -> &MeshTopology {
        &self.topology
    }

    /// Designated eye-centre vertices used for interocular normalisation.
    pub fn eye_indices(&self) -> Option<(usize, usize)> {
        match self.landmark_indices.as_slice() {
            [a, b, ..] => Some((*a, *b)),
            _ => None,
        }
    }

    /// Basis with each column multiplied by its standard deviation.
    pub fn scaled_basis(&self) -> DMatrix<f64> {
        let mut q = self.basis.clone();
        for (j, mut col) in q.column_iter_mut().enumerate() {
            col *= self.sigma[j];
        }
        q
    }

    pub fn synthesize(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        if alpha.len() != self.num_modes() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                self.num_modes(),
                alpha.len()
            )));
        }
        Ok(&self.basis * alpha + &self.mean)
    }

    /// Vertex positions from unit-variance coefficients.
    pub fn synthesize_normalized(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.synthesize(&self.denormalize(beta))
    }

    pub fn normalize(&self, alpha: &DVector<f64>) -> DVector<f64> {
        alpha.component_div(&self.sigma)
    }

    pub fn denormalize(&self, beta: &DVector<f64>) -> DVector<f64> {
        beta.component_mul(&self.sigma)
    }

    /// Rows of the basis and mean belonging to `indices`, in the given order.
    pub fn landmark_submatrix(&self, indices: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if indices.is_empty() {
            return Err(Error::invalid("landmark index list is empty"));
        }
        let n = self.num_vertices();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("vertex index {bad} out of range 0..{n}")));
        }
        let s = self.num_modes();
        let mut q = DMatrix::zeros(3 * indices.len(), s);
        let mut m = DVector::zeros(3 * indices.len());
        for (j, &i) in indices.iter().enumerate() {
            q.rows_mut(3 * j, 3).copy_from(&self.basis.rows(3 * i, 3));
            m.rows_mut(3 * j, 3).copy_from(&self.mean.rows(3 * i, 3));
        }
        Ok((q, m))
    }
}

/// The `i`-th vertex of an interleaved shape vector.
pub fn vertex(shape: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(shape[3 * i], shape[3 * i + 1], shape[3 * i + 2])
}

/// Interleaved shape vector as a list of points.
pub fn vertices(shape: &DVector<f64>) -> Vec<Vector3<f64>> {
    (0..shape.len() / 3).map(|i| vertex(shape, i)).collect()
}

fn check_indices(indices: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::invalid(format!("landmark index {i} out of range 0..{n}")));
        }
        if seen[i] {
            return Err(Error::invalid(format!("landmark index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}
