//! Occluding-boundary extraction: interior mesh edges whose two faces point
//! to opposite sides of the view direction, filtered by a depth buffer.

use std::io::Write;

use nalgebra::{DVector, Vector2, Vector3};

use super::edges::{draw_segment, EdgeMap};
use crate::camera::Camera;
use crate::error::Result;
use crate::par::Exec;
use crate::shapemodel::{vertices, MeshTopology, ShapeModel};

/// Raster size used when no image resolution is known.
pub const DEFAULT_RASTER: u32 = 512;
/// Depth-test tolerance as a fraction of the mesh depth range.
pub const DEPTH_TOLERANCE: f64 = 1e-4;

/// Vertex indices on the occluding boundary, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundarySet {
    pub vertices: Vec<usize>,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.vertices.binary_search(&v).is_ok()
    }

    /// One index per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}

/// A mesh posed in front of a camera: camera-frame points and image positions.
pub struct PosedMesh<'a> {
    topology: &'a MeshTopology,
    camera: Camera,
    cam: Vec<Vector3<f64>>,
    image: Vec<Vector2<f64>>,
}

impl<'a> PosedMesh<'a> {
    pub fn new(points: &[Vector3<f64>], topology: &'a MeshTopology, camera: &Camera) -> Result<Self> {
        let cam = points.iter().map(|p| camera.to_camera(p)).collect();
        let image = points
            .iter()
            .enumerate()
            .map(|(i, p)| camera.project(p, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            topology,
            camera: *camera,
            cam,
            image,
        })
    }

    pub fn image_positions(&self) -> &[Vector2<f64>] {
        &self.image
    }

    /// Sign of `normal . view` for each triangle; negative means front-facing.
    /// The view direction is the optical axis for orthographic cameras and
    /// the ray to the triangle centroid for perspective ones.
    pub fn facing(&self, exec: Exec) -> Vec<f64> {
        let tris = self.topology.triangles();
        exec.map(tris, |t| {
            let (a, b, c) = (self.cam[t[0]], self.cam[t[1]], self.cam[t[2]]);
            let normal = (b - a).cross(&(c - a));
            match self.camera {
                Camera::Ortho(_) => normal.z,
                Camera::Persp(_) => normal.dot(&((a + b + c) / 3.0)),
            }
        })
    }

    /// Interior edges with one front-facing and one back-facing triangle, sorted.
    pub fn silhouette_edges(&self, exec: Exec) -> Vec<(usize, usize)> {
        let facing = self.facing(exec);
        let front = |t: usize| facing[t] < 0.0;
        let mut edges: Vec<_> = self
            .topology
            .edge_faces()
            .into_iter()
            .filter(|(_, f)| f.len() == 2 && front(f[0]) != front(f[1]))
            .map(|(e, _)| e)
            .collect();
        edges.sort_unstable();
        edges
    }

    /// Vertices of silhouette edges, minus vertices on the mesh border.
    pub fn boundary_candidates(&self, exec: Exec) -> Vec<usize> {
        let on_border = self.topology.boundary_vertex_mask(self.cam.len());
        let mut out: Vec<usize> = self
            .silhouette_edges(exec)
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .filter(|&v| !on_border[v])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn depth_range(&self) -> (f64, f64) {
        self.cam
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)))
    }

    /// Rasterise every triangle into a nearest-depth buffer.
    pub fn depth_buffer(&self, raster: Option<(u32, u32)>) -> DepthBuffer {
        let mut buf = DepthBuffer::new(&self.image, raster);
        let perspective = matches!(self.camera, Camera::Persp(_));
        for t in self.topology.triangles() {
            let p = t.map(|i| buf.to_raster(&self.image[i]));
            let z = t.map(|i| self.cam[i].z);
            buf.fill_triangle(&p, &z, perspective);
        }
        buf
    }

    /// Whether some triangle not touching `v` crosses the ray through `v`
    /// in front of it.
    pub fn ray_occluded(&self, v: usize, tol: f64) -> bool {
        let target = self.cam[v];
        let (origin, dir) = match self.camera {
            Camera::Ortho(_) => {
                let (lo, _) = self.depth_range();
                (Vector3::new(target.x, target.y, lo - 1.0), Vector3::z())
            }
            Camera::Persp(_) => (Vector3::zeros(), target),
        };
        self.topology.triangles().iter().any(|t| {
            if t.contains(&v) {
                return false;
            }
            match ray_triangle(&origin, &dir, &[self.cam[t[0]], self.cam[t[1]], self.cam[t[2]]]) {
                Some(s) if s > 0.0 => (origin + dir * s).z < target.z - tol,
                _ => false,
            }
        })
    }

    /// Candidates that pass the depth test. Vertices the buffer marks as
    /// hidden are confirmed with an exact ray test, since grazing triangles
    /// next to a silhouette vertex cover its pixel at nearly equal depth.
    pub fn occluding_boundary(&self, raster: Option<(u32, u32)>, exec: Exec) -> BoundarySet {
        let candidates = self.boundary_candidates(exec);
        if candidates.is_empty() {
            return BoundarySet::default();
        }
        let buf = self.depth_buffer(raster);
        let (lo, hi) = self.depth_range();
        let tol = DEPTH_TOLERANCE * (hi - lo);
        let visible = exec.map(&candidates, |&v| {
            let front = buf.depth_at(&buf.to_raster(&self.image[v]));
            self.cam[v].z <= front + tol || !self.ray_occluded(v, tol)
        });
        BoundarySet {
            vertices: candidates
                .into_iter()
                .zip(visible)
                .filter_map(|(v, ok)| ok.then_some(v))
                .collect(),
        }
    }
}

/// Ray parameter of the intersection with a triangle (Moller-Trumbore),
/// boundary inclusive.
fn ray_triangle(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Nearest-depth raster over image coordinates. With a given image size the
/// raster pixels are the image pixels; otherwise the projected mesh is
/// fitted into a square raster.
pub struct DepthBuffer {
    width: usize,
    height: usize,
    scale: f64,
    offset: Vector2<f64>,
    depth: Vec<f64>,
}

impl DepthBuffer {
    fn new(points: &[Vector2<f64>], raster: Option<(u32, u32)>) -> Self {
        let (width, height, scale, offset) = match raster {
            Some((w, h)) => (w as usize, h as usize, 1.0, Vector2::zeros()),
            None => {
                let lo = points.iter().fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p));
                let hi = points.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
                let extent = (hi - lo).amax();
                let n = DEFAULT_RASTER as usize;
                let scale = if extent > 0.0 { (n - 3) as f64 / extent } else { 1.0 };
                (n, n, scale, lo - Vector2::repeat(1.0 / scale))
            }
        };
        Self {
            width,
            height,
            scale,
            offset,
            depth: vec![f64::INFINITY; width * height],
        }
    }

    pub fn to_raster(&self, p: &Vector2<f64>) -> Vector2<f64> {
        (p - self.offset) * self.scale
    }

    /// Stored depth at the pixel containing `p`; infinite off the raster.
    pub fn depth_at(&self, p: &Vector2<f64>) -> f64 {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return f64::INFINITY;
        }
        self.depth[y as usize * self.width + x as usize]
    }

    fn fill_triangle(&mut self, p: &[Vector2<f64>; 3], z: &[f64; 3], perspective: bool) {
        let area = (p[1] - p[0]).perp(&(p[2] - p[0]));
        if area == 0.0 || !area.is_finite() {
            return;
        }
        let lo = p[0].inf(&p[1]).inf(&p[2]);
        let hi = p[0].sup(&p[1]).sup(&p[2]);
        let x0 = lo.x.ceil().max(0.0) as usize;
        let y0 = lo.y.ceil().max(0.0) as usize;
        let x1 = hi.x.floor().min(self.width as f64 - 1.0);
        let y1 = hi.y.floor().min(self.height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let q = Vector2::new(x as f64, y as f64);
                let b = [
                    (p[2] - p[1]).perp(&(q - p[1])) / area,
                    (p[0] - p[2]).perp(&(q - p[2])) / area,
                    (p[1] - p[0]).perp(&(q - p[0])) / area,
                ];
                if b.iter().any(|&w| w < 0.0) {
                    continue;
                }
                let d = if perspective {
                    1.0 / (b[0] / z[0] + b[1] / z[1] + b[2] / z[2])
                } else {
                    b[0] * z[0] + b[1] * z[1] + b[2] * z[2]
                };
                let cell = &mut self.depth[y * self.width + x];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }
}

/// Occluding boundary of the model instance `alpha` seen by `camera`.
pub fn occluding_boundary(
    model: &ShapeModel,
    alpha: &DVector<f64>,
    camera: &Camera,
    raster: Option<(u32, u32)>,
    exec: Exec,
) -> Result<BoundarySet> {
    let points = vertices(&model.synthesize(alpha)?);
    Ok(PosedMesh::new(&points, model.topology(), camera)?.occluding_boundary(raster, exec))
}

/// Draw the visible silhouette edges of a model instance as an edge map.
pub fn render_contour(
    model: &ShapeModel,
    alpha: &DVector<f64>,
    camera: &Camera,
    width: u32,
    height: u32,
) -> Result<EdgeMap> {
    let points = vertices(&model.synthesize(alpha)?);
    let mesh = PosedMesh::new(&points, model.topology(), camera)?;
    let boundary = mesh.occluding_boundary(Some((width, height)), Exec::Sequential);
    let mut edges = EdgeMap::empty(width, height);
    for (a, b) in mesh.silhouette_edges(Exec::Sequential) {
        if boundary.contains(a) && boundary.contains(b) {
            draw_segment(&mut edges, &mesh.image[a], &mesh.image[b]);
        }
    }
    Ok(edges)
}
