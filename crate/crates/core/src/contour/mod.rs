//! Shape from occluding contours: the landmark fit is extended with
//! boundary vertices paired to image edge pixels, and the pairing and fit
//! are alternated until the pairing settles.

mod boundary;
mod edges;
mod matching;

use std::collections::BTreeSet;

use log::{debug, warn};
use nalgebra::Vector2;

pub use boundary::{
    occluding_boundary, render_contour, BoundarySet, DepthBuffer, PosedMesh, DEFAULT_RASTER, DEPTH_TOLERANCE,
};
pub use edges::{
    detect_edges, detect_edges_relative, draw_segment, load_edges, load_gray, read_edges_csv, save_edges,
    sobel_magnitude, write_edges_csv, EdgeMap,
};
pub use matching::{mutual_nearest_pairs, Correspondence, PairFilter};

use crate::camera::{Camera, CameraKind};
use crate::error::Result;
use crate::fit::{fit_landmark_error, fit_landmarks, FitConfig, FitResult};
use crate::landmarks::{Landmark, Landmarks2D};
use crate::par::Exec;
use crate::shapemodel::{vertex, ShapeModel};
use crate::{ortho, persp};

#[derive(Debug, Clone, PartialEq)]
pub struct ContourConfig {
    /// Pairing/refit rounds after the landmark fit; 0 returns the landmark fit.
    pub max_rounds: usize,
    pub filter: PairFilter,
    /// Stop once fewer than this fraction of the pairs changed between rounds.
    pub stable_fraction: f64,
    pub exec: Exec,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            filter: PairFilter::default(),
            stable_fraction: 0.01,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourRound {
    pub boundary_vertices: usize,
    pub correspondences: usize,
    /// Pairs added or removed relative to the previous round.
    pub changed: usize,
    /// Objective of the refit over landmarks plus contour points.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ContourFit {
    pub fit: FitResult,
    pub rounds: Vec<ContourRound>,
    /// Pairs used by the final refit.
    pub correspondences: Vec<Correspondence>,
    /// Occluding boundary of the final fit.
    pub boundary: BoundarySet,
}

type PairSet = BTreeSet<(usize, (u32, u32))>;

/// Fit landmarks, then alternate boundary extraction, mutual nearest
/// neighbour pairing against `edges` and a warm-started refit on the
/// original landmarks plus the paired boundary vertices.
pub fn fit_contours(
    model: &ShapeModel,
    landmarks: &Landmarks2D,
    edges: &EdgeMap,
    config: &FitConfig,
    kind: CameraKind,
    fixed_tz: Option<f64>,
    contour: &ContourConfig,
) -> Result<ContourFit> {
    let base = fit_landmarks(model, landmarks, config, kind, fixed_tz)?;
    let raster = Some(edges.dimensions());
    let landmark_only = |mut fit: FitResult, flag: bool| -> Result<ContourFit> {
        fit.flags.no_correspondences = flag;
        let boundary = occluding_boundary(model, &fit.alpha, &fit.camera, raster, contour.exec)?;
        Ok(ContourFit {
            fit,
            rounds: Vec::new(),
            correspondences: Vec::new(),
            boundary,
        })
    };
    if contour.max_rounds == 0 || edges.is_empty() {
        return landmark_only(base, false);
    }

    let fixed: BTreeSet<usize> = landmarks.indices().into_iter().collect();
    let mut current = base.clone();
    let mut pairs_used: Vec<Correspondence> = Vec::new();
    let mut previous: Option<PairSet> = None;
    let mut rounds = Vec::new();
    let mut earlier_reports = Vec::new();
    for round in 0..contour.max_rounds {
        let boundary = occluding_boundary(model, &current.alpha, &current.camera, raster, contour.exec)?;
        let shape = model.synthesize(&current.alpha)?;
        let points = boundary
            .vertices
            .iter()
            .filter(|v| !fixed.contains(v))
            .map(|&v| Ok((v, current.camera.project(&vertex(&shape, v), v)?)))
            .collect::<Result<Vec<_>>>()?;
        let pairs = mutual_nearest_pairs(&points, edges, &contour.filter, contour.exec);
        if pairs.is_empty() {
            warn!("contour round {round}: no correspondences, keeping the landmark fit");
            return landmark_only(base, true);
        }
        let set: PairSet = pairs.iter().map(|c| (c.vertex, c.pixel)).collect();
        let changed = previous.as_ref().map_or(set.len(), |p| p.symmetric_difference(&set).count());
        if previous.is_some() && (changed as f64) < contour.stable_fraction * set.len() as f64 {
            debug!("contour pairs settled after {round} rounds");
            break;
        }

        let combined = landmarks.extended(pairs.iter().map(|c| Landmark {
            vertex: c.vertex,
            position: Vector2::new(c.pixel.0 as f64, c.pixel.1 as f64),
        }));
        let refit = match current.camera {
            Camera::Ortho(pose) => ortho::fit_landmarks_ortho_from(model, &combined, config, pose.rotation, pose.scale)?,
            Camera::Persp(cam) => persp::refine_persp(model, &combined, config, fixed_tz, &cam, &current.alpha)?,
        };
        debug!(
            "contour round {round}: {} boundary vertices, {} pairs, objective {:.6e}",
            boundary.len(),
            pairs.len(),
            refit.objective
        );
        rounds.push(ContourRound {
            boundary_vertices: boundary.len(),
            correspondences: pairs.len(),
            changed,
            objective: refit.objective,
        });
        earlier_reports.push(current.report.clone());
        current = refit;
        pairs_used = pairs;
        previous = Some(set);
    }

    current.landmark_error = fit_landmark_error(model, landmarks, &current.alpha, &current.camera);
    earlier_reports.append(&mut current.stage_reports);
    current.stage_reports = earlier_reports;
    let boundary = occluding_boundary(model, &current.alpha, &current.camera, raster, contour.exec)?;
    Ok(ContourFit {
        fit: current,
        rounds,
        correspondences: pairs_used,
        boundary,
    })
}
