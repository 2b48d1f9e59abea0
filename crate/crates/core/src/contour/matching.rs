//! Mutual nearest-neighbour pairing of projected boundary vertices with edge pixels.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::edges::EdgeMap;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub vertex: usize,
    pub pixel: (u32, u32),
    pub distance: f64,
}

/// Which matched pairs to drop. Both filters may be active at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFilter {
    /// Keep pairs at or below this percentile (0-100) of the pair distances.
    pub percentile: Option<f64>,
    /// Keep pairs no farther apart than this many pixels.
    pub max_distance: Option<f64>,
}

impl Default for PairFilter {
    fn default() -> Self {
        Self {
            percentile: Some(90.0),
            max_distance: None,
        }
    }
}

impl PairFilter {
    pub fn none() -> Self {
        Self {
            percentile: None,
            max_distance: None,
        }
    }

    pub fn apply(&self, mut pairs: Vec<Correspondence>) -> Vec<Correspondence> {
        if let (Some(q), false) = (self.percentile, pairs.is_empty()) {
            let mut d: Vec<f64> = pairs.iter().map(|c| c.distance).collect();
            d.sort_by(f64::total_cmp);
            let rank = ((q.clamp(0.0, 100.0) / 100.0 * d.len() as f64).ceil() as usize).max(1);
            let cut = d[rank - 1];
            pairs.retain(|c| c.distance <= cut);
        }
        if let Some(t) = self.max_distance {
            pairs.retain(|c| c.distance <= t);
        }
        pairs
    }
}

fn pixel_point((x, y): (u32, u32)) -> Vector2<f64> {
    Vector2::new(x as f64, y as f64)
}

/// Index of the nearest item; ties go to the earliest.
fn nearest<T>(items: &[T], target: &Vector2<f64>, pos: impl Fn(&T) -> Vector2<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.iter().enumerate() {
        let d = (pos(item) - target).norm_squared();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, d)| (i, d.sqrt()))
}

/// Pairs `(vertex, pixel)` where the pixel is the vertex's nearest edge pixel
/// and the vertex is the pixel's nearest projected point, then filtered.
/// `points` are `(vertex id, image position)`. Output is ordered by vertex id.
pub fn mutual_nearest_pairs(
    points: &[(usize, Vector2<f64>)],
    edges: &EdgeMap,
    filter: &PairFilter,
    exec: Exec,
) -> Vec<Correspondence> {
    if points.is_empty() || edges.is_empty() {
        return Vec::new();
    }
    let pixels: Vec<(u32, u32)> = edges.pixels().collect();
    let found = exec.map(points, |(vertex, p)| {
        let (k, distance) = nearest(&pixels, p, |&px| pixel_point(px))?;
        let (back, _) = nearest(points, &pixel_point(pixels[k]), |(_, q)| *q)?;
        (points[back].0 == *vertex).then_some(Correspondence {
            vertex: *vertex,
            pixel: pixels[k],
            distance,
        })
    });
    let mut pairs: Vec<_> = found.into_iter().flatten().collect();
    pairs.sort_by_key(|c| (c.vertex, c.pixel));
    filter.apply(pairs)
}
