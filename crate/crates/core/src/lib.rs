//! Fitting a linear 3D morphable shape model to 2D landmarks and occluding
//! contours, under scaled-orthographic or perspective projection, and
//! measuring how much 3D shape freedom such observations leave behind.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod contour;
pub mod error;
pub mod fit;
pub mod experiments;
pub mod flexibility;
pub mod landmarks;
pub mod metrics;
pub mod nls;
pub mod ortho;
pub mod persp;
pub mod report;
pub mod par;
pub mod sampling;
pub mod shapemodel;
pub mod snls;

pub use error::{Error, Result};
pub use fit::{fit_landmarks, FitConfig, FitFlags, FitResult};
pub use landmarks::{Landmark, Landmarks2D};
pub use shapemodel::{MeshTopology, ShapeModel};
