//! Versioned JSON fit reports and coefficient CSV files.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraKind};
use crate::error::{Error, Result};
use crate::fit::{FitFlags, FitResult};
use crate::landmarks::{fmt_f64, Landmarks2D};
use crate::nls::Termination;
use crate::shapemodel::ShapeModel;

pub const SCHEMA: &str = "geofit3d/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub camera_kind: CameraKind,
    pub alpha: Vec<f64>,
    /// `alpha / sigma`.
    pub alpha_normalized: Vec<f64>,
    pub camera: Camera,
    pub objective: f64,
    /// Mean landmark error in % interocular.
    pub landmark_error_pct: Option<f64>,
    /// Steps of the final nonlinear solve.
    pub iterations: usize,
    /// Steps of every earlier stage, in order.
    pub stage_iterations: Vec<usize>,
    pub termination: Termination,
    pub flags: FitFlags,
    pub landmark_indices: Vec<usize>,
    /// Contour rounds run, for contour fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contour_rounds: Option<usize>,
}

impl FitReport {
    pub fn new(model: &ShapeModel, landmarks: &Landmarks2D, fit: &FitResult) -> Self {
        Self {
            schema: SCHEMA.to_owned(),
            camera_kind: fit.camera.kind(),
            alpha: fit.alpha.iter().copied().collect(),
            alpha_normalized: model.normalize(&fit.alpha).iter().copied().collect(),
            camera: fit.camera,
            objective: fit.objective,
            landmark_error_pct: fit.landmark_error,
            iterations: fit.report.iterations,
            stage_iterations: fit.stage_reports.iter().map(|r| r.iterations).collect(),
            termination: fit.report.termination,
            flags: fit.flags.clone(),
            landmark_indices: landmarks.indices(),
            contour_rounds: None,
        }
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    /// Check the schema tag and the consistency with `model`.
    pub fn validate_for(&self, model: &ShapeModel) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported report schema {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        if self.camera_kind != self.camera.kind() {
            return Err(Error::invalid("camera_kind does not match the camera"));
        }
        if self.alpha.len() != model.num_modes() {
            return Err(Error::invalid(format!(
                "report has {} coefficients, model has {} modes",
                self.alpha.len(),
                model.num_modes()
            )));
        }
        if let Some(&i) = self.landmark_indices.iter().find(|&&i| i >= model.num_vertices()) {
            return Err(Error::invalid(format!("landmark vertex {i} out of range")));
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let report: Self = serde_json::from_reader(r)?;
        if report.schema != SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported report schema {:?}, expected {SCHEMA:?}",
                report.schema
            )));
        }
        Ok(report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Coefficient file: header `alpha`, one coefficient per row.
pub fn write_alpha_csv<W: Write>(alpha: &DVector<f64>, mut w: W) -> Result<()> {
    writeln!(w, "alpha")?;
    for a in alpha.iter() {
        writeln!(w, "{}", fmt_f64(*a))?;
    }
    Ok(())
}

pub fn read_alpha_csv<R: Read>(r: R) -> Result<DVector<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = reader.headers()?.clone();
    if headers.len() != 1 || headers.get(0).map(str::trim) != Some("alpha") {
        return Err(Error::Row {
            row: 1,
            message: format!("expected header `alpha`, got {headers:?}"),
        });
    }
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = record.get(0).unwrap_or("").trim();
        let v: f64 = field.parse().map_err(|_| Error::Row {
            row,
            message: format!("not a number: {field:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Row {
                row,
                message: "non-finite coefficient".into(),
            });
        }
        values.push(v);
    }
    Ok(DVector::from_vec(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_landmarks, FitConfig};
    use crate::sampling::{frontal_camera, observe};
    use crate::shapemodel::make_synthetic_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn report_round_trip() {
        let m = make_synthetic_model(1, 200, 5, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha = DVector::from_fn(5, |i, _| 0.3 * m.sigma()[i]);
        let cam = frontal_camera(&m, 0.5, 200.0).unwrap();
        let l = observe(&m, &alpha, &Camera::Persp(cam), m.landmark_indices(), 0.5, &mut rng).unwrap();
        let fit = fit_landmarks(&m, &l, &FitConfig::default(), CameraKind::Persp, None).unwrap();
        let report = FitReport::new(&m, &l, &fit);
        report.validate_for(&m).unwrap();
        let mut buf = Vec::new();
        report.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"schema\": \"geofit3d/1\""));
        assert!(text.contains("\"kind\": \"persp\""));
        let back = FitReport::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.alpha(), fit.alpha);

        let other = make_synthetic_model(1, 200, 6, 0.2).unwrap();
        assert!(back.validate_for(&other).is_err());
        let wrong = text.replace("geofit3d/1", "geofit3d/0");
        assert!(FitReport::from_reader(wrong.as_bytes()).is_err());
    }

    #[test]
    fn alpha_csv() {
        let a = DVector::from_vec(vec![1.0, -2.5e-3, 1.0 / 3.0]);
        let mut buf = Vec::new();
        write_alpha_csv(&a, &mut buf).unwrap();
        assert_eq!(read_alpha_csv(buf.as_slice()).unwrap(), a);
        assert!(matches!(read_alpha_csv("alpha\n1\nx\n".as_bytes()), Err(Error::Row { row: 3, .. })));
        assert!(read_alpha_csv("beta\n1\n".as_bytes()).is_err());
    }
}
