//! 2D landmark observations and their CSV form (`vertex_index,x,y`).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapemodel::ShapeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub vertex: usize,
    pub position: Vector2<f64>,
}

/// Ordered `(vertex, pixel position)` observations with distinct vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Landmark>", into = "Vec<Landmark>")]
pub struct Landmarks2D {
    entries: Vec<Landmark>,
}

impl TryFrom<Vec<Landmark>> for Landmarks2D {
    type Error = Error;

    fn try_from(entries: Vec<Landmark>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<Landmarks2D> for Vec<Landmark> {
    fn from(l: Landmarks2D) -> Self {
        l.entries
    }
}

impl Landmarks2D {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("at least one landmark is required"));
        }
        let mut seen: Vec<usize> = entries.iter().map(|l| l.vertex).collect();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("vertex {} observed twice", w[0])));
        }
        if entries.iter().any(|l| !l.position.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("landmark positions must be finite"));
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(vertices: &[usize], positions: &[Vector2<f64>]) -> Result<Self> {
        if vertices.len() != positions.len() {
            return Err(Error::invalid("vertex and position counts differ"));
        }
        Self::new(
            vertices
                .iter()
                .zip(positions)
                .map(|(&vertex, &position)| Landmark { vertex, position })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.entries.iter()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|l| l.vertex).collect()
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.entries.iter().map(|l| l.position).collect()
    }

    /// `[x1, y1, x2, y2, ...]`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.len(),
            self.entries.iter().flat_map(|l| [l.position.x, l.position.y]),
        )
    }

    pub fn position_of(&self, vertex: usize) -> Option<Vector2<f64>> {
        self.entries.iter().find(|l| l.vertex == vertex).map(|l| l.position)
    }

    pub fn validate_for(&self, model: &ShapeModel) -> Result<()> {
        let n = model.num_vertices();
        match self.entries.iter().find(|l| l.vertex >= n) {
            Some(l) => Err(Error::invalid(format!("landmark vertex {} out of range 0..{n}", l.vertex))),
            None => Ok(()),
        }
    }

    /// Append observations for vertices not already present.
    pub fn extended(&self, extra: impl IntoIterator<Item = Landmark>) -> Self {
        let mut entries = self.entries.clone();
        for l in extra {
            if !entries.iter().any(|e| e.vertex == l.vertex) {
                entries.push(l);
            }
        }
        Self { entries }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["vertex_index", "x", "y"] {
            return Err(Error::Row {
                row: 1,
                message: format!("expected header vertex_index,x,y, found {:?}", headers),
            });
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Row {
                    row,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let bad = |what: &str| Error::Row {
                row,
                message: format!("cannot parse {what}"),
            };
            let vertex = rec[0].trim().parse().map_err(|_| bad("vertex_index"))?;
            let x: f64 = rec[1].trim().parse().map_err(|_| bad("x"))?;
            let y: f64 = rec[2].trim().parse().map_err(|_| bad("y"))?;
            entries.push(Landmark {
                vertex,
                position: Vector2::new(x, y),
            });
        }
        Self::new(entries)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "vertex_index,x,y")?;
        for l in &self.entries {
            writeln!(w, "{},{},{}", l.vertex, fmt_f64(l.position.x), fmt_f64(l.position.y))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Float formatting used by every CSV writer: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let l = Landmarks2D::from_pairs(
            &[3, 0, 7],
            &[Vector2::new(1.5, -2.0), Vector2::new(0.1, 0.2), Vector2::new(1e-17, 3.0 / 7.0)],
        )
        .unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("vertex_index,x,y\n"));
        let back = Landmarks2D::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        assert!(Landmarks2D::from_pairs(&[1, 1], &[Vector2::zeros(), Vector2::zeros()]).is_err());
        assert!(Landmarks2D::new(vec![]).is_err());
        let text = "vertex_index,x,y\n0,1,2\n1,abc,2\n";
        match Landmarks2D::read_csv(text.as_bytes()) {
            Err(Error::Row { row: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(Landmarks2D::read_csv("a,b,c\n0,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn extended_skips_existing_vertices() {
        let l = Landmarks2D::from_pairs(&[0, 1], &[Vector2::zeros(), Vector2::zeros()]).unwrap();
        let e = l.extended([
            Landmark { vertex: 1, position: Vector2::new(5.0, 5.0) },
            Landmark { vertex: 4, position: Vector2::new(1.0, 1.0) },
        ]);
        assert_eq!(e.indices(), vec![0, 1, 4]);
        assert_eq!(e.position_of(1), Some(Vector2::zeros()));
    }
}
