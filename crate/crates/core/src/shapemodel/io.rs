//! SMM1 binary model files and OBJ mesh export.
//!
//! Layout (little-endian): magic `SMM1`; `u32` N, `u32` S, `u32` P; `f64` mean
//! (3N), basis column-major (3N*S), sigma (S); `u32` T followed by 3T `u32`
//! triangle indices; then P `u32` landmark indices.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{MeshTopology, ShapeModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMM1";

pub fn save_model(model: &ShapeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_model(&bytes)
}

pub fn write_model<W: Write>(model: &ShapeModel, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    let n = model.num_vertices() as u32;
    let s = model.num_modes() as u32;
    let p = model.landmark_indices().len() as u32;
    for v in [n, s, p] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in model.mean().iter().chain(model.basis().iter()).chain(model.sigma().iter()) {
        w.write_all(&x.to_le_bytes())?;
    }
    let tris = model.topology().triangles();
    w.write_all(&(tris.len() as u32).to_le_bytes())?;
    for tri in tris {
        for &i in tri {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    for &i in model.landmark_indices() {
        w.write_all(&(i as u32).to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_model(bytes: &[u8]) -> Result<ShapeModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected SMM1".into(),
        });
    }
    let n = c.u32("vertex count")? as usize;
    let s = c.u32("mode count")? as usize;
    let p = c.u32("landmark count")? as usize;
    if n == 0 || s == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("header declares N={n}, S={s}; both must be positive"),
        });
    }
    // The f64 block size is fully determined by the header; check it before
    // reading so an inconsistent header is reported where it lives.
    let floats = 3 * n + 3 * n * s + s;
    let need = floats * 8 + 4;
    if bytes.len() < c.pos + need {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "header declares N={n}, S={s} ({} basis rows), but only {} payload bytes follow",
                3 * n,
                bytes.len() - c.pos
            ),
        });
    }
    let mean = DVector::from_vec(c.f64s(3 * n, "mean")?);
    let basis = DMatrix::from_vec(3 * n, s, c.f64s(3 * n * s, "basis")?);
    let sigma_offset = c.pos as u64;
    let sigma = DVector::from_vec(c.f64s(s, "sigma")?);
    if let Some(i) = sigma.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Format {
            offset: sigma_offset + 8 * i as u64,
            message: format!("sigma[{i}] = {} must be positive", sigma[i]),
        });
    }
    let t = c.u32("triangle count")? as usize;
    let tri_offset = c.pos as u64;
    let mut tris = Vec::with_capacity(t);
    for _ in 0..t {
        let a = c.u32("triangle")? as usize;
        let b = c.u32("triangle")? as usize;
        let d = c.u32("triangle")? as usize;
        tris.push([a, b, d]);
    }
    let lm_offset = c.pos as u64;
    let mut landmarks = Vec::with_capacity(p);
    for _ in 0..p {
        landmarks.push(c.u32("landmark index")? as usize);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    let topology = MeshTopology::new(tris, n).map_err(|e| Error::Format {
        offset: tri_offset,
        message: e.to_string(),
    })?;
    ShapeModel::new(mean, basis, sigma, landmarks, topology).map_err(|e| Error::Format {
        offset: lm_offset,
        message: e.to_string(),
    })
}

/// Write vertices and faces as ASCII OBJ (`v` and `f` records only).
pub fn write_obj<W: Write>(shape: &DVector<f64>, topology: &MeshTopology, w: &mut W) -> Result<()> {
    for v in shape.as_slice().chunks_exact(3) {
        writeln!(w, "v {:.17e} {:.17e} {:.17e}", v[0], v[1], v[2])?;
    }
    for t in topology.triangles() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}
