//! Edge maps: detection from grayscale rasters, PBM/PGM/CSV ingestion and
//! rendering of model contours.

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder, ImageReader, Luma};
use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Set of edge pixels inside a `width x height` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    pixels: BTreeSet<(u32, u32)>,
}

impl EdgeMap {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: BTreeSet::new(),
        }
    }

    pub fn new(width: u32, height: u32, pixels: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut map = Self::empty(width, height);
        for (x, y) in pixels {
            map.insert(x, y)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, x: u32, y: u32) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(Error::invalid(format!(
                "edge pixel ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        self.pixels.insert((x, y));
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.pixels.contains(&(x, y))
    }

    /// Pixels in `(x, y)` lexicographic order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.pixels.iter().copied()
    }

    pub fn points(&self) -> Vec<Vector2<f64>> {
        self.pixels().map(|(x, y)| Vector2::new(x as f64, y as f64)).collect()
    }

    /// Binary mask with edges at 255.
    pub fn to_image(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width, self.height);
        for (x, y) in self.pixels() {
            img.put_pixel(x, y, Luma([255]));
        }
        img
    }

    /// Edge pixels are the nonzero pixels of `img`.
    pub fn from_mask(img: &GrayImage) -> Self {
        let pixels = img
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0[0] != 0)
            .map(|(x, y, _)| (x, y))
            .collect();
        Self {
            width: img.width(),
            height: img.height(),
            pixels,
        }
    }
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |x: i64, y: i64| img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32).0[0] as f64;
    let mut gx = vec![0.0; (w * h) as usize];
    let mut gy = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Sobel gradient, non-maximum suppression and hysteresis with absolute
/// thresholds on the gradient magnitude.
pub fn detect_edges(img: &GrayImage, low: f64, high: f64) -> Result<EdgeMap> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot detect edges in an empty image"));
    }
    if !(low > 0.0) || !(high >= low) {
        return Err(Error::invalid(format!("thresholds need high >= low > 0, got low {low}, high {high}")));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (gx, gy) = sobel_magnitude(img);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let get = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy) = match angle {
                a if !(22.5..157.5).contains(&a) => (1, 0),
                a if a < 67.5 => (1, 1),
                a if a < 112.5 => (0, 1),
                _ => (-1, 1),
            };
            let (xi, yi) = (x as i64, y as i64);
            // ties keep the pixel on the positive side so a step edge stays one pixel wide
            if m >= get(xi - dx, yi - dy) && m > get(xi + dx, yi + dy) {
                thin[i] = m;
            }
        }
    }

    let mut keep = vec![false; w * h];
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| thin[i] >= high).collect();
    for &i in &queue {
        keep[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !keep[j] && thin[j] >= low {
                    keep[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    let pixels = (0..w * h)
        .filter(|&i| keep[i])
        .map(|i| ((i % w) as u32, (i / w) as u32));
    EdgeMap::new(img.width(), img.height(), pixels)
}

/// [`detect_edges`] with thresholds at 10% and 20% of the largest gradient.
pub fn detect_edges_relative(img: &GrayImage) -> Result<EdgeMap> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot detect edges in an empty image"));
    }
    let (gx, gy) = sobel_magnitude(img);
    let max = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(EdgeMap::empty(img.width(), img.height()));
    }
    detect_edges(img, 0.1 * max, 0.2 * max)
}

/// Read a grayscale raster (any format the `image` crate decodes).
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    Ok(ImageReader::open(path)?.with_guessed_format()?.decode()?.to_luma8())
}

/// Read an edge map from a binary PBM (set bit = edge), binary PGM
/// (nonzero = edge) or an `x,y` CSV. CSV files carry no size, so `dims`
/// supplies it; without `dims` the bounding box of the pixels is used.
/// For PNM files `dims`, when given, must match the file.
pub fn load_edges(path: impl AsRef<Path>, dims: Option<(u32, u32)>) -> Result<EdgeMap> {
    let path = path.as_ref();
    let mut head = [0u8; 2];
    let n = File::open(path)?.read(&mut head)?;
    let map = match &head[..n] {
        b"P4" => {
            let img = load_gray(path)?;
            // the decoder maps set (black) bits to 0
            let pixels = img
                .enumerate_pixels()
                .filter(|(_, _, p)| p.0[0] == 0)
                .map(|(x, y, _)| (x, y))
                .collect();
            EdgeMap {
                width: img.width(),
                height: img.height(),
                pixels,
            }
        }
        b"P5" => EdgeMap::from_mask(&load_gray(path)?),
        _ => return read_edges_csv(File::open(path)?, dims),
    };
    if let Some(d) = dims {
        if d != map.dimensions() {
            return Err(Error::invalid(format!(
                "edge map is {}x{} but the image is {}x{}",
                map.width, map.height, d.0, d.1
            )));
        }
    }
    Ok(map)
}

pub fn read_edges_csv<R: Read>(reader: R, dims: Option<(u32, u32)>) -> Result<EdgeMap> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(Error::Row {
            row: 1,
            message: "expected header x,y".into(),
        });
    }
    let mut pixels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |k: usize| -> Result<u32> {
            rec.get(k)
                .ok_or_else(|| Error::Row {
                    row,
                    message: "expected 2 fields".into(),
                })?
                .parse()
                .map_err(|e| Error::Row {
                    row,
                    message: format!("bad coordinate: {e}"),
                })
        };
        let (x, y) = (field(0)?, field(1)?);
        if let Some((w, h)) = dims {
            if x >= w || y >= h {
                return Err(Error::Row {
                    row,
                    message: format!("pixel ({x}, {y}) outside {w}x{h} image"),
                });
            }
        }
        pixels.push((x, y));
    }
    let (w, h) = dims.unwrap_or_else(|| {
        pixels
            .iter()
            .fold((0, 0), |(w, h), &(x, y)| (w.max(x + 1), h.max(y + 1)))
    });
    EdgeMap::new(w, h, pixels)
}

pub fn write_edges_csv<W: Write>(edges: &EdgeMap, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "y"])?;
    for (x, y) in edges.pixels() {
        wtr.write_record([x.to_string(), y.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write by extension: `.pbm`, `.pgm` or `.csv`.
pub fn save_edges(edges: &EdgeMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut out = BufWriter::new(File::create(path)?);
    match ext.as_str() {
        "csv" => write_edges_csv(edges, &mut out)?,
        "pgm" | "pbm" => {
            let (subtype, img) = if ext == "pgm" {
                (PnmSubtype::Graymap(SampleEncoding::Binary), edges.to_image())
            } else {
                // the encoder takes 0 for a set (black) bit and 1 for clear
                let mut img = GrayImage::from_pixel(edges.width, edges.height, Luma([1]));
                for (x, y) in edges.pixels() {
                    img.put_pixel(x, y, Luma([0]));
                }
                (PnmSubtype::Bitmap(SampleEncoding::Binary), img)
            };
            PnmEncoder::new(&mut out).with_subtype(subtype).write_image(
                img.as_raw(),
                edges.width,
                edges.height,
                image::ExtendedColorType::L8,
            )?;
        }
        other => return Err(Error::invalid(format!("unsupported edge file extension {other:?}"))),
    }
    out.flush()?;
    Ok(())
}

/// Rasterise a 2D segment into `edges`, dropping pixels outside the image.
pub fn draw_segment(edges: &mut EdgeMap, a: &Vector2<f64>, b: &Vector2<f64>) {
    let steps = ((b - a).amax().ceil() as usize).max(1);
    for k in 0..=steps {
        let p = a + (b - a) * (k as f64 / steps as f64);
        let (x, y) = (p.x.round(), p.y.round());
        if x >= 0.0 && y >= 0.0 && x < edges.width as f64 && y < edges.height as f64 {
            edges.pixels.insert((x as u32, y as u32));
        }
    }
}
