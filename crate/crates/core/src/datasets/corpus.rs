//! In-memory corpus and its on-disk directory format.
//!
//! A corpus directory holds:
//!
//! * `factors.json`: the serialized [`FactorSpace`].
//! * `images.bin`: the 8-byte magic `CCDIMGv1`, a little-endian `u32` header
//!   length, a UTF-8 JSON header `{"dtype":"<f4","order":"C","shape":[N,H,W,C]}`,
//!   then `N·H·W·C` little-endian `f32` values in row-major order.
//! * `labels.csv`: one row per sample with `flat`, one `idx_<factor>` column
//!   per factor (raw grid index) and one `u_<factor>` column per factor
//!   (normalized label).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{render, FactorSpace, Sample};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: &[u8; 8] = b"CCDIMGv1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagesHeader {
    pub dtype: String,
    pub order: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub space: FactorSpace,
    /// `len × pixels` row-major intensities.
    pub images: Vec<f32>,
    pub factor_index: Vec<Vec<usize>>,
    /// `len × m` normalized labels.
    pub u: Array2<f64>,
}

impl Corpus {
    /// Render the complete Cartesian product of the factor grids.
    pub fn generate(space: &FactorSpace) -> Result<Self> {
        let n = space.corpus_len();
        let px = space.image.pixels();
        let mut images = Vec::with_capacity(n * px);
        let mut factor_index = Vec::with_capacity(n);
        let mut u = Array2::zeros((n, space.m()));
        for flat in 0..n {
            let Sample {
                image,
                u: labels,
                factor_index: idx,
            } = render(space, &space.unflatten(flat))?;
            images.extend_from_slice(&image);
            for (j, l) in labels.into_iter().enumerate() {
                u[[flat, j]] = l;
            }
            factor_index.push(idx);
        }
        Ok(Self {
            space: space.clone(),
            images,
            factor_index,
            u,
        })
    }

    pub fn len(&self) -> usize {
        self.factor_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factor_index.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.space.image.pixels()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.pixels();
        &self.images[i * px..(i + 1) * px]
    }

    /// Images of `ids` as a `batch × pixels` matrix, channel-major
    /// (`C·H·W`) within each row so convolutions can consume it directly.
    pub fn batch_images(&self, ids: &[usize]) -> Array2<f64> {
        let img = self.space.image;
        let (h, w, c) = (img.height, img.width, img.channels);
        let mut out = Array2::zeros((ids.len(), self.pixels()));
        for (r, &i) in ids.iter().enumerate() {
            let src = self.image(i);
            let mut row = out.row_mut(r);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        row[(ch * h + y) * w + x] = src[(y * w + x) * c + ch] as f64;
                    }
                }
            }
        }
        out
    }

    pub fn batch_labels(&self, ids: &[usize]) -> Array2<f64> {
        let m = self.space.m();
        Array2::from_shape_fn((ids.len(), m), |(r, j)| self.u[[ids[r], j]])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("factors.json"), serde_json::to_string_pretty(&self.space)?)?;
        let img = self.space.image;
        write_images(
            &dir.join("images.bin"),
            &[self.len(), img.height, img.width, img.channels],
            &self.images,
        )?;
        let mut wtr = csv::Writer::from_path(dir.join("labels.csv"))?;
        let mut header = vec!["flat".to_string()];
        header.extend(self.space.factors.iter().map(|f| format!("idx_{}", f.name)));
        header.extend(self.space.factors.iter().map(|f| format!("u_{}", f.name)));
        wtr.write_record(&header)?;
        for (flat, idx) in self.factor_index.iter().enumerate() {
            let mut rec = vec![flat.to_string()];
            rec.extend(idx.iter().map(|i| i.to_string()));
            rec.extend(self.u.row(flat).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let space: FactorSpace = serde_json::from_str(&fs::read_to_string(dir.join("factors.json"))?)?;
        space.validate()?;
        let (shape, images) = read_images(&dir.join("images.bin"))?;
        let img = space.image;
        let n = space.corpus_len();
        if shape != [n, img.height, img.width, img.channels] {
            return Err(Error::format(
                dir.join("images.bin"),
                format!("shape {shape:?} does not match factor space"),
            ));
        }
        let mut factor_index = Vec::with_capacity(n);
        let mut u = Array2::zeros((n, space.m()));
        let mut rdr = csv::Reader::from_path(dir.join("labels.csv"))?;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let m = space.m();
            if rec.len() != 1 + 2 * m || row >= n {
                return Err(Error::format(dir.join("labels.csv"), format!("bad row {row}")));
            }
            let parse_err = |e: &dyn std::fmt::Display| Error::format(dir.join("labels.csv"), format!("row {row}: {e}"));
            let idx = (0..m)
                .map(|j| rec[1 + j].parse::<usize>().map_err(|e| parse_err(&e)))
                .collect::<Result<Vec<_>>>()?;
            for j in 0..m {
                u[[row, j]] = rec[1 + m + j].parse::<f64>().map_err(|e| parse_err(&e))?;
            }
            factor_index.push(idx);
        }
        if factor_index.len() != n {
            return Err(Error::format(dir.join("labels.csv"), "row count mismatch"));
        }
        Ok(Self {
            space,
            images,
            factor_index,
            u,
        })
    }
}

pub fn write_images(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::contract(format!(
            "image data has {} values, shape {shape:?} needs {expected}",
            data.len()
        )));
    }
    let header = serde_json::to_vec(&ImagesHeader {
        dtype: "<f4".into(),
        order: "C".into(),
        shape: shape.to_vec(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMAGES_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGES_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: ImagesHeader = serde_json::from_slice(&header)?;
    if header.dtype != "<f4" || header.order != "C" {
        return Err(Error::format(path, "only little-endian f32 C-order is supported"));
    }
    let count: usize = header.shape.iter().product();
    let mut bytes = Vec::with_capacity(count * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", count * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, data))
}
