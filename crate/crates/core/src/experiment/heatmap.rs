//! PNG and CSV exports of the learned causal matrix and predictor weights.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::ModelState;

const CELL: u32 = 24;

/// Diverging map: blue for negative, white for zero, red for positive.
fn color(v: f64, scale: f64) -> Rgb<u8> {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(t), fade(t), 255])
    }
}

/// Render `values` as a grid of `CELL`-pixel squares scaled by its largest
/// magnitude.
pub fn matrix_png(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (rows, cols) = values.dim();
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let img = RgbImage::from_fn(cols as u32 * CELL, rows as u32 * CELL, |x, y| {
        color(values[[(y / CELL) as usize, (x / CELL) as usize]], scale)
    });
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot write png: {e}")))
}

pub fn matrix_csv(path: &Path, row_names: &[String], col_names: &[String], values: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(col_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in row_names.iter().zip(values.rows()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `W` (`n × 1`) and `Aᵀ` (`n × m`, concepts by factors) as CSV and
/// PNG into `dir`.
pub fn write_heatmaps(dir: &Path, model: &ModelState, factor_names: &[&str]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let w = model.store.get(model.scm.w);
    let at = model.a().t().to_owned();
    let concepts: Vec<String> = (0..at.nrows()).map(|i| format!("c{}", i + 1)).collect();
    let factors: Vec<String> = factor_names.iter().map(|s| s.to_string()).collect();
    matrix_csv(&dir.join("W.csv"), &concepts, &["w".to_string()], w)?;
    matrix_csv(&dir.join("A_T.csv"), &concepts, &factors, &at)?;
    matrix_png(&dir.join("W.png"), w)?;
    matrix_png(&dir.join("A_T.png"), &at)
}
