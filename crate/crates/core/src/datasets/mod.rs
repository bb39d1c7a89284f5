//! Procedurally generated factor datasets with fully known, mutually
//! independent generative factors.
//!
//! Two built-in factor spaces imitate dSprites (a single white sprite on black)
//! and Shapes3D (floor, wall and object hues around a centered object). The
//! corpus of a space is the full Cartesian product of its factor grids, so
//! every factor combination appears exactly once.

mod corpus;
mod render;
mod split;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{read_images, write_images, Corpus, ImagesHeader, IMAGES_MAGIC};
pub use render::render;
pub use split::{stratified_split, DatasetSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    DspritesLike,
    Shapes3dLike,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::DspritesLike => "dsprites_like",
            DatasetKind::Shapes3dLike => "shapes3d_like",
        }
    }

    /// Factors the train/test split is stratified on.
    pub fn default_stratification(self) -> &'static [&'static str] {
        match self {
            DatasetKind::DspritesLike => &["shape", "posX", "posY"],
            DatasetKind::Shapes3dLike => &["floor_hue", "wall_hue", "object_hue", "shape"],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsprites_like" => Ok(DatasetKind::DspritesLike),
            "shapes3d_like" => Ok(DatasetKind::Shapes3dLike),
            other => Err(Error::config(format!(
                "unknown dataset `{other}` (expected dsprites_like or shapes3d_like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    Mini,
    FullGrid,
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Resolution::Mini),
            "full-grid" | "full_grid" => Ok(Resolution::FullGrid),
            other => Err(Error::config(format!("unknown resolution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Categorical,
    Continuous,
}

/// One generative factor and its value grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    /// Category indices (categorical) or grid points in native units.
    pub values: Vec<f64>,
    /// Declared native range `[lo, hi]`.
    pub range: (f64, f64),
    /// Human-readable category names; empty for continuous factors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl FactorSpec {
    pub fn categorical(name: &str, labels: &[&str]) -> Self {
        let k = labels.len();
        Self {
            name: name.to_string(),
            kind: FactorKind::Categorical,
            values: (0..k).map(|i| i as f64).collect(),
            range: (0.0, k.saturating_sub(1) as f64),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn continuous(name: &str, values: Vec<f64>, range: (f64, f64)) -> Self {
        Self {
            name: name.to_string(),
            kind: FactorKind::Continuous,
            values,
            range,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Min-max normalized label of grid point `index`; a single-valued
    /// factor normalizes to 0.
    pub fn normalized(&self, index: usize) -> f64 {
        let lo = self.values[0];
        let hi = self.values[self.values.len() - 1];
        if hi > lo {
            (self.values[index] - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// Map a native-unit value onto the normalized scale of this grid.
    pub fn normalize_native(&self, value: f64) -> f64 {
        let lo = self.values[0];
        let hi = self.values[self.values.len() - 1];
        if hi > lo {
            (value - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config(format!("factor `{}` has no values", self.name)));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("factor `{}` values not strictly increasing", self.name)));
        }
        let (lo, hi) = self.range;
        if self.values.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::config(format!("factor `{}` values outside [{lo}, {hi}]", self.name)));
        }
        if self.kind == FactorKind::Categorical
            && self.values.iter().enumerate().any(|(i, &v)| v != i as f64)
        {
            return Err(Error::config(format!("categorical factor `{}` must be indexed 0..K", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Ordered set of independent generative factors plus the renderer's
/// image geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpace {
    pub dataset: DatasetKind,
    pub factors: Vec<FactorSpec>,
    pub image: ImageShape,
}

/// Knobs for building the built-in spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceOptions {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Number of sprite colors for the dSprites-like space (the source
    /// corpus has only white).
    pub dsprites_colors: usize,
}

impl Default for SpaceOptions {
    fn default() -> Self {
        Self {
            image_size: 64,
            dsprites_colors: 1,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Evenly spaced angles `k·2π/n`; with `n` coprime to 4 no two grid angles
/// coincide under the square's or ellipse's rotational symmetry.
fn orientations(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

pub fn build_factor_space(dataset_name: &str, resolution: Resolution) -> Result<FactorSpace> {
    build_factor_space_with(dataset_name.parse()?, resolution, SpaceOptions::default())
}

pub fn build_factor_space_with(
    dataset: DatasetKind,
    resolution: Resolution,
    options: SpaceOptions,
) -> Result<FactorSpace> {
    if options.image_size < 16 || options.image_size % 8 != 0 {
        return Err(Error::config(format!(
            "image_size must be a multiple of 8 and at least 16, got {}",
            options.image_size
        )));
    }
    let mini = resolution == Resolution::Mini;
    let factors = match dataset {
        DatasetKind::DspritesLike => {
            if options.dsprites_colors == 0 {
                return Err(Error::config("dsprites_colors must be positive"));
            }
            let color_names: Vec<String> = (0..options.dsprites_colors)
                .map(|i| if i == 0 { "white".to_string() } else { format!("gray{i}") })
                .collect();
            let color_refs: Vec<&str> = color_names.iter().map(String::as_str).collect();
            let (scales, orients, positions) = if mini { (5, 5, 6) } else { (6, 9, 16) };
            vec![
                FactorSpec::categorical("color", &color_refs),
                FactorSpec::categorical("shape", &["square", "ellipse", "heart"]),
                FactorSpec::continuous("scale", linspace(0.5, 1.0, scales), (0.5, 1.0)),
                FactorSpec::continuous("orientation", orientations(orients), (0.0, 2.0 * PI)),
                FactorSpec::continuous("posX", linspace(0.0, 1.0, positions), (0.0, 1.0)),
                FactorSpec::continuous("posY", linspace(0.0, 1.0, positions), (0.0, 1.0)),
            ]
        }
        DatasetKind::Shapes3dLike => {
            let (hues, scales, orients) = if mini { (4, 4, 3) } else { (6, 5, 5) };
            let orient_labels: Vec<String> = linspace(-30.0, 30.0, orients)
                .iter()
                .map(|d| format!("{d:+.0}deg"))
                .collect();
            let orient_refs: Vec<&str> = orient_labels.iter().map(String::as_str).collect();
            vec![
                FactorSpec::continuous("floor_hue", linspace(0.0, 0.9, hues), (0.0, 0.9)),
                FactorSpec::continuous("wall_hue", linspace(0.0, 0.9, hues), (0.0, 0.9)),
                FactorSpec::continuous("object_hue", linspace(0.0, 0.9, hues), (0.0, 0.9)),
                FactorSpec::continuous("scale", linspace(0.75, 1.25, scales), (0.75, 1.25)),
                FactorSpec::categorical("shape", &["cube", "cylinder", "sphere", "capsule"]),
                FactorSpec::categorical("orientation", &orient_refs),
            ]
        }
    };
    let channels = match dataset {
        DatasetKind::DspritesLike => 1,
        DatasetKind::Shapes3dLike => 3,
    };
    let space = FactorSpace {
        dataset,
        factors,
        image: ImageShape {
            height: options.image_size,
            width: options.image_size,
            channels,
        },
    };
    space.validate()?;
    Ok(space)
}

impl FactorSpace {
    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::config("factor space has no factors"));
        }
        for f in &self.factors {
            f.validate()?;
        }
        Ok(())
    }

    pub fn factor_position(&self, name: &str) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::config(format!("unknown factor `{name}` in {}", self.dataset)))
    }

    pub fn factor_names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(FactorSpec::len).collect()
    }

    /// Number of samples in the full Cartesian product.
    pub fn corpus_len(&self) -> usize {
        self.grid_sizes().iter().product()
    }

    pub fn check_index(&self, factor_index: &[usize]) -> Result<()> {
        if factor_index.len() != self.m() {
            return Err(Error::contract(format!(
                "factor index has {} entries, space has {} factors",
                factor_index.len(),
                self.m()
            )));
        }
        for (f, &i) in self.factors.iter().zip(factor_index) {
            if i >= f.len() {
                return Err(Error::Bounds {
                    factor: f.name.clone(),
                    index: i,
                    size: f.len(),
                });
            }
        }
        Ok(())
    }

    /// Mixed-radix flat position of a factor index (last factor fastest).
    pub fn flat_index(&self, factor_index: &[usize]) -> Result<usize> {
        self.check_index(factor_index)?;
        Ok(factor_index
            .iter()
            .zip(self.factors.iter())
            .fold(0, |acc, (&i, f)| acc * f.len() + i))
    }

    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.m()];
        for (slot, f) in idx.iter_mut().zip(&self.factors).rev() {
            *slot = flat % f.len();
            flat /= f.len();
        }
        idx
    }

    pub fn normalized_labels(&self, factor_index: &[usize]) -> Vec<f64> {
        self.factors
            .iter()
            .zip(factor_index)
            .map(|(f, &i)| f.normalized(i))
            .collect()
    }
}

/// One rendered image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major `H×W×C` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub u: Vec<f64>,
    pub factor_index: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsprites_mini_has_expected_factor_names() {
        let s = build_factor_space("dsprites_like", Resolution::Mini).unwrap();
        assert_eq!(s.factor_names(), ["color", "shape", "scale", "orientation", "posX", "posY"]);
        assert_eq!(s.m(), 6);
        assert_eq!(s.factors[1].labels, ["square", "ellipse", "heart"]);
        assert_eq!(s.image.channels, 1);
        assert!(s.corpus_len() <= 20_000);
    }

    #[test]
    fn shapes3d_mini_has_expected_factor_names() {
        let s = build_factor_space("shapes3d_like", Resolution::Mini).unwrap();
        assert_eq!(
            s.factor_names(),
            ["floor_hue", "wall_hue", "object_hue", "scale", "shape", "orientation"]
        );
        assert_eq!(s.image.channels, 3);
        assert!(s.corpus_len() <= 20_000);
    }

    #[test]
    fn full_grid_spaces_build() {
        for name in ["dsprites_like", "shapes3d_like"] {
            let s = build_factor_space(name, Resolution::FullGrid).unwrap();
            assert_eq!(s.m(), 6);
            assert!(s.corpus_len() > build_factor_space(name, Resolution::Mini).unwrap().corpus_len());
        }
    }

    #[test]
    fn unknown_dataset_is_a_configuration_error() {
        let err = build_factor_space("mnist", Resolution::Mini).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flat_index_round_trips() {
        let s = build_factor_space("dsprites_like", Resolution::Mini).unwrap();
        for flat in [0, 1, 17, 999, s.corpus_len() - 1] {
            assert_eq!(s.flat_index(&s.unflatten(flat)).unwrap(), flat);
        }
    }

    #[test]
    fn labels_are_monotone_in_grid_index() {
        let s = build_factor_space("shapes3d_like", Resolution::Mini).unwrap();
        for f in &s.factors {
            let u: Vec<f64> = (0..f.len()).map(|i| f.normalized(i)).collect();
            assert!(u.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(u[0], 0.0);
            assert_eq!(*u.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn categorical_labels_are_index_over_k_minus_one() {
        let s = build_factor_space("dsprites_like", Resolution::Mini).unwrap();
        assert_eq!(s.factors[1].normalized(1), 0.5);
        // single-valued color
        assert_eq!(s.factors[0].normalized(0), 0.0);
    }
}
