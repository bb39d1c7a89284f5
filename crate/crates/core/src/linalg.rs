//! Dense linear algebra helpers bridging `ndarray` and `nalgebra`.

use nalgebra::DMatrix;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct Pinv {
    pub pinv: Array2<f64>,
    /// Ratio of largest to smallest singular value; infinite when singular.
    pub condition: f64,
    pub rank: usize,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[(r, c)])
}

/// Moore–Penrose pseudo-inverse by SVD with the usual
/// `max(m, n)·ε·σ_max` rank cutoff.
pub fn pinv(a: &Array2<f64>) -> Pinv {
    let (rows, cols) = a.dim();
    let svd = to_na(a).svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let sigma_min = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = rows.max(cols) as f64 * f64::EPSILON * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let condition = if sigma_min > tol { sigma_max / sigma_min } else { f64::INFINITY };
    let inv = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .expect("svd computed with both factors");
    Pinv {
        pinv: from_na(&inv),
        condition,
        rank,
    }
}
