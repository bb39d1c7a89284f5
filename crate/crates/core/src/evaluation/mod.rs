//! Disentanglement scoring, causal-edge recovery and task accuracy.

mod assignment;
mod edges;
mod mic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assignment::max_assignment;
pub use edges::{infer_task_edges, table3_metrics, Condition, EdgeReport, TableThreeRow, DEFAULT_FP_MARGIN};
pub use mic::{mic, MicConfig, MIN_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicScore {
    /// Mean matched MIC over the non-constant label columns.
    pub score: f64,
    /// `m × z_dim` MIC of every label column against every latent.
    pub matrix: Vec<Vec<f64>>,
    /// Latent matched to each label column; `None` for constant labels.
    pub assignment: Vec<Option<usize>>,
}

/// Match label columns to latent dimensions by optimal assignment on the MIC
/// matrix and average the matched values. Constant label columns carry no
/// information and are left out.
pub fn mic_score(latents: &Array2<f64>, labels: &Array2<f64>, cfg: &MicConfig) -> Result<MicScore> {
    let (n, zd) = latents.dim();
    let (nl, m) = labels.dim();
    if n != nl || zd == 0 || m == 0 {
        return Err(Error::contract(format!(
            "mic_score: latents {:?} and labels {:?} do not pair up",
            latents.dim(),
            labels.dim()
        )));
    }
    let informative: Vec<usize> = (0..m)
        .filter(|&j| labels.column(j).iter().any(|&v| v != labels[[0, j]]))
        .collect();
    if informative.len() > zd {
        return Err(Error::contract(format!("{} informative factors but only {zd} latents", informative.len())));
    }
    if informative.is_empty() {
        return Err(Error::contract("mic_score: every label column is constant"));
    }
    let lat_cols: Vec<Vec<f64>> = (0..zd).map(|d| latents.column(d).to_vec()).collect();
    let mut matrix = vec![vec![0.0; zd]; m];
    for &j in &informative {
        let l = labels.column(j).to_vec();
        for d in 0..zd {
            matrix[j][d] = mic(&l, &lat_cols[d], cfg)?;
        }
    }
    let sub = Array2::from_shape_fn((informative.len(), zd), |(r, d)| matrix[informative[r]][d]);
    let picked = max_assignment(&sub);
    let mut assignment = vec![None; m];
    let mut total = 0.0;
    for (r, &d) in picked.iter().enumerate() {
        assignment[informative[r]] = Some(d);
        total += sub[[r, d]];
    }
    Ok(MicScore {
        score: total / informative.len() as f64,
        matrix,
        assignment,
    })
}

/// Fraction of probabilities on the correct side of 0.5.
pub fn task_accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::contract("task_accuracy: probabilities and labels differ in length"));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| ((p >= 0.5) as u8) == l)
        .count();
    Ok(correct as f64 / probs.len() as f64)
}
