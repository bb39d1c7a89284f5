//! Reading the task's relevant factors back out of a trained causal layer.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FP_MARGIN: f64 = 0.2;
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub task: String,
    pub chosen_concept: usize,
    /// Factor positions.
    pub inferred_factors: BTreeSet<usize>,
    pub true_factors: BTreeSet<usize>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `|A|` of the chosen column divided by the largest `|A|` entry.
    pub weights: Vec<f64>,
    /// Number of factors tied with the k-th weight beyond the first.
    pub ties: usize,
    /// Non-selected, non-true factors added because they sat within the
    /// margin of the k-th weight.
    pub margin_flagged: Vec<usize>,
}

/// Infer the factors feeding the concept with the largest `|W|` weight.
///
/// The top `k` entries of the normalized column are selected (default
/// `k = |true_factors|`, ties at the k-th weight all included). Any other
/// factor that is not truly relevant and whose weight is less than
/// `fp_margin` below the k-th weight is also counted as inferred.
pub fn infer_task_edges(
    task: &str,
    w: ArrayView1<f64>,
    a: &Array2<f64>,
    true_factors: &BTreeSet<usize>,
    k: Option<usize>,
    fp_margin: f64,
) -> Result<EdgeReport> {
    let (m, n) = a.dim();
    if w.len() != n || n == 0 {
        return Err(Error::contract(format!("infer_task_edges: W has {} entries, A is {m}x{n}", w.len())));
    }
    if let Some(&bad) = true_factors.iter().find(|&&f| f >= m) {
        return Err(Error::contract(format!("true factor {bad} outside 0..{m}")));
    }
    let k = k.unwrap_or(true_factors.len());
    if k == 0 || k > m {
        return Err(Error::config(format!("k must be in 1..={m}, got {k}")));
    }
    let mut chosen = 0;
    for i in 1..n {
        if w[i].abs() > w[chosen].abs() {
            chosen = i;
        }
    }
    let max = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let weights: Vec<f64> = (0..m)
        .map(|j| if max > 0.0 { a[[j, chosen]].abs() / max } else { 0.0 })
        .collect();

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| weights[y].total_cmp(&weights[x]).then(x.cmp(&y)));
    let kth = weights[order[k - 1]];
    let mut inferred: BTreeSet<usize> = order.iter().copied().filter(|&j| weights[j] >= kth - TIE_TOL).collect();
    let ties = inferred.len() - k;
    let margin_flagged: Vec<usize> = order
        .iter()
        .copied()
        .filter(|j| !inferred.contains(j) && !true_factors.contains(j) && kth - weights[*j] < fp_margin)
        .collect();
    inferred.extend(&margin_flagged);

    let tp = inferred.intersection(true_factors).count();
    Ok(EdgeReport {
        task: task.into(),
        chosen_concept: chosen,
        tp,
        fp: inferred.len() - tp,
        fn_: true_factors.len() - tp,
        inferred_factors: inferred,
        true_factors: true_factors.clone(),
        weights,
        ties,
        margin_flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unconstrained,
    Thresholding,
    Regularization,
    GroundTruth,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Unconstrained,
        Condition::Thresholding,
        Condition::Regularization,
        Condition::GroundTruth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Unconstrained => "unconstrained",
            Condition::Thresholding => "thresholding",
            Condition::Regularization => "regularization",
            Condition::GroundTruth => "ground_truth",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown condition `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableThreeRow {
    pub condition: Condition,
    /// Mean recovered fraction of true factors over 2-factor tasks.
    pub gf2_rate: Option<f64>,
    pub gf3_rate: Option<f64>,
    /// Mean of `fp / (m - |true|)` over all reports.
    pub fp_rate: Option<f64>,
    /// Mean of `fn / |true|` over all reports.
    pub fn_rate: Option<f64>,
    pub gf2_runs: usize,
    pub gf3_runs: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregate edge reports for one condition; `m` is the factor count.
/// Rates over an empty group are `None`.
pub fn table3_metrics(condition: Condition, reports: &[EdgeReport], m: usize) -> TableThreeRow {
    let rate = |r: &EdgeReport| r.tp as f64 / r.true_factors.len() as f64;
    let gf2: Vec<f64> = reports.iter().filter(|r| r.true_factors.len() == 2).map(rate).collect();
    let gf3: Vec<f64> = reports.iter().filter(|r| r.true_factors.len() == 3).map(rate).collect();
    let fp: Vec<f64> = reports
        .iter()
        .map(|r| r.fp as f64 / (m - r.true_factors.len()).max(1) as f64)
        .collect();
    let fn_: Vec<f64> = reports.iter().map(|r| r.fn_ as f64 / r.true_factors.len() as f64).collect();
    TableThreeRow {
        condition,
        gf2_rate: mean(&gf2),
        gf3_rate: mean(&gf3),
        fp_rate: mean(&fp),
        fn_rate: mean(&fn_),
        gf2_runs: gf2.len(),
        gf3_runs: gf3.len(),
    }
}
