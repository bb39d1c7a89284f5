use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FactorSpace;
use crate::error::{Error, Result};

/// Disjoint train/test partition of a corpus (flat sample indices, sorted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub stratify_on: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl DatasetSplit {
    /// Fraction of the samples with `factor == value` that landed in train.
    pub fn train_share(&self, space: &FactorSpace, factor: usize, value: usize) -> f64 {
        let count = |ids: &[usize]| ids.iter().filter(|&&i| space.unflatten(i)[factor] == value).count();
        let tr = count(&self.train_indices);
        let te = count(&self.test_indices);
        tr as f64 / (tr + te) as f64
    }
}

/// Split the full corpus of `space` so that every combination of the
/// stratification factors keeps (up to rounding) the requested train
/// fraction.
///
/// Strata are visited in a seeded random order and receive quotas by
/// cumulative rounding, so rounding surpluses do not pile up on any one
/// factor value.
pub fn stratified_split(
    space: &FactorSpace,
    stratify_on: &[&str],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let positions = stratify_on
        .iter()
        .map(|name| space.factor_position(name))
        .collect::<Result<Vec<_>>>()?;

    let mut strata: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for flat in 0..space.corpus_len() {
        let idx = space.unflatten(flat);
        let key = positions.iter().map(|&p| idx[p]).collect();
        strata.entry(key).or_default().push(flat);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = strata.into_values().collect();
    groups.shuffle(&mut rng);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = 0usize;
    for mut members in groups {
        members.shuffle(&mut rng);
        let before = (ratio * seen as f64).round() as usize;
        seen += members.len();
        let quota = (ratio * seen as f64).round() as usize - before;
        let (tr, te) = members.split_at(quota.min(members.len()));
        train.extend_from_slice(tr);
        test.extend_from_slice(te);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train_indices: train,
        test_indices: test,
        stratify_on: stratify_on.iter().map(|s| s.to_string()).collect(),
        ratio,
        seed,
    })
}
