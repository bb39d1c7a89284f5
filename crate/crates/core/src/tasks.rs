//! Binary downstream tasks defined as conjunctions of factor criteria.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetKind, DatasetSplit, FactorKind, FactorSpace};
use crate::error::{Error, Result};

/// Default minimum number of positives in the balanced training set.
pub const MIN_TRAIN_POSITIVES: usize = 64;

const CMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Eq,
    Le,
    Ge,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
        }
    }
}

/// How `TaskCriterion::value` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueUnit {
    /// 1-based category number (`Shape == 3` is the third category).
    Category,
    /// Threshold on the min-max normalized label in `[0, 1]`.
    Normalized,
    /// Threshold in the factor's native units (radians, hue).
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCriterion {
    pub factor: String,
    pub comparator: Comparator,
    pub value: f64,
    pub unit: ValueUnit,
}

impl TaskCriterion {
    pub fn eq(factor: &str, category: usize) -> Self {
        Self {
            factor: factor.into(),
            comparator: Comparator::Eq,
            value: category as f64,
            unit: ValueUnit::Category,
        }
    }

    pub fn le(factor: &str, threshold: f64) -> Self {
        Self::threshold(factor, Comparator::Le, threshold, ValueUnit::Normalized)
    }

    pub fn ge(factor: &str, threshold: f64) -> Self {
        Self::threshold(factor, Comparator::Ge, threshold, ValueUnit::Normalized)
    }

    pub fn threshold(factor: &str, comparator: Comparator, value: f64, unit: ValueUnit) -> Self {
        Self {
            factor: factor.into(),
            comparator,
            value,
            unit,
        }
    }

    fn validate(&self, space: &FactorSpace) -> Result<usize> {
        let pos = space.factor_position(&self.factor)?;
        let f = &space.factors[pos];
        let bad = |why: &str| Err(Error::config(format!("criterion `{self}`: {why}")));
        if !self.value.is_finite() {
            return bad("value is not finite");
        }
        match (self.comparator, f.kind) {
            (Comparator::Eq, FactorKind::Categorical) => {
                if self.unit != ValueUnit::Category {
                    return bad("equality needs a category number");
                }
                let k = self.value;
                if k.fract() != 0.0 || k < 1.0 || k as usize > f.len() {
                    return bad(&format!("category must be 1..={}", f.len()));
                }
            }
            (Comparator::Eq, FactorKind::Continuous) => return bad("equality on a continuous factor"),
            (_, FactorKind::Categorical) => return bad("threshold on a categorical factor"),
            (_, FactorKind::Continuous) => match self.unit {
                ValueUnit::Normalized if !(0.0..=1.0).contains(&self.value) => {
                    return bad("normalized threshold outside [0, 1]")
                }
                ValueUnit::Category => return bad("threshold given as a category"),
                _ => {}
            },
        }
        Ok(pos)
    }

    fn holds(&self, space: &FactorSpace, pos: usize, factor_index: &[usize]) -> bool {
        let f = &space.factors[pos];
        let i = factor_index[pos];
        let x = match self.unit {
            ValueUnit::Category => return i + 1 == self.value as usize,
            ValueUnit::Normalized => f.normalized(i),
            ValueUnit::Native => f.values[i],
        };
        match self.comparator {
            Comparator::Le => x <= self.value + CMP_TOL,
            Comparator::Ge => x >= self.value - CMP_TOL,
            Comparator::Eq => unreachable!("validated"),
        }
    }
}

impl fmt::Display for TaskCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.unit {
            ValueUnit::Native => " (native)",
            _ => "",
        };
        write!(f, "{} {} {}{unit}", self.factor, self.comparator.symbol(), self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub criteria: Vec<TaskCriterion>,
}

impl TaskSpec {
    pub fn new(name: &str, criteria: Vec<TaskCriterion>) -> Self {
        Self {
            name: name.into(),
            criteria,
        }
    }

    pub fn relevant_factors(&self) -> BTreeSet<String> {
        self.criteria.iter().map(|c| c.factor.clone()).collect()
    }

    /// Positions of the relevant factors in `space`, in criterion order.
    pub fn relevant_positions(&self, space: &FactorSpace) -> Result<Vec<usize>> {
        self.criteria.iter().map(|c| space.factor_position(&c.factor)).collect()
    }

    pub fn validate(&self, space: &FactorSpace) -> Result<()> {
        if !(2..=3).contains(&self.criteria.len()) {
            return Err(Error::config(format!(
                "task `{}` has {} criteria, expected 2 or 3",
                self.name,
                self.criteria.len()
            )));
        }
        if self.relevant_factors().len() != self.criteria.len() {
            return Err(Error::config(format!("task `{}` repeats a factor", self.name)));
        }
        for c in &self.criteria {
            c.validate(space)?;
        }
        Ok(())
    }

    /// Conjunction of all criteria. Use [`TaskSpec::validate`] first; an
    /// invalid task panics here.
    pub fn label(&self, space: &FactorSpace, factor_index: &[usize]) -> bool {
        self.criteria.iter().all(|c| {
            let pos = space.factor_position(&c.factor).expect("validated task");
            c.holds(space, pos, factor_index)
        })
    }
}

/// Checked labeling of a single sample.
pub fn label(task: &TaskSpec, space: &FactorSpace, factor_index: &[usize]) -> Result<u8> {
    task.validate(space)?;
    space.check_index(factor_index)?;
    Ok(task.label(space, factor_index) as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: TaskSpec,
    /// Flat corpus indices, sorted.
    pub indices: Vec<usize>,
    pub labels: Vec<u8>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.positives() as f64 / self.len().max(1) as f64
    }
}

fn balance(task: &TaskSpec, space: &FactorSpace, ids: &[usize], rng: &mut ChaCha8Rng) -> (TaskDataset, usize) {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        ids.iter().partition(|&&i| task.label(space, &space.unflatten(i)));
    let keep = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(keep);
    neg.truncate(keep);
    let mut rows: Vec<(usize, u8)> = pos.into_iter().map(|i| (i, 1)).chain(neg.into_iter().map(|i| (i, 0))).collect();
    rows.sort_unstable();
    let (indices, labels) = rows.into_iter().unzip();
    (
        TaskDataset {
            task: task.clone(),
            indices,
            labels,
        },
        keep,
    )
}

/// Balanced train and test task datasets drawn from `split`.
///
/// The majority class is subsampled uniformly at random so both classes have
/// the same size. Fails with [`Error::TaskTooSmall`] when the balanced
/// training set would have fewer than `min_positives` positives.
pub fn build_task_dataset(
    task: &TaskSpec,
    space: &FactorSpace,
    split: &DatasetSplit,
    seed: u64,
    min_positives: usize,
) -> Result<(TaskDataset, TaskDataset)> {
    task.validate(space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, kept) = balance(task, space, &split.train_indices, &mut rng);
    if kept < min_positives.max(1) {
        return Err(Error::TaskTooSmall {
            task: task.name.clone(),
            positives: kept,
            minimum: min_positives,
        });
    }
    let (test, test_kept) = balance(task, space, &split.test_indices, &mut rng);
    if test_kept == 0 {
        return Err(Error::TaskTooSmall {
            task: task.name.clone(),
            positives: 0,
            minimum: 1,
        });
    }
    Ok((train, test))
}

/// The built-in task list for a dataset.
pub fn catalog(dataset_name: &str) -> Result<Vec<TaskSpec>> {
    Ok(catalog_for(dataset_name.parse()?))
}

pub fn catalog_for(kind: DatasetKind) -> Vec<TaskSpec> {
    use TaskCriterion as C;
    // Orientation thresholds above 1 are angles in radians.
    let orient = |cmp, v| C::threshold("orientation", cmp, v, ValueUnit::Native);
    match kind {
        DatasetKind::DspritesLike => vec![
            TaskSpec::new("Left-sided Hearts", vec![C::le("posX", 0.5), C::eq("shape", 3)]),
            TaskSpec::new("Right-sided Ellipses", vec![C::ge("posX", 0.5), C::eq("shape", 2)]),
            TaskSpec::new("Bottom Squares", vec![C::le("posY", 0.5), C::eq("shape", 1)]),
            TaskSpec::new("Top Hearts", vec![C::ge("posY", 0.5), C::eq("shape", 3)]),
            // Rows 5 and 6 share "scale <= 0.5"; kept as listed.
            TaskSpec::new("Big right rotated", vec![C::le("scale", 0.5), orient(Comparator::Ge, 3.0)]),
            TaskSpec::new("Small left rotated", vec![C::le("scale", 0.5), orient(Comparator::Le, 3.0)]),
            TaskSpec::new(
                "Top big Hearts",
                vec![C::ge("posY", 0.5), C::eq("shape", 3), C::ge("scale", 0.7)],
            ),
            TaskSpec::new(
                "Left small Square",
                vec![C::ge("posX", 0.5), C::eq("shape", 2), C::le("scale", 0.5)],
            ),
            TaskSpec::new(
                "Top right rotated",
                vec![C::ge("posX", 0.5), orient(Comparator::Ge, 3.0), C::ge("posY", 0.5)],
            ),
        ],
        DatasetKind::Shapes3dLike => {
            // "Wall >= 3" / "Wall <= 3" index the ten-step hue grid, i.e. hue 0.3.
            let wall = |cmp| C::threshold("wall_hue", cmp, 0.3, ValueUnit::Native);
            let task = |criteria: Vec<TaskCriterion>| {
                let name = criteria.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" & ");
                TaskSpec::new(&name, criteria)
            };
            vec![
                task(vec![C::le("floor_hue", 0.5), C::le("wall_hue", 0.5)]),
                task(vec![C::ge("floor_hue", 0.5), C::le("object_hue", 0.5)]),
                task(vec![C::ge("wall_hue", 0.5), C::le("object_hue", 0.5)]),
                task(vec![C::le("floor_hue", 0.5), C::eq("shape", 1)]),
                task(vec![C::ge("wall_hue", 0.5), C::eq("shape", 2)]),
                task(vec![C::le("object_hue", 0.5), C::ge("scale", 0.5)]),
                task(vec![C::ge("floor_hue", 0.5), C::ge("scale", 0.5), C::eq("orientation", 1)]),
                task(vec![C::ge("object_hue", 0.5), C::eq("shape", 1), C::eq("orientation", 1)]),
                task(vec![C::ge("floor_hue", 0.5), wall(Comparator::Ge), C::ge("object_hue", 0.5)]),
                task(vec![C::le("floor_hue", 0.5), wall(Comparator::Le), C::le("object_hue", 0.5)]),
                task(vec![C::le("floor_hue", 0.5), wall(Comparator::Ge), C::le("object_hue", 0.5)]),
                task(vec![C::ge("floor_hue", 0.5), C::ge("scale", 0.5), C::eq("shape", 2)]),
            ]
        }
    }
}

/// Look a task up by 1-based catalog position or by exact name.
pub fn find_task(kind: DatasetKind, key: &str) -> Result<TaskSpec> {
    let tasks = catalog_for(kind);
    if let Ok(n) = key.parse::<usize>() {
        if (1..=tasks.len()).contains(&n) {
            return Ok(tasks[n - 1].clone());
        }
    }
    tasks
        .into_iter()
        .find(|t| t.name == key)
        .ok_or_else(|| Error::config(format!("no task `{key}` in the {kind} catalog")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_factor_space, stratified_split, Resolution};

    fn dsprites() -> FactorSpace {
        build_factor_space("dsprites_like", Resolution::Mini).unwrap()
    }

    fn idx(space: &FactorSpace, pairs: &[(&str, usize)]) -> Vec<usize> {
        let mut v = vec![0; space.m()];
        for (name, i) in pairs {
            v[space.factor_position(name).unwrap()] = *i;
        }
        v
    }

    #[test]
    fn left_sided_heart() {
        let space = dsprites();
        let task = &catalog_for(DatasetKind::DspritesLike)[0];
        assert_eq!(task.relevant_factors(), ["posX", "shape"].iter().map(|s| s.to_string()).collect());
        let left = idx(&space, &[("shape", 2), ("posX", 1)]);
        let right = idx(&space, &[("shape", 2), ("posX", 4)]);
        assert_eq!(label(task, &space, &left).unwrap(), 1);
        assert_eq!(label(task, &space, &right).unwrap(), 0);
    }

    #[test]
    fn top_big_heart() {
        let space = dsprites();
        let task = &catalog_for(DatasetKind::DspritesLike)[6];
        let s = idx(&space, &[("shape", 2), ("posY", 5), ("scale", 4)]);
        assert_eq!(label(task, &space, &s).unwrap(), 1);
    }

    #[test]
    fn catalogs_have_expected_sizes_and_validate() {
        for (kind, n) in [(DatasetKind::DspritesLike, 9), (DatasetKind::Shapes3dLike, 12)] {
            let space = crate::datasets::build_factor_space_with(kind, Resolution::Mini, Default::default()).unwrap();
            let tasks = catalog_for(kind);
            assert_eq!(tasks.len(), n);
            for t in &tasks {
                t.validate(&space).unwrap();
            }
            let gf2 = tasks.iter().filter(|t| t.criteria.len() == 2).count();
            assert_eq!(gf2, 6);
        }
        let first = &catalog("dsprites_like").unwrap()[0];
        assert_eq!(first.criteria, vec![TaskCriterion::le("posX", 0.5), TaskCriterion::eq("shape", 3)]);
        assert!(catalog("mnist").is_err());
    }

    #[test]
    fn unsatisfiable_task_is_too_small() {
        let space = dsprites();
        let split = stratified_split(&space, &["shape"], 0.7, 0).unwrap();
        let task = TaskSpec::new("never", vec![TaskCriterion::eq("shape", 3), TaskCriterion::le("posX", 0.5)]);
        // same factor twice is rejected up front
        let dup = TaskSpec::new("dup", vec![TaskCriterion::eq("shape", 3), TaskCriterion::eq("shape", 1)]);
        assert!(matches!(dup.validate(&space), Err(Error::Config(_))));
        assert!(build_task_dataset(&task, &space, &split, 0, MIN_TRAIN_POSITIVES).is_ok());
        let impossible = TaskSpec::new(
            "impossible",
            vec![
                TaskCriterion::ge("posX", 1.0),
                TaskCriterion::le("posY", 0.0),
                TaskCriterion::eq("shape", 3),
            ],
        );
        assert!(matches!(
            build_task_dataset(&impossible, &space, &split, 0, MIN_TRAIN_POSITIVES),
            Err(Error::TaskTooSmall { .. })
        ));
    }

    #[test]
    fn balanced_sets_only_subsample() {
        let space = build_factor_space("shapes3d_like", Resolution::Mini).unwrap();
        let split = stratified_split(&space, &["floor_hue", "wall_hue", "object_hue", "shape"], 0.7, 1).unwrap();
        let task = catalog_for(DatasetKind::Shapes3dLike).pop().unwrap();
        let (train, test) = build_task_dataset(&task, &space, &split, 9, MIN_TRAIN_POSITIVES).unwrap();
        for ds in [&train, &test] {
            assert_eq!(ds.positive_fraction(), 0.5);
            for (&i, &l) in ds.indices.iter().zip(&ds.labels) {
                assert_eq!(task.label(&space, &space.unflatten(i)) as u8, l);
            }
        }
        assert!(train.indices.iter().all(|i| split.train_indices.binary_search(i).is_ok()));
        assert!(test.indices.iter().all(|i| split.test_indices.binary_search(i).is_ok()));
    }

    #[test]
    fn invalid_criteria_are_config_errors() {
        let space = dsprites();
        let bad = [
            TaskCriterion::eq("posX", 1),
            TaskCriterion::le("shape", 0.5),
            TaskCriterion::eq("shape", 4),
            TaskCriterion::ge("scale", 1.5),
        ];
        for c in bad {
            let t = TaskSpec::new("t", vec![c, TaskCriterion::ge("posY", 0.5)]);
            assert!(matches!(t.validate(&space), Err(Error::Config(_))));
        }
    }

    #[test]
    fn catalog_json_round_trips() {
        let tasks = catalog_for(DatasetKind::Shapes3dLike);
        let json = serde_json::to_string(&tasks).unwrap();
        let back: Vec<TaskSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tasks);
    }
}
