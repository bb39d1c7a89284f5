//! Run orchestration: catalog sweeps over the edge-recovery conditions, the
//! variant comparison, the δ ablation, and report generation.

mod config;
mod heatmap;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::{table3_metrics, Condition, EdgeReport, TableThreeRow};
use crate::scm::AInit;
use crate::tasks::{catalog_for, find_task};
use crate::training::{fit, Metrics, TrainConfig};
use crate::vae::Variant;

pub use config::{load_config, parse_overrides, set_key, to_toml};
pub use heatmap::{matrix_csv, matrix_png, write_heatmaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Base training configuration; dataset and schedule come from here.
    #[serde(default)]
    pub train: TrainConfig,
    /// Catalog tasks by index or name; empty means every task.
    #[serde(default)]
    pub tasks: Vec<String>,
    /// Conditions run with the full model on every task.
    #[serde(default)]
    pub conditions: Vec<Condition>,
    /// Variants compared on every task under the default constraints.
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// Classification weights for the ablation, run on `delta_task`.
    #[serde(default)]
    pub delta_sweep: Vec<f64>,
    /// Defaults to the first selected task.
    #[serde(default)]
    pub delta_task: Option<String>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

/// What distinguishes one run of a plan from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    Condition { condition: Condition },
    Variant { variant: Variant },
    Delta { delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub task: String,
    #[serde(flatten)]
    pub kind: RunKind,
    pub seed: u64,
}

impl RunKey {
    pub fn dir(&self, output: &Path) -> PathBuf {
        let task: String = self
            .task
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let kind = match &self.kind {
            RunKind::Condition { condition } => format!("condition_{condition}"),
            RunKind::Variant { variant } => format!("variant_{variant}"),
            RunKind::Delta { delta } => format!("delta_{delta}"),
        };
        output.join("runs").join(task).join(kind).join(format!("seed_{}", self.seed))
    }
}

/// Apply a constraint condition to `base` for a task whose relevant factor
/// positions are `relevant`.
///
/// Unconstrained drops both the diversity penalty and clipping, thresholding
/// only clips, regularization does both, and ground truth starts from (and
/// freezes) the true bipartite structure.
pub fn apply_condition(base: &TrainConfig, condition: Condition, relevant: &[usize]) -> TrainConfig {
    let mut c = base.clone();
    c.variant = Variant::Ours;
    let mut w = c.loss_weights();
    match condition {
        Condition::Unconstrained => {
            w.gamma = 0.0;
            c.clip_a = false;
        }
        Condition::Thresholding => {
            w.gamma = 0.0;
            c.clip_a = true;
        }
        Condition::Regularization => c.clip_a = true,
        Condition::GroundTruth => {
            c.clip_a = true;
            c.a_init = AInit::GroundTruth {
                relevant: relevant.to_vec(),
            };
        }
    }
    c.weights = Some(w);
    c
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("plan needs at least one seed"));
        }
        if self.conditions.is_empty() && self.variants.is_empty() && self.delta_sweep.is_empty() {
            return Err(Error::config("plan has no conditions, variants or delta values"));
        }
        if let Some(d) = self.delta_sweep.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::config(format!("delta values must be nonnegative, got {d}")));
        }
        self.train.validate()?;
        self.task_names().map(|_| ())
    }

    pub fn task_names(&self) -> Result<Vec<String>> {
        let kind = self.train.dataset;
        if self.tasks.is_empty() {
            return Ok(catalog_for(kind).into_iter().map(|t| t.name).collect());
        }
        let mut names: Vec<String> = Vec::new();
        for k in &self.tasks {
            let name = find_task(kind, k)?.name;
            if !names.contains(&name) {
                names.push(name);
            }
        }
        Ok(names)
    }

    /// Every run of the plan with its training configuration, in execution
    /// order.
    pub fn runs(&self) -> Result<Vec<(RunKey, TrainConfig)>> {
        self.validate()?;
        let kind = self.train.dataset;
        let space = self.train.space()?;
        let tasks = self.task_names()?;
        let mut out = Vec::new();
        for task in &tasks {
            let relevant = find_task(kind, task)?.relevant_positions(&space)?;
            for &seed in &self.seeds {
                let base = TrainConfig {
                    task: task.clone(),
                    seed,
                    ..self.train.clone()
                };
                for &condition in &self.conditions {
                    let key = RunKey {
                        task: task.clone(),
                        kind: RunKind::Condition { condition },
                        seed,
                    };
                    out.push((key, apply_condition(&base, condition, &relevant)));
                }
                for &variant in &self.variants {
                    let mut c = apply_condition(&base, Condition::Regularization, &relevant);
                    c.variant = variant;
                    let key = RunKey {
                        task: task.clone(),
                        kind: RunKind::Variant { variant },
                        seed,
                    };
                    out.push((key, c));
                }
            }
        }
        if !self.delta_sweep.is_empty() {
            let task = match &self.delta_task {
                Some(t) => find_task(kind, t)?.name,
                None => tasks[0].clone(),
            };
            let relevant = find_task(kind, &task)?.relevant_positions(&space)?;
            for &seed in &self.seeds {
                for &delta in &self.delta_sweep {
                    let base = TrainConfig {
                        task: task.clone(),
                        seed,
                        ..self.train.clone()
                    };
                    let mut c = apply_condition(&base, Condition::Regularization, &relevant);
                    if let Some(w) = c.weights.as_mut() {
                        w.delta = delta;
                    }
                    let key = RunKey {
                        task: task.clone(),
                        kind: RunKind::Delta { delta },
                        seed,
                    };
                    out.push((key, c));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub completed: usize,
    /// Optimizer steps taken across all runs in this invocation.
    pub steps_run: u64,
    pub failures: Vec<(RunKey, String)>,
    pub report: Report,
}

/// Execute every run of `plan` on `corpus`, skipping completed runs, then
/// write the aggregate report. Failed runs are logged and skipped.
pub fn run_plan(plan: &ExperimentPlan, corpus: &Corpus) -> Result<PlanOutcome> {
    let runs = plan.runs()?;
    fs::create_dir_all(&plan.output)?;
    fs::write(plan.output.join("plan.toml"), to_toml(plan)?)?;
    let mut steps_run = 0;
    let mut completed = 0;
    let mut failures = Vec::new();
    for (i, (key, config)) in runs.iter().enumerate() {
        let dir = key.dir(&plan.output);
        info!("run {}/{}: {}", i + 1, runs.len(), dir.display());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("run.json"), serde_json::to_vec_pretty(key)?)?;
        match fit(config, corpus, &dir) {
            Ok(out) => {
                steps_run += out.steps_run;
                completed += 1;
            }
            Err(e) => {
                error!("{} failed: {e}", dir.display());
                failures.push((key.clone(), e.to_string()));
            }
        }
    }
    let report = write_report(&plan.output, corpus.space.m())?;
    Ok(PlanOutcome {
        completed,
        steps_run,
        failures,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub runs: usize,
    pub mic_score: f64,
    pub mic_std: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub delta: f64,
    pub runs: usize,
    pub test_accuracy: f64,
    pub mic_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub table2: Vec<VariantRow>,
    pub table3: Vec<TableThreeRow>,
    pub delta_sweep: Vec<DeltaRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Completed runs under `output/runs`, sorted by directory.
pub fn collect_runs(output: &Path) -> Result<Vec<(RunKey, Metrics)>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![output.join("runs")];
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            continue;
        }
        let (key_path, metrics_path) = (dir.join("run.json"), dir.join("metrics.json"));
        if key_path.exists() && metrics_path.exists() {
            let key: RunKey = serde_json::from_slice(&fs::read(&key_path)?)?;
            let metrics: Metrics = serde_json::from_slice(&fs::read(&metrics_path)?)?;
            found.insert(dir.clone(), (key, metrics));
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() && path.file_name().is_some_and(|n| n != "checkpoints" && n != "heatmaps") {
                stack.push(path);
            }
        }
    }
    Ok(found.into_values().collect())
}

/// Aggregate completed runs into the three tables.
pub fn aggregate(runs: &[(RunKey, Metrics)], m: usize) -> Report {
    let mut by_variant: BTreeMap<&str, (Variant, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut by_condition: BTreeMap<Condition, Vec<EdgeReport>> = BTreeMap::new();
    let mut by_delta: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for (key, metrics) in runs {
        match &key.kind {
            RunKind::Variant { variant } => {
                let e = by_variant.entry(variant.name()).or_insert((*variant, vec![], vec![]));
                e.1.push(metrics.mic.score);
                e.2.extend(metrics.test_accuracy);
            }
            RunKind::Condition { condition } => {
                by_condition.entry(*condition).or_default().extend(metrics.edges.clone());
            }
            RunKind::Delta { delta } => {
                let idx = match by_delta.iter().position(|(d, _, _)| d == delta) {
                    Some(i) => i,
                    None => {
                        by_delta.push((*delta, vec![], vec![]));
                        by_delta.len() - 1
                    }
                };
                by_delta[idx].1.extend(metrics.test_accuracy);
                by_delta[idx].2.push(metrics.mic.score);
            }
        }
    }
    let order = |v: &Variant| Variant::ALL.iter().position(|x| x == v).unwrap_or(usize::MAX);
    let mut table2: Vec<VariantRow> = by_variant
        .into_values()
        .map(|(variant, mic, acc)| {
            let (mic_score, mic_std) = mean_std(&mic);
            VariantRow {
                variant,
                runs: mic.len(),
                mic_score,
                mic_std,
                test_accuracy: (!acc.is_empty()).then(|| mean_std(&acc).0),
            }
        })
        .collect();
    table2.sort_by_key(|r| order(&r.variant));
    let table3 = by_condition
        .into_iter()
        .map(|(c, reports)| table3_metrics(c, &reports, m))
        .collect();
    by_delta.sort_by(|a, b| a.0.total_cmp(&b.0));
    let delta_sweep = by_delta
        .into_iter()
        .map(|(delta, acc, mic)| DeltaRow {
            delta,
            runs: mic.len(),
            test_accuracy: if acc.is_empty() { f64::NAN } else { mean_std(&acc).0 },
            mic_score: mean_std(&mic).0,
        })
        .collect();
    Report {
        table2,
        table3,
        delta_sweep,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Rebuild `table2.csv`, `table3.csv`, `delta_sweep.csv` and `report.md` in
/// `output` from the completed run directories.
pub fn write_report(output: &Path, m: usize) -> Result<Report> {
    let runs = collect_runs(output)?;
    let report = aggregate(&runs, m);

    let mut w = csv::Writer::from_path(output.join("table2.csv"))?;
    w.write_record(["variant", "runs", "mic_score", "mic_std", "test_accuracy"])?;
    for r in &report.table2 {
        w.write_record([
            r.variant.name().to_string(),
            r.runs.to_string(),
            r.mic_score.to_string(),
            r.mic_std.to_string(),
            r.test_accuracy.map_or(String::new(), |a| a.to_string()),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(output.join("table3.csv"))?;
    w.write_record(["condition", "gf2_rate", "gf3_rate", "fp_rate", "fn_rate", "gf2_runs", "gf3_runs"])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &report.table3 {
        w.write_record([
            r.condition.name().to_string(),
            cell(r.gf2_rate),
            cell(r.gf3_rate),
            cell(r.fp_rate),
            cell(r.fn_rate),
            r.gf2_runs.to_string(),
            r.gf3_runs.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(output.join("delta_sweep.csv"))?;
    w.write_record(["delta", "runs", "test_accuracy", "mic_score"])?;
    for r in &report.delta_sweep {
        w.write_record([
            r.delta.to_string(),
            r.runs.to_string(),
            r.test_accuracy.to_string(),
            r.mic_score.to_string(),
        ])?;
    }
    w.flush()?;

    let mut md = String::from("# Experiment report\n\n");
    let _ = writeln!(md, "{} completed runs.\n", runs.len());
    if !report.table2.is_empty() {
        md.push_str("## Disentanglement by variant\n\n| variant | runs | MIC | std | test accuracy |\n|---|---|---|---|---|\n");
        for r in &report.table2 {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {} |",
                r.variant,
                r.runs,
                r.mic_score,
                r.mic_std,
                opt(r.test_accuracy)
            );
        }
        md.push('\n');
    }
    if !report.table3.is_empty() {
        md.push_str("## Edge recovery by condition\n\n| condition | 2-factor | 3-factor | FP | FN |\n|---|---|---|---|---|\n");
        for r in &report.table3 {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                r.condition,
                opt(r.gf2_rate),
                opt(r.gf3_rate),
                opt(r.fp_rate),
                opt(r.fn_rate)
            );
        }
        md.push('\n');
    }
    if !report.delta_sweep.is_empty() {
        md.push_str("## Classification weight sweep\n\n| delta | runs | test accuracy | MIC |\n|---|---|---|---|\n");
        for r in &report.delta_sweep {
            let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", r.delta, r.runs, r.test_accuracy, r.mic_score);
        }
        md.push('\n');
    }
    fs::write(output.join("report.md"), md)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> ExperimentPlan {
        ExperimentPlan {
            train: TrainConfig::default(),
            tasks: vec!["1".into(), "Left-sided Hearts".into(), "2".into()],
            conditions: vec![Condition::Unconstrained, Condition::GroundTruth],
            variants: vec![Variant::BetaVae],
            delta_sweep: vec![0.1, 0.9],
            delta_task: None,
            seeds: vec![1, 2],
            output: "out".into(),
        }
    }

    #[test]
    fn condition_flags() {
        let base = TrainConfig::default();
        let gamma = base.loss_weights().gamma;
        let flags = |c| {
            let t = apply_condition(&base, c, &[1, 4]);
            (t.weights.unwrap().gamma > 0.0, t.clip_a)
        };
        assert_eq!(flags(Condition::Unconstrained), (false, false));
        assert_eq!(flags(Condition::Thresholding), (false, true));
        assert_eq!(flags(Condition::Regularization), (true, true));
        assert_eq!(apply_condition(&base, Condition::Regularization, &[]).weights.unwrap().gamma, gamma);
        let gt = apply_condition(&base, Condition::GroundTruth, &[1, 4]);
        assert_eq!(gt.a_init, AInit::GroundTruth { relevant: vec![1, 4] });
    }

    #[test]
    fn one_directory_per_run() {
        let p = plan();
        let runs = p.runs().unwrap();
        // 2 tasks x 2 seeds x (2 conditions + 1 variant) + 2 seeds x 2 deltas
        assert_eq!(p.task_names().unwrap().len(), 2);
        assert_eq!(runs.len(), 2 * 2 * 3 + 4);
        let mut dirs: Vec<PathBuf> = runs.iter().map(|(k, _)| k.dir(&p.output)).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), runs.len());
        let (_, c) = runs.iter().find(|(k, _)| k.kind == RunKind::Delta { delta: 0.9 }).unwrap();
        assert_eq!(c.weights.unwrap().delta, 0.9);
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let p = plan();
        let text = to_toml(&p).unwrap();
        let back: ExperimentPlan = text.parse::<toml::Table>().unwrap().try_into().unwrap();
        assert_eq!(back, p);
    }
}
