use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use ccd_core::datasets::{build_factor_space_with, Corpus, DatasetKind, Resolution, SpaceOptions};
use ccd_core::evaluation::{infer_task_edges, DEFAULT_FP_MARGIN};
use ccd_core::experiment::{load_config, parse_overrides, run_plan, write_report, ExperimentPlan};
use ccd_core::tasks::catalog_for;
use ccd_core::training::{checkpoint_dir, evaluate, fit, latest_checkpoint, load_checkpoint, TrainConfig, TrainData};
use ccd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ccd", version, about = "Task-specific causal concept discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set weights.delta=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Previously generated corpus; generated in memory when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a factor grid to disk.
    GenerateData {
        #[arg(long, default_value = "dsprites_like")]
        dataset: DatasetKind,
        #[arg(long, default_value = "mini")]
        resolution: Resolution,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 1)]
        colors: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the task catalog.
    ListTasks {
        #[arg(long, default_value = "dsprites_like")]
        dataset: DatasetKind,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics of a finished run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Report the factors wired into the task by a trained run.
    InferEdges {
        #[arg(long)]
        run: PathBuf,
        /// Number of factors to select (defaults to the true count).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FP_MARGIN)]
        fp_margin: f64,
    },
    /// Sweep the classification weight on one task.
    AblateDelta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
        deltas: Vec<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute an experiment plan.
    RunPlan {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Rebuild tables and the markdown report from run directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dsprites_like")]
        dataset: DatasetKind,
    },
}

fn corpus_for(config: &TrainConfig, path: Option<&Path>) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::load(p),
        None => Corpus::generate(&config.space()?),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn final_state(run: &Path) -> Result<ccd_core::training::RunState> {
    let k = latest_checkpoint(run)?.ok_or_else(|| Error::config(format!("no checkpoint under {}", run.display())))?;
    load_checkpoint(&checkpoint_dir(run, k))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            dataset,
            resolution,
            image_size,
            colors,
            out,
        } => {
            let space = build_factor_space_with(
                dataset,
                resolution,
                SpaceOptions {
                    image_size,
                    dsprites_colors: colors,
                },
            )?;
            let corpus = Corpus::generate(&space)?;
            corpus.save(&out)?;
            println!("wrote {} images to {}", corpus.len(), out.display());
        }
        Command::ListTasks { dataset } => {
            for (i, t) in catalog_for(dataset).iter().enumerate() {
                let criteria: Vec<String> = t.criteria.iter().map(|c| c.to_string()).collect();
                println!("{:>2}  {}  [{}]", i + 1, t.name, criteria.join(" & "));
            }
        }
        Command::Train {
            cfg,
            variant,
            task,
            seed,
            out,
        } => {
            let mut ov = parse_overrides(&cfg.overrides)?;
            if let Some(v) = variant {
                ov.push(("variant".into(), v));
            }
            if let Some(t) = task {
                ov.push(("task".into(), format!("{t:?}")));
            }
            ov.push(("seed".into(), seed.to_string()));
            let config: TrainConfig = load_config(cfg.config.as_deref(), &ov)?;
            config.validate()?;
            let corpus = corpus_for(&config, cfg.corpus.as_deref())?;
            let outcome = fit(&config, &corpus, &out)?;
            print_json(&outcome.metrics)?;
        }
        Command::Evaluate { run, corpus } => {
            let state = final_state(&run)?;
            let corpus = corpus_for(&state.config, corpus.as_deref())?;
            let data = TrainData::prepare(&state.config, &corpus)?;
            let hash = ccd_core::training::state_hash(&state)?;
            print_json(&evaluate(&state, &corpus, &data, hash)?)?;
        }
        Command::InferEdges { run, k, fp_margin } => {
            let state = final_state(&run)?;
            if !state.config.variant.uses_scm() {
                return Err(Error::config(format!("variant {} has no causal layer", state.config.variant)));
            }
            let space = state.config.space()?;
            let task = state.config.task_spec()?;
            let true_set = task.relevant_positions(&space)?.into_iter().collect();
            let report = infer_task_edges(&task.name, state.model.w().view(), state.model.a(), &true_set, k, fp_margin)?;
            print_json(&report)?;
        }
        Command::AblateDelta {
            cfg,
            deltas,
            seed,
            out,
        } => {
            let train: TrainConfig = load_config(cfg.config.as_deref(), &parse_overrides(&cfg.overrides)?)?;
            let plan = ExperimentPlan {
                tasks: vec![train.task.clone()],
                delta_task: Some(train.task.clone()),
                train,
                conditions: vec![],
                variants: vec![],
                delta_sweep: deltas,
                seeds: vec![seed],
                output: out,
            };
            let corpus = corpus_for(&plan.train, cfg.corpus.as_deref())?;
            finish_plan(&plan, &corpus)?;
        }
        Command::RunPlan {
            plan,
            overrides,
            corpus,
        } => {
            let plan: ExperimentPlan = load_config(Some(&plan), &parse_overrides(&overrides)?)?;
            let corpus = corpus_for(&plan.train, corpus.as_deref())?;
            finish_plan(&plan, &corpus)?;
        }
        Command::Report { out, dataset } => {
            let space = build_factor_space_with(dataset, Resolution::Mini, SpaceOptions::default())?;
            write_report(&out, space.m())?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
        }
    }
    Ok(())
}

fn finish_plan(plan: &ExperimentPlan, corpus: &Corpus) -> Result<()> {
    let outcome = run_plan(plan, corpus)?;
    print!("{}", std::fs::read_to_string(plan.output.join("report.md"))?);
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        for (key, e) in &outcome.failures {
            eprintln!("failed: {} seed {}: {e}", key.task, key.seed);
        }
        Err(Error::TrainingFailed(format!("{} run(s) failed", outcome.failures.len())))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
