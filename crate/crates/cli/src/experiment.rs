//! `tune` and `sweep`: plan loading, flag overrides, trainer registration and run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Result};
use clap::Args;
use serde::Serialize;

use smalldata_core::asha::events_to_jsonl;
use smalldata_core::datakit::{stratified_split, DatasetIndex, SplitResult};
use smalldata_core::learner::baseline::DEFAULT_POOL_FACTOR;
use smalldata_core::learner::external::{zoo_entry, ExternalFactory, REFERENCE_CHECKPOINT};
use smalldata_core::learner::{BaselineFactory, FeatureStore, TrainerFactory};
use smalldata_core::source::DirectorySource;
use smalldata_core::sweep::{
    run_experiment, run_sweep, tune as tune_trainer, write_outputs, ExperimentPlan, SweepReport, TrainerKind,
    TrainerSpec, TuningEntry,
};

use crate::{read_json, workers, write};

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory containing `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Experiment plan JSON; flags override its values.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Split file from `split`; computed from the plan's split spec when omitted.
    #[arg(long)]
    split: Option<PathBuf>,
    /// `builtin`, `external:<command>` or `<name>=<either>`; repeatable, replaces the plan's trainers.
    #[arg(long = "trainer")]
    trainers: Vec<String>,
    /// Checkpoint requested by external trainers given on the command line.
    #[arg(long, default_value = REFERENCE_CHECKPOINT)]
    checkpoint: String,
    /// Directory of `<item_id>.bin` model inputs from `preprocess`; needed by external trainers.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Per-request timeout for external trainers.
    #[arg(long, value_name = "SECONDS")]
    timeout: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// `issue` applies trial results in hand-out order, making tuning reproducible.
    #[arg(long, value_parser = ["completion", "issue"])]
    commit_order: Option<String>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    tuning_per_class: Option<usize>,
    /// Split and tuning seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Examples per class, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<u32>,
    /// `tuning.json` from a previous `tune`; skips tuning.
    #[arg(long)]
    tuning: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    created_unix_seconds: u64,
    data: &'a Path,
    split: Option<&'a Path>,
    tuning: Option<&'a Path>,
    workers: usize,
    plan: &'a ExperimentPlan,
}

struct Prepared {
    plan: ExperimentPlan,
    split: SplitResult,
    workers: usize,
    factories: Vec<(String, Box<dyn TrainerFactory>)>,
}

impl Prepared {
    fn factories(&self) -> BTreeMap<String, &dyn TrainerFactory> {
        self.factories.iter().map(|(n, f)| (n.clone(), f.as_ref())).collect()
    }
}

/// Parses `builtin`, `external:<command>` and their `<name>=` forms.
fn parse_trainer(arg: &str, checkpoint: &str) -> Result<TrainerSpec> {
    let (name, kind) = match arg.split_once('=') {
        Some((n, k)) if !n.contains(':') => (Some(n.to_string()), k),
        _ => (None, arg),
    };
    if kind == "builtin" {
        return Ok(TrainerSpec::builtin(name.unwrap_or_else(|| "builtin".into())));
    }
    let Some(command) = kind.strip_prefix("external:") else {
        bail!("trainer `{arg}` is neither `builtin` nor `external:<command>`");
    };
    ExternalFactory::parse_command(command)?;
    let name = name.unwrap_or_else(|| zoo_entry(checkpoint).map_or("external", |z| z.short_name).to_string());
    Ok(TrainerSpec {
        name,
        kind: TrainerKind::External {
            command: command.to_string(),
            checkpoint: checkpoint.to_string(),
        },
        search_space: None,
    })
}

fn load_plan(a: &RunArgs) -> Result<ExperimentPlan> {
    let mut plan: ExperimentPlan = match &a.plan {
        Some(p) => read_json(p)?,
        None => ExperimentPlan::default(),
    };
    if !a.trainers.is_empty() {
        plan.trainers = a
            .trainers
            .iter()
            .map(|t| parse_trainer(t, &a.checkpoint))
            .collect::<Result<_>>()?;
    }
    if let Some(n) = a.trials {
        plan.asha.n_trials = n;
    }
    let spaces = std::iter::once(&mut plan.search_space).chain(plan.trainers.iter_mut().filter_map(|t| t.search_space.as_mut()));
    for space in spaces {
        if let Some(v) = a.lr_min {
            space.lr_min = v;
        }
        if let Some(v) = a.lr_max {
            space.lr_max = v;
        }
    }
    if let Some(n) = a.tuning_per_class {
        plan.tuning_examples_per_class = n;
    }
    if let Some(s) = a.seed {
        plan.split.seed = s;
    }
    if let Some(order) = &a.commit_order {
        plan.asha.commit_order = serde_json::from_value(serde_json::Value::String(order.clone()))?;
    }
    plan.asha.workers = workers(a.workers, plan.asha.workers);
    Ok(plan)
}

fn prepare(a: &RunArgs, plan: ExperimentPlan) -> Result<Prepared> {
    plan.validate()?;
    let source = DirectorySource::open(&a.data)?;
    let split = match &a.split {
        Some(p) => read_json::<SplitResult>(p)?,
        None => stratified_split(&DatasetIndex::from_manifest(source.manifest())?, &plan.split)?,
    };
    let workers = plan.asha.workers;
    let mut store: Option<Arc<FeatureStore>> = None;
    let mut factories: Vec<(String, Box<dyn TrainerFactory>)> = Vec::new();
    for spec in &plan.trainers {
        let factory: Box<dyn TrainerFactory> = match &spec.kind {
            TrainerKind::Builtin => {
                let store = match &store {
                    Some(s) => Arc::clone(s),
                    None => {
                        let ids = split
                            .train
                            .entries()
                            .iter()
                            .chain(split.eval.entries())
                            .chain(split.test.entries())
                            .map(|e| e.item_id.as_str());
                        let built = Arc::new(FeatureStore::build(&source, ids, DEFAULT_POOL_FACTOR, workers)?);
                        store.insert(built).clone()
                    }
                };
                Box::new(BaselineFactory::new(store))
            }
            TrainerKind::External { command, checkpoint } => {
                let inputs = a
                    .inputs
                    .clone()
                    .ok_or_else(|| anyhow!("external trainer `{}` needs --inputs (see `preprocess`)", spec.name))?;
                let mut f = ExternalFactory::new(
                    ExternalFactory::parse_command(command)?,
                    checkpoint.clone(),
                    inputs,
                    a.out.join("work").join(&spec.name),
                );
                if let Some(s) = a.timeout {
                    f.timeout = Duration::from_secs(s);
                }
                Box::new(f)
            }
        };
        factories.push((spec.name.clone(), factory));
    }
    Ok(Prepared {
        plan,
        split,
        workers,
        factories,
    })
}

fn write_manifest(a: &RunArgs, command: &str, tuning: Option<&Path>, p: &Prepared) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = RunManifest {
        command,
        created_unix_seconds: created,
        data: &a.data,
        split: a.split.as_deref(),
        tuning,
        workers: p.workers,
        plan: &p.plan,
    };
    write(&a.out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    write(&a.out.join("plan.json"), serde_json::to_string_pretty(&p.plan)?)?;
    write(&a.out.join("split.json"), p.split.to_json()?)
}

fn print_tuning(tuning: &BTreeMap<String, TuningEntry>) {
    for (name, t) in tuning {
        println!(
            "{name:<16} lr {:.3e}  batch {:>3}  trial {:>3}  rung {}  eval macro-F1 {:.4}",
            t.learning_rate, t.batch_size, t.trial, t.rung, t.metric
        );
    }
}

pub fn tune(a: RunArgs) -> Result<()> {
    let p = prepare(&a, load_plan(&a)?)?;
    write_manifest(&a, "tune", None, &p)?;
    let factories = p.factories();
    let mut tuning = BTreeMap::new();
    let mut failed = Vec::new();
    for spec in &p.plan.trainers {
        match tune_trainer(&p.plan, spec, factories[&spec.name], &p.split) {
            Ok(out) => {
                write(
                    &a.out.join("events").join(format!("{}.jsonl", spec.name)),
                    events_to_jsonl(&out.events)?,
                )?;
                if out.failures > 0 {
                    log::warn!("`{}`: {} trial(s) failed", spec.name, out.failures);
                }
                tuning.insert(spec.name.clone(), out.entry);
            }
            Err(e) => {
                eprintln!("tuning `{}` failed: {e}", spec.name);
                failed.push(spec.name.clone());
            }
        }
    }
    write(&a.out.join("tuning.json"), serde_json::to_string_pretty(&tuning)?)?;
    print_tuning(&tuning);
    if !failed.is_empty() {
        bail!("tuning failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn sweep(s: SweepArgs) -> Result<()> {
    let a = &s.run;
    let mut plan = load_plan(a)?;
    if let Some(l) = &s.ladder {
        plan.ladder_sizes = l.clone();
    }
    if let Some(v) = &s.seeds {
        plan.seeds = v.clone();
    }
    if let Some(e) = s.epochs {
        plan.epochs = e;
    }
    let p = prepare(a, plan)?;
    write_manifest(a, "sweep", s.tuning.as_deref(), &p)?;
    let factories = p.factories();
    let report: SweepReport = match &s.tuning {
        Some(path) => {
            let tuning: BTreeMap<String, TuningEntry> = read_json(path)?;
            write(&a.out.join("tuning.json"), serde_json::to_string_pretty(&tuning)?)?;
            let report = run_sweep(&p.plan, &p.split, &tuning, &factories, p.workers)?;
            write_outputs(&a.out, &report)?;
            report
        }
        None => {
            let out = run_experiment(&p.plan, &p.split, &factories, p.workers, Some(&a.out))?;
            print_tuning(&out.tuning);
            out.report
        }
    };
    for g in &report.aggregates {
        println!(
            "{:<16} {:>6}/class  macro-F1 {:.4} ± {:.4}  ({} ok, {} failed)",
            g.trainer, g.train_size, g.mean_macro_f1, g.std_macro_f1, g.n, g.failed
        );
    }
    let failed = report.failed().count();
    if failed == report.records.len() {
        bail!("every sweep cell failed");
    }
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see report.json", report.records.len());
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}
