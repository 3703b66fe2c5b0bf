//! Two-phase experiment: tune each trainer once with ASHA on a balanced subset, then train
//! fresh models across the training-size ladder and score them on the fixed test split.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::asha::{events_to_jsonl, run_asha, AshaConfig, LoggedEvent, SearchSpace};
use crate::datakit::{balance, subset_ladder, DatasetIndex, SplitResult, SplitSpec};
use crate::learner::external::zoo_entry;
use crate::learner::{TrainConfig, TrainerFactory, TrialData};
use crate::metrics::EvalReport;
use crate::{pool, DefectLabel, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerKind {
    Builtin,
    External { command: String, checkpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TrainerKind,
    /// Overrides the plan-wide search space for this trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_space: Option<SearchSpace>,
}

impl TrainerSpec {
    /// The built-in baseline with its own learning-rate range.
    pub fn builtin(name: impl Into<String>) -> Self {
        TrainerSpec {
            name: name.into(),
            kind: TrainerKind::Builtin,
            search_space: Some(SearchSpace::baseline()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub trainers: Vec<TrainerSpec>,
    pub ladder_sizes: Vec<usize>,
    pub tuning_examples_per_class: usize,
    pub asha: AshaConfig,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    /// Epochs per sweep cell.
    pub epochs: u32,
    pub search_space: SearchSpace,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            trainers: vec![TrainerSpec::builtin("builtin")],
            ladder_sizes: vec![200, 400, 600, 800, 1200, 1600, 2000],
            tuning_examples_per_class: 512,
            asha: AshaConfig::default(),
            split: SplitSpec::default(),
            seeds: vec![0],
            epochs: 32,
            search_space: SearchSpace::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trainers.is_empty() {
            return Err(Error::Config("plan has no trainers".into()));
        }
        let mut names: Vec<&str> = self.trainers.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("trainer name `{}` is used twice", w[0])));
        }
        if let Some(bad) = self.trainers.iter().find(|t| !valid_name(&t.name)) {
            return Err(Error::Config(format!(
                "trainer name `{}` must be non-empty and use only letters, digits, `-`, `_` or `.`",
                bad.name
            )));
        }
        if self.ladder_sizes.is_empty() || self.ladder_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ladder sizes must be non-empty and strictly increasing, got {:?}",
                self.ladder_sizes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan has no seeds".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.tuning_examples_per_class == 0 {
            return Err(Error::Config("tuning_examples_per_class must be >= 1".into()));
        }
        self.asha.validate()?;
        self.split.validate()?;
        self.search_space.validate()?;
        for t in &self.trainers {
            if let Some(s) = &t.search_space {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn trainer(&self, name: &str) -> Option<&TrainerSpec> {
        self.trainers.iter().find(|t| t.name == name)
    }

    pub fn space_for<'a>(&'a self, spec: &'a TrainerSpec) -> &'a SearchSpace {
        spec.search_space.as_ref().unwrap_or(&self.search_space)
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Best configuration found for one trainer, in the shape of the tuned-hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trial: usize,
    pub rung: usize,
    pub metric: f64,
}

impl TuningEntry {
    /// Training config for one sweep cell.
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub entry: TuningEntry,
    pub events: Vec<LoggedEvent>,
    pub epochs_trained: u64,
    pub failures: usize,
}

/// Balances the train split to the tuning size and runs ASHA against the eval split.
pub fn tune(plan: &ExperimentPlan, spec: &TrainerSpec, factory: &dyn TrainerFactory, split: &SplitResult) -> Result<TuneOutcome> {
    let subset = balance(&split.train, plan.tuning_examples_per_class, plan.split.seed)?;
    let data = TrialData::new(subset, split.eval.clone(), split.test.clone());
    data.check_test_hygiene()?;
    info!(
        "tuning `{}`: {} trials on {} items",
        spec.name,
        plan.asha.n_trials,
        data.train.len()
    );
    let out = run_asha(factory, &data, &plan.asha, plan.space_for(spec), plan.split.seed)?;
    Ok(TuneOutcome {
        entry: TuningEntry {
            learning_rate: out.best.config.learning_rate,
            batch_size: out.best.config.batch_size,
            trial: out.best.trial,
            rung: out.best.rung,
            metric: out.best.metric,
        },
        events: out.events,
        epochs_trained: out.epochs_trained,
        failures: out.failures,
    })
}

/// JSON has no NaN; serde_json writes it as `null`.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trainer: String,
    /// Examples per class.
    pub train_size: usize,
    pub seed: u64,
    #[serde(deserialize_with = "nan_if_null")]
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn macro_f1(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.macro_f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trainer: String,
    pub train_size: usize,
    /// Successful runs.
    pub n: usize,
    pub failed: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_macro_f1: f64,
    /// Sample standard deviation; 0 for fewer than two runs.
    #[serde(deserialize_with = "nan_if_null")]
    pub std_macro_f1: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub min_macro_f1: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub max_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Backbone binary sizes (MB) for trainers that wrap a known checkpoint.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub model_size_mb: BTreeMap<String, u32>,
}

impl SweepReport {
    /// Builds aggregates from records, keeping the records' order of first appearance.
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &records {
            let k = (r.trainer.clone(), r.train_size);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let aggregates = keys
            .into_iter()
            .map(|(trainer, train_size)| {
                let cell: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.trainer == trainer && r.train_size == train_size)
                    .collect();
                let f1: Vec<f64> = cell.iter().filter_map(|r| r.macro_f1()).collect();
                let n = f1.len();
                let mean = if n == 0 { f64::NAN } else { f1.iter().sum::<f64>() / n as f64 };
                let std = if n < 2 {
                    0.0
                } else {
                    (f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
                Aggregate {
                    trainer,
                    train_size,
                    n,
                    failed: cell.len() - n,
                    mean_macro_f1: mean,
                    std_macro_f1: std,
                    min_macro_f1: f1.iter().copied().fold(f64::INFINITY, f64::min),
                    max_macro_f1: f1.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        SweepReport {
            records,
            aggregates,
            model_size_mb: BTreeMap::new(),
        }
    }

    pub fn aggregate(&self, trainer: &str, train_size: usize) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.trainer == trainer && a.train_size == train_size)
    }

    pub fn failed(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.error.is_some())
    }
}

struct Cell<'a> {
    spec: &'a TrainerSpec,
    factory: &'a dyn TrainerFactory,
    subset: &'a DatasetIndex,
    train_size: usize,
    seed: u64,
    config: TrainConfig,
}

fn run_cell(cell: &Cell<'_>, split: &SplitResult, epochs: u32) -> RunRecord {
    let started = Instant::now();
    let outcome = (|| {
        let data = TrialData::new(cell.subset.clone(), split.eval.clone(), split.test.clone());
        data.check_test_hygiene()?;
        let mut handle = cell.factory.create(&data)?;
        let result = (|| {
            handle.init(&cell.config)?;
            handle.train(epochs)?;
            handle.evaluate_test()
        })();
        let closed = handle.shutdown();
        let report = result?;
        closed?;
        Ok::<_, Error>(report)
    })();
    let wall_seconds = started.elapsed().as_secs_f64();
    let (report, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => {
            log::warn!(
                "cell {} size {} seed {} failed: {e}",
                cell.spec.name,
                cell.train_size,
                cell.seed
            );
            (None, Some(e.to_string()))
        }
    };
    RunRecord {
        trainer: cell.spec.name.clone(),
        train_size: cell.train_size,
        seed: cell.seed,
        learning_rate: cell.config.learning_rate,
        batch_size: cell.config.batch_size,
        report,
        error,
        wall_seconds,
    }
}

/// Trains every trainer × ladder size × seed cell with the tuned configs.
///
/// Subset membership depends only on the train split, the seed and the size, so every trainer
/// sees the same items. Cells run on `workers` threads; records come back in plan order.
pub fn run_sweep(
    plan: &ExperimentPlan,
    split: &SplitResult,
    tuned: &BTreeMap<String, TuningEntry>,
    factories: &BTreeMap<String, &dyn TrainerFactory>,
    workers: usize,
) -> Result<SweepReport> {
    plan.validate()?;
    let ladders: Vec<Vec<DatasetIndex>> = plan
        .seeds
        .iter()
        .map(|&seed| subset_ladder(&split.train, &plan.ladder_sizes, seed))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for spec in &plan.trainers {
        let factory = *factories
            .get(&spec.name)
            .ok_or_else(|| Error::Config(format!("no factory for trainer `{}`", spec.name)))?;
        let entry = tuned
            .get(&spec.name)
            .ok_or_else(|| Error::Config(format!("trainer `{}` has not been tuned", spec.name)))?;
        for (s, &size) in plan.ladder_sizes.iter().enumerate() {
            for (k, &seed) in plan.seeds.iter().enumerate() {
                cells.push(Cell {
                    spec,
                    factory,
                    subset: &ladders[k][s],
                    train_size: size,
                    seed,
                    config: entry.config(seed),
                });
            }
        }
    }
    let records = pool::parallel_map(&cells, workers, |c| run_cell(c, split, plan.epochs));
    let mut report = SweepReport::from_records(records);
    for spec in &plan.trainers {
        if let TrainerKind::External { checkpoint, .. } = &spec.kind {
            if let Some(z) = zoo_entry(checkpoint) {
                report.model_size_mb.insert(spec.name.clone(), z.size_mb);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub tuning: BTreeMap<String, TuningEntry>,
    pub report: SweepReport,
}

/// Tunes each trainer then runs its sweep cells; persists artifacts when `run_dir` is given.
///
/// Writes `tuning.json`, `events/<trainer>.jsonl`, `report.csv`, `report.json` and
/// `plotdata.json`. A trainer whose tuning fails gets failed cells in the report.
pub fn run_experiment(
    plan: &ExperimentPlan,
    split: &SplitResult,
    factories: &BTreeMap<String, &dyn TrainerFactory>,
    workers: usize,
    run_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let mut tuning = BTreeMap::new();
    let mut records = Vec::new();
    let mut sizes = BTreeMap::new();
    for spec in &plan.trainers {
        let factory = *factories
            .get(&spec.name)
            .ok_or_else(|| Error::Config(format!("no factory for trainer `{}`", spec.name)))?;
        let single = ExperimentPlan {
            trainers: vec![spec.clone()],
            ..plan.clone()
        };
        match tune(plan, spec, factory, split) {
            Ok(out) => {
                if let Some(dir) = run_dir {
                    write_file(&dir.join("events").join(format!("{}.jsonl", spec.name)), events_to_jsonl(&out.events)?)?;
                }
                let entry = out.entry;
                tuning.insert(spec.name.clone(), entry.clone());
                let one = BTreeMap::from([(spec.name.clone(), entry)]);
                let r = run_sweep(&single, split, &one, factories, workers)?;
                records.extend(r.records);
                sizes.extend(r.model_size_mb);
            }
            Err(e) => {
                log::warn!("tuning `{}` failed: {e}", spec.name);
                for &size in &plan.ladder_sizes {
                    for &seed in &plan.seeds {
                        records.push(RunRecord {
                            trainer: spec.name.clone(),
                            train_size: size,
                            seed,
                            learning_rate: f64::NAN,
                            batch_size: 0,
                            report: None,
                            error: Some(format!("tuning failed: {e}")),
                            wall_seconds: 0.0,
                        });
                    }
                }
            }
        }
    }
    let mut report = SweepReport::from_records(records);
    report.model_size_mb = sizes;
    if let Some(dir) = run_dir {
        write_file(&dir.join("tuning.json"), serde_json::to_string_pretty(&tuning)?)?;
        write_outputs(dir, &report)?;
    }
    Ok(ExperimentOutcome { tuning, report })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.json` and `plotdata.json` into `dir`.
pub fn write_outputs(dir: &Path, report: &SweepReport) -> Result<()> {
    for (name, format) in [
        ("report.csv", ReportFormat::Csv),
        ("report.json", ReportFormat::Json),
        ("plotdata.json", ReportFormat::PlotData),
    ] {
        write_file(&dir.join(name), emit_report(report, format)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    PlotData,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 10] = [
    "trainer",
    "train_size",
    "seed",
    "lr",
    "batch_size",
    "macro_f1",
    "nominal_acc",
    "gap_acc",
    "overlap_acc",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub trainer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size_mb: Option<u32>,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
    pub error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub series: Vec<PlotSeries>,
}

pub fn plot_data(report: &SweepReport) -> PlotData {
    let mut series: Vec<PlotSeries> = Vec::new();
    for a in report.aggregates.iter().filter(|a| a.n > 0) {
        let idx = match series.iter().position(|s| s.trainer == a.trainer) {
            Some(i) => i,
            None => {
                series.push(PlotSeries {
                    trainer: a.trainer.clone(),
                    model_size_mb: report.model_size_mb.get(&a.trainer).copied(),
                    x: Vec::new(),
                    y: Vec::new(),
                    error: Vec::new(),
                });
                series.len() - 1
            }
        };
        let s = &mut series[idx];
        s.x.push(a.train_size);
        s.y.push(a.mean_macro_f1);
        s.error.push(a.std_macro_f1);
    }
    PlotData { series }
}

fn csv_bytes(report: &SweepReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Report(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &report.records {
        let metric = |f: &dyn Fn(&EvalReport) -> f64| r.report.as_ref().map_or(String::new(), |rep| format!("{:.6}", f(rep)));
        w.write_record([
            r.trainer.clone(),
            r.train_size.to_string(),
            r.seed.to_string(),
            if r.learning_rate.is_finite() { format!("{:e}", r.learning_rate) } else { String::new() },
            r.batch_size.to_string(),
            metric(&|rep| rep.macro_f1),
            metric(&|rep| rep.accuracy(DefectLabel::Nominal)),
            metric(&|rep| rep.accuracy(DefectLabel::Gap)),
            metric(&|rep| rep.accuracy(DefectLabel::Overlap)),
            format!("{:.3}", r.wall_seconds),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

/// Serializes a non-empty report. Failed cells have empty metric fields in csv.
pub fn emit_report(report: &SweepReport, format: ReportFormat) -> Result<Vec<u8>> {
    if report.records.is_empty() {
        return Err(Error::Report("report has no records".into()));
    }
    match format {
        ReportFormat::Csv => csv_bytes(report),
        ReportFormat::Json => Ok(serde_json::to_vec_pretty(report)?),
        ReportFormat::PlotData => Ok(serde_json::to_vec_pretty(&plot_data(report))?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asha::mock::MockFactory;
    use crate::datakit::stratified_split;
    use crate::heightfield::{synthesize_dataset, SynthesisConfig};
    use crate::learner::{BaselineFactory, FeatureStore};
    use crate::metrics::{confusion, evaluate};
    use crate::source::MemorySource;
    use std::sync::Arc;
    use DefectLabel::{Gap as G, Nominal as N, Overlap as O};

    fn record(trainer: &str, size: usize, seed: u64, f1_labels: (&[DefectLabel], &[DefectLabel])) -> RunRecord {
        RunRecord {
            trainer: trainer.into(),
            train_size: size,
            seed,
            learning_rate: 1.5e-5,
            batch_size: 32,
            report: Some(evaluate(&confusion(f1_labels.0, f1_labels.1).unwrap())),
            error: None,
            wall_seconds: 0.25,
        }
    }

    fn synthetic(per_label: usize) -> (Arc<FeatureStore>, SplitResult) {
        let counts: BTreeMap<_, _> = DefectLabel::ALL.iter().map(|&l| (l, per_label)).collect();
        let (patches, manifest) = synthesize_dataset(&SynthesisConfig::default(), &counts).unwrap();
        let index = DatasetIndex::from_manifest(&manifest).unwrap();
        let source = MemorySource::from_patches(&manifest, patches);
        let store = FeatureStore::build(&source, index.ids(), 4, 4).unwrap();
        (Arc::new(store), stratified_split(&index, &SplitSpec::default()).unwrap())
    }

    fn small_plan() -> ExperimentPlan {
        ExperimentPlan {
            ladder_sizes: vec![5, 10],
            tuning_examples_per_class: 10,
            asha: AshaConfig {
                max_t: 8,
                n_trials: 4,
                workers: 2,
                ..AshaConfig::default()
            },
            seeds: vec![0, 1],
            epochs: 8,
            search_space: SearchSpace {
                lr_min: 1e-3,
                lr_max: 1e-1,
                ..SearchSpace::default()
            },
            ..ExperimentPlan::default()
        }
    }

    #[test]
    fn plan_validation() {
        assert!(ExperimentPlan::default().validate().is_ok());
        let bad = |f: fn(&mut ExperimentPlan)| {
            let mut p = ExperimentPlan::default();
            f(&mut p);
            p.validate().is_err()
        };
        assert!(bad(|p| p.ladder_sizes = vec![400, 200]));
        assert!(bad(|p| p.ladder_sizes.clear()));
        assert!(bad(|p| p.seeds.clear()));
        assert!(bad(|p| p.trainers.push(TrainerSpec::builtin("builtin"))));
        assert!(bad(|p| p.trainers[0].name = "a/b".into()));
        assert!(bad(|p| p.epochs = 0));
    }

    #[test]
    fn plan_json_shape() {
        let json = r#"{"trainers":[{"name":"builtin","kind":"builtin"},
            {"name":"r18","kind":"external","command":"python -m trainer","checkpoint":"microsoft/resnet-18",
             "search_space":{"lr_min":1e-6,"lr_max":1e-4,"batch_sizes":[16,32,64]}}],
            "seeds":[1,2]}"#;
        let plan: ExperimentPlan = serde_json::from_str(json).unwrap();
        assert!(plan.validate().is_ok());
        assert_eq!(plan.ladder_sizes, vec![200, 400, 600, 800, 1200, 1600, 2000]);
        assert_eq!(plan.tuning_examples_per_class, 512);
        assert_eq!(plan.space_for(&plan.trainers[1]).batch_sizes, vec![16, 32, 64]);
        let back: ExperimentPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn aggregates_are_means() {
        let rep = SweepReport::from_records(vec![
            record("a", 200, 0, (&[N, G, O], &[N, G, O])),
            record("a", 200, 1, (&[N, G, O], &[N, G, G])),
        ]);
        let a = rep.aggregate("a", 200).unwrap();
        let (x, y) = (rep.records[0].macro_f1().unwrap(), rep.records[1].macro_f1().unwrap());
        assert_eq!(a.mean_macro_f1, (x + y) / 2.0);
        assert_eq!(a.n, 2);
        assert!(a.std_macro_f1 > 0.0);
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let rep = SweepReport::from_records(vec![record("a", 200, 0, (&[N, G, O, O], &[N, G, O, G]))]);
        let csv_text = String::from_utf8(emit_report(&rep, ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));

        let json = emit_report(&rep, ReportFormat::Json).unwrap();
        let parsed: SweepReport = serde_json::from_slice(&json).unwrap();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let row = reader.records().next().unwrap().unwrap();
        let r = &parsed.records[0];
        let num = |i: usize| row[i].parse::<f64>().unwrap();
        let rep0 = r.report.as_ref().unwrap();
        assert_eq!(num(3), r.learning_rate);
        assert_eq!(format!("{:.6}", num(5)), format!("{:.6}", rep0.macro_f1));
        assert_eq!(format!("{:.6}", num(8)), format!("{:.6}", rep0.accuracy(O)));
    }

    #[test]
    fn failed_only_cells_survive_json() {
        let mut r = record("a", 5, 0, (&[N], &[N]));
        r.report = None;
        r.learning_rate = f64::NAN;
        r.error = Some("tuning failed".into());
        let rep = SweepReport::from_records(vec![r]);
        let json = emit_report(&rep, ReportFormat::Json).unwrap();
        let back: SweepReport = serde_json::from_slice(&json).unwrap();
        assert!(back.aggregates[0].mean_macro_f1.is_nan());
        assert!(back.records[0].learning_rate.is_nan());
        assert_eq!(back.aggregates[0].failed, 1);
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(emit_report(&SweepReport::default(), ReportFormat::Csv).is_err());
    }

    #[test]
    fn failed_cells_have_blank_metrics() {
        let mut r = record("a", 5, 0, (&[N], &[N]));
        r.report = None;
        r.error = Some("boom".into());
        let rep = SweepReport::from_records(vec![r, record("b", 5, 0, (&[N], &[N]))]);
        assert_eq!(rep.failed().count(), 1);
        let text = String::from_utf8(emit_report(&rep, ReportFormat::Csv).unwrap()).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",32,,,,,"));
        let plot = plot_data(&rep);
        assert_eq!(plot.series.len(), 1);
    }

    #[test]
    fn plotdata_has_one_series_per_trainer() {
        let rep = SweepReport::from_records(vec![
            record("a", 200, 0, (&[N], &[N])),
            record("a", 400, 0, (&[N], &[N])),
            record("b", 200, 0, (&[N], &[G])),
        ]);
        let plot = plot_data(&rep);
        assert_eq!(plot.series.len(), 2);
        assert_eq!(plot.series[0].x, vec![200, 400]);
    }

    #[test]
    fn tune_with_mock_returns_analytic_best() {
        let (_, split) = synthetic(20);
        let target = 1e-2_f64;
        let factory = MockFactory::new(move |c, e| {
            (1.0 - (c.learning_rate.ln() - target.ln()).abs() / 10.0) * f64::from(e) / 8.0
        });
        let mut plan = small_plan();
        plan.asha.workers = 1;
        plan.asha.n_trials = 8;
        let out = tune(&plan, &plan.trainers[0], &factory, &split).unwrap();
        let space = plan.trainers[0].search_space.clone().unwrap_or_else(|| plan.search_space.clone());
        let best = (0..8)
            .map(|i| {
                let s = crate::asha::Scheduler::new(plan.asha, space.clone(), plan.split.seed).unwrap();
                crate::asha::sample_trial(&space, s.trial_seed(i)).learning_rate
            })
            .min_by(|a, b| (a.ln() - target.ln()).abs().total_cmp(&(b.ln() - target.ln()).abs()))
            .unwrap();
        assert_eq!(out.entry.learning_rate, best);
        assert!(out.events.len() > 8);
    }

    #[test]
    fn tune_rejects_oversized_subset() {
        let (store, split) = synthetic(20);
        let mut plan = small_plan();
        plan.tuning_examples_per_class = 1000;
        let f = BaselineFactory::new(store);
        assert!(matches!(
            tune(&plan, &plan.trainers[0], &f, &split),
            Err(Error::Balance { .. })
        ));
    }

    #[test]
    fn builtin_experiment_is_reproducible() {
        let (store, split) = synthetic(30);
        let plan = small_plan();
        let f = BaselineFactory::new(store);
        let factories: BTreeMap<String, &dyn TrainerFactory> = BTreeMap::from([("builtin".to_string(), &f as &dyn TrainerFactory)]);
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&plan, &split, &factories, 3, Some(dir.path())).unwrap();
        let b = run_experiment(&plan, &split, &factories, 1, None).unwrap();
        assert_eq!(a.tuning, b.tuning);
        let strip = |r: &SweepReport| -> Vec<_> {
            r.records.iter().map(|x| (x.trainer.clone(), x.train_size, x.seed, x.report.clone())).collect()
        };
        assert_eq!(strip(&a.report), strip(&b.report));
        assert_eq!(a.report.records.len(), 4);
        assert!(a.report.failed().next().is_none());
        for f in ["report.csv", "report.json", "plotdata.json", "tuning.json", "events/builtin.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let lr = a.tuning["builtin"].learning_rate;
        assert!((1e-3..=1e-1).contains(&lr));
    }

    #[test]
    fn failing_trainer_does_not_abort() {
        struct Broken;
        impl TrainerFactory for Broken {
            fn create(&self, _: &TrialData) -> Result<Box<dyn crate::learner::TrainerHandle>> {
                Err(Error::Protocol("trainer missing".into()))
            }
        }
        let (store, split) = synthetic(20);
        let mut plan = small_plan();
        plan.trainers.push(TrainerSpec {
            name: "ext".into(),
            kind: TrainerKind::External {
                command: "nope".into(),
                checkpoint: "microsoft/resnet-18".into(),
            },
            search_space: None,
        });
        let good = BaselineFactory::new(store);
        let factories: BTreeMap<String, &dyn TrainerFactory> = BTreeMap::from([
            ("builtin".to_string(), &good as &dyn TrainerFactory),
            ("ext".to_string(), &Broken as &dyn TrainerFactory),
        ]);
        let out = run_experiment(&plan, &split, &factories, 2, None).unwrap();
        assert_eq!(out.report.failed().count(), 4);
        assert_eq!(out.report.records.len(), 8);
        assert!(out.report.aggregate("ext", 5).unwrap().failed == 2);
        assert!(emit_report(&out.report, ReportFormat::Csv).is_ok());
    }

    #[test]
    fn nested_subsets_shared_across_trainers() {
        let (_, split) = synthetic(30);
        let a = subset_ladder(&split.train, &[5, 10], 4).unwrap();
        let b = subset_ladder(&split.train, &[5, 10], 4).unwrap();
        assert_eq!(a, b);
        assert!(a[1].contains_all(&a[0]));
    }
}
