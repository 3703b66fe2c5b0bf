//! `smalldata`: generate synthetic datasets, split and preprocess them, tune and sweep
//! trainers, and inspect the resulting reports and scheduler logs.

mod experiment;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use smalldata_core::asha::audit_jsonl;
use smalldata_core::datakit::{stratified_split, DatasetIndex, SplitSpec};
use smalldata_core::heightfield::tiff::encode_image;
use smalldata_core::heightfield::{DatasetManifest, SynthesisConfig};
use smalldata_core::learner::baseline::gradcheck_suite;
use smalldata_core::learner::external::model_input_file;
use smalldata_core::preprocess::preprocess;
use smalldata_core::source::{DirectorySource, PatchSource, MANIFEST_FILE};
use smalldata_core::sweep::{emit_report, ReportFormat, SweepReport};
use smalldata_core::{pool, DefectLabel};

#[derive(Debug, Parser)]
#[command(name = "smalldata", version, about = "Small-data benchmark harness for tape-laying inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a labelled dataset of 16-bit TIFF height patches.
    Generate(GenerateArgs),
    /// Stratified train / eval / test split of a dataset directory.
    Split(SplitArgs),
    /// Write the 224×224×3 model input of every patch as `<item_id>.bin`.
    Preprocess(PreprocessArgs),
    /// Tune every trainer of a plan with ASHA.
    Tune(experiment::RunArgs),
    /// Tune (unless a tuning file is given) and sweep the training-size ladder.
    Sweep(experiment::SweepArgs),
    /// Convert a `report.json` to csv, json or plot data.
    Report(ReportArgs),
    /// Replay a scheduler event log and check the promotion rules.
    Audit(AuditArgs),
    /// Compare the baseline's analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Nominal, gap and overlap counts, e.g. `84,12,4`.
    #[arg(long, value_parser = parse_counts)]
    counts: [usize; 3],
    #[arg(long)]
    seed: Option<u64>,
    /// Synthesis config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Dataset directory containing `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    /// Output file.
    #[arg(long, default_value = "split.json")]
    out: PathBuf,
    /// Split spec JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A `report.json` written by `sweep`.
    input: PathBuf,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json", "plotdata"])]
    format: String,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Event log in JSON lines.
    log: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

fn parse_counts(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [n, g, o] = parts.as_slice() else {
        return Err(format!("expected three comma-separated counts, got `{s}`"));
    };
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("bad count `{v}`: {e}"));
    Ok([num(n)?, num(g)?, num(o)?])
}

/// The error chain, skipping causes whose text the previous message already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Preprocess(a) => preprocess_dir(a),
        Command::Tune(a) => experiment::tune(a),
        Command::Sweep(a) => experiment::sweep(a),
        Command::Report(a) => report(a),
        Command::Audit(a) => audit(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn workers(flag: Option<usize>, fallback: usize) -> usize {
    flag.or_else(pool::workers_from_env).unwrap_or(fallback).max(1)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg: SynthesisConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthesisConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let counts: BTreeMap<DefectLabel, usize> = DefectLabel::ALL.into_iter().zip(a.counts).collect();
    let manifest = DatasetManifest::plan(&cfg, &counts)?;
    std::fs::create_dir_all(a.out.join("patches")).with_context(|| format!("creating {}", a.out.display()))?;
    let written = pool::parallel_map(&manifest.patches, default_workers(), |entry| -> Result<()> {
        let patch = manifest.synthesize(entry)?;
        write(&a.out.join(&entry.file), encode_image(patch.image())?)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    write(&a.out.join(MANIFEST_FILE), manifest.to_json()?)?;
    print_histogram(&manifest.counts);
    Ok(())
}

fn print_histogram(counts: &BTreeMap<DefectLabel, usize>) {
    let total: usize = counts.values().sum();
    for (label, &n) in counts {
        let pct = if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
        println!("{:<8} {n:>7} {pct:>6.2}%", label.as_str());
    }
    println!("{:<8} {total:>7}", "total");
}

fn split(a: SplitArgs) -> Result<()> {
    let mut spec: SplitSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SplitSpec::default(),
    };
    if let Some(f) = a.train_fraction {
        spec.train_fraction = f;
    }
    if let Some(f) = a.eval_fraction {
        spec.eval_fraction_of_train = f;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let source = DirectorySource::open(&a.data)?;
    let index = DatasetIndex::from_manifest(source.manifest())?;
    let result = stratified_split(&index, &spec)?;
    write(&a.out, result.to_json()?)?;
    for (name, part) in [("train", &result.train), ("eval", &result.eval), ("test", &result.test)] {
        let counts: Vec<String> = part.histogram().iter().map(|(l, n)| format!("{l}={n}")).collect();
        println!("{name:<5} {:>7}  {}", part.len(), counts.join(" "));
    }
    Ok(())
}

fn preprocess_dir(a: PreprocessArgs) -> Result<()> {
    let source = DirectorySource::open(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let entries = &source.manifest().patches;
    let done = pool::parallel_map(entries, workers(a.workers, default_workers()), |e| -> Result<()> {
        let input = preprocess(&source.load(&e.item_id)?, e.item_id.clone())?;
        write(&a.out.join(model_input_file(&e.item_id)), input.to_bytes())
    });
    done.into_iter().collect::<Result<Vec<()>>>()?;
    println!("{} model inputs written to {}", entries.len(), a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let report: SweepReport = read_json(&a.input)?;
    let format: ReportFormat = a.format.parse()?;
    let bytes = emit_report(&report, format)?;
    match &a.out {
        Some(p) => write(p, bytes),
        None => {
            use std::io::Write as _;
            std::io::stdout().write_all(&bytes).context("writing to stdout")
        }
    }
}

fn audit(a: AuditArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let report = audit_jsonl(&text)?;
    println!(
        "{} events, {} trials, {} promotions, {} epochs by reports",
        report.events, report.trials, report.promotions, report.epochs_by_reports
    );
    if report.excess_promotions > 0 {
        println!("{} promotions beyond the final rung quotas", report.excess_promotions);
    }
    if report.is_clean() {
        println!("no violations");
        return Ok(());
    }
    for v in &report.violations {
        eprintln!("violation at event {} (t={}): {}", v.index, v.t, v.message);
    }
    bail!("{} violation(s) in {}", report.violations.len(), a.log.display())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let summary = gradcheck_suite(a.draws, a.seed, a.eps)?;
    println!(
        "max relative error {:.3e} over {} draws (eps {:e})",
        summary.max_relative_error, summary.draws, a.eps
    );
    if summary.max_relative_error >= GRADCHECK_TOLERANCE {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", summary.max_relative_error);
    }
    Ok(())
}
