//! Command-line front end: `generate`, `run`, `freq-analysis` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{forgetting_curve_csv, freq_profile_csv, profile_from_base, spearman};
use crate::protocol::{generate_synthetic, save_dataset, GeneratorParams};
use crate::trainer::{run_experiment_with_base, train_base_for_plan, Mode, ResultRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const RESULT_FILE: &str = "result.json";
pub const SUMMARY_FILE: &str = "summary.json";
const THREADS_VAR: &str = "MGSVF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mgsvf", version, about = "Few-shot class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-cluster dataset (CSV plus meta.json).
    Generate(GenerateArgs),
    /// Run every seed of an experiment config.
    Run(RunArgs),
    /// Forgetting when distilling one frequency group at a time.
    FreqAnalysis(FreqArgs),
    /// Aggregate result records below a directory.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 40)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 100)]
    pub train: usize,
    /// Test samples per class.
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Standard deviation of the per-class Gaussian noise.
    #[arg(long, default_value_t = 0.2)]
    pub spread: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Overrides `train.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct FreqArgs {
    pub config: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    pub groups: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Unified,
    Intra,
    Inter,
    Mgsvf,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unified => Mode::Unified,
            ModeArg::Intra => Mode::Intra,
            ModeArg::Inter => Mode::Inter,
            ModeArg::Mgsvf => Mode::Mgsvf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Run(a) => cmd_run(&a),
        Command::FreqAnalysis(a) => cmd_freq_analysis(&a),
        Command::Report(a) => cmd_report(&a).map(|text| print!("{text}")),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Configuration and usage mistakes exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_) | Error::InvalidInput(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got {raw:?}"))?;
    // A pool may already exist when called twice in one process (tests).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let params = GeneratorParams {
        n_classes: args.classes,
        input_dim: args.dim,
        train_per_class: args.train,
        test_per_class: args.test,
        spread: args.spread,
        seed: args.seed,
    };
    let data = generate_synthetic(&params)?;
    save_dataset(&data, &args.out)?;
    eprintln!("wrote {} samples to {}", data.samples().len(), args.out.display());
    Ok(())
}

fn load_config(path: &Path, out: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub stddev: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub average_accuracy: Stat,
    pub last_accuracy: Stat,
    pub final_forgetting: Option<Stat>,
}

impl Summary {
    pub fn from_records(records: &[ResultRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("no records to summarize"))?;
        let forgetting: Option<Vec<f64>> = records.iter().map(|r| r.final_forgetting).collect();
        Ok(Self {
            mode: first.mode,
            seeds: records.iter().map(|r| r.seed).collect(),
            average_accuracy: Stat::of(records.iter().map(|r| r.average_accuracy).collect()),
            last_accuracy: Stat::of(records.iter().map(|r| r.last_accuracy).collect()),
            final_forgetting: forgetting.map(Stat::of),
        })
    }
}

fn seed_dir(root: &Path, mode: Mode, seed: u64) -> PathBuf {
    root.join(mode.name()).join(format!("seed-{seed}"))
}

fn write_record(dir: &Path, record: &ResultRecord) -> Result<()> {
    write(&dir.join(RESULT_FILE), &record.to_json()?)?;
    write(&dir.join("accuracy_matrix.csv"), &record.accuracy_matrix.to_csv())?;
    write(&dir.join("forgetting_curve.csv"), &forgetting_curve_csv(&record.average_forgetting_curve))
}

/// Runs every seed of `cfg` concurrently. Each seed writes its record after
/// every session, so a failure leaves the sessions completed so far on disk.
pub fn run_config(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let dataset = cfg.load_dataset()?;
    let mode = cfg.train.mode;
    let flush_error: Mutex<Option<Error>> = Mutex::new(None);
    let results: Vec<Result<ResultRecord>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(&cfg.output_dir, mode, seed);
            let plan = cfg.plan_for(&dataset, seed)?;
            let settings = cfg.settings_for(seed);
            let base = train_base_for_plan(&dataset, &plan, &settings.train)?;
            let mut flush = |r: &ResultRecord| {
                if let Err(e) = write_record(&dir, r) {
                    flush_error.lock().expect("flush lock").get_or_insert(e);
                }
            };
            let record = run_experiment_with_base(&dataset, &plan, &settings, &base, &mut flush)?;
            write_record(&dir, &record)?;
            Ok(record)
        })
        .collect();
    if let Some(e) = flush_error.into_inner().expect("flush lock") {
        return Err(e);
    }
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_records(&records)?;
    write(
        &cfg.output_dir.join(mode.name()).join(SUMMARY_FILE),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(records)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, &args.out)?;
    if let Some(m) = args.mode {
        cfg.train.mode = m.into();
        cfg.validate()?;
    }
    let records = run_config(&cfg)?;
    for r in &records {
        eprintln!(
            "{} seed {}: average {:.4}, last {:.4}, final forgetting {}",
            r.mode.name(),
            r.seed,
            r.average_accuracy,
            r.last_accuracy,
            r.final_forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}"))
        );
    }
    eprintln!("results in {}", cfg.output_dir.join(cfg.train.mode.name()).display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqSummary {
    pub groups: usize,
    pub seeds: Vec<u64>,
    /// Final-session forgetting per seed, one entry per group (low to high).
    pub profiles: Vec<Vec<f64>>,
    pub spearman: Vec<f64>,
    pub mean_profile: Vec<f64>,
    pub mean_spearman: f64,
}

/// Per-seed frequency profiles plus their rank correlation with group index.
pub fn freq_analysis(cfg: &ExperimentConfig, groups: usize) -> Result<FreqSummary> {
    if groups < 2 {
        return Err(Error::invalid("--groups must be at least 2"));
    }
    if groups > cfg.train.embed_dim {
        return Err(Error::invalid(format!(
            "--groups must not exceed the embedding size {}",
            cfg.train.embed_dim
        )));
    }
    let dataset = cfg.load_dataset()?;
    let profiles = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let plan = cfg.plan_for(&dataset, seed)?;
            let settings = cfg.settings_for(seed);
            let base = train_base_for_plan(&dataset, &plan, &settings.train)?;
            profile_from_base(&dataset, &plan, &settings, groups, &base)
        })
        .collect::<Result<Vec<_>>>()?;
    let index: Vec<f64> = (1..=groups).map(|g| g as f64).collect();
    let rho = profiles
        .iter()
        .map(|p| spearman(&index, p))
        .collect::<Result<Vec<_>>>()?;
    let n = profiles.len() as f64;
    let mean_profile = (0..groups).map(|g| profiles.iter().map(|p| p[g]).sum::<f64>() / n).collect();
    Ok(FreqSummary {
        groups,
        seeds: cfg.seeds.clone(),
        mean_spearman: rho.iter().sum::<f64>() / n,
        profiles,
        spearman: rho,
        mean_profile,
    })
}

pub fn cmd_freq_analysis(args: &FreqArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.out)?;
    let summary = freq_analysis(&cfg, args.groups as usize)?;
    let root = cfg.output_dir.join("freq-analysis");
    for (seed, profile) in summary.seeds.iter().zip(&summary.profiles) {
        write(&root.join(format!("seed-{seed}")).join("freq_profile.csv"), &freq_profile_csv(profile))?;
    }
    write(&root.join("freq_profile.csv"), &freq_profile_csv(&summary.mean_profile))?;
    write(&root.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    for (g, f) in summary.mean_profile.iter().enumerate() {
        eprintln!("group {}: forgetting {f:.4}", g + 1);
    }
    eprintln!("spearman (seed mean): {:.4}", summary.mean_spearman);
    eprintln!("results in {}", root.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub runs: usize,
    pub last: f64,
    pub average: f64,
    pub final_forgetting: Option<f64>,
}

/// Reads every completed `result.json` below `dir`, grouped by mode name.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut by_mode: BTreeMap<String, Vec<ResultRecord>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == RESULT_FILE)
        .map(|e| e.into_path())
        .collect();
    entries.sort();
    for path in entries {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: ResultRecord = serde_json::from_str(&text)?;
        if !record.completed {
            eprintln!("skipping incomplete run {}", path.display());
            continue;
        }
        by_mode.entry(record.mode.name().to_string()).or_default().push(record);
    }
    if by_mode.is_empty() {
        return Err(Error::invalid(format!("no results found under {}", dir.display())));
    }
    Ok(by_mode
        .into_iter()
        .map(|(mode, recs)| {
            let n = recs.len() as f64;
            let forgetting: Option<Vec<f64>> = recs.iter().map(|r| r.final_forgetting).collect();
            ReportRow {
                mode,
                runs: recs.len(),
                last: recs.iter().map(|r| r.last_accuracy).sum::<f64>() / n,
                average: recs.iter().map(|r| r.average_accuracy).sum::<f64>() / n,
                final_forgetting: forgetting.map(|f| f.iter().sum::<f64>() / n),
            }
        })
        .collect())
}

pub fn render_report(rows: &[ReportRow], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("mode,runs,last,average,final_forgetting\n");
            for r in rows {
                let f = r.final_forgetting.map_or(String::new(), |f| f.to_string());
                let _ = writeln!(out, "{},{},{},{},{f}", r.mode, r.runs, r.last, r.average);
            }
        }
        Format::Table => {
            let _ = writeln!(out, "{:<10} {:>5} {:>8} {:>8} {:>11}", "mode", "runs", "Last", "Average", "Forgetting");
            for r in rows {
                let f = r.final_forgetting.map_or("-".to_string(), |f| format!("{:.2}", 100.0 * f));
                let _ = writeln!(
                    out,
                    "{:<10} {:>5} {:>8.2} {:>8.2} {:>11}",
                    r.mode,
                    r.runs,
                    100.0 * r.last,
                    100.0 * r.average,
                    f
                );
            }
        }
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    if !args.dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", args.dir.display())));
    }
    Ok(render_report(&collect_report(&args.dir)?, args.format))
}
