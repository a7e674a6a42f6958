//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric or training error (including a failed gradient check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{emit_reports, run_named, ReportFormat, SuiteName};
use crate::data::{generate_synthetic, load_csv_dataset, write_csv_dataset, Modality, MultiModalDataset};
use crate::error::{MsmfError, Result};
use crate::experiment::{
    evaluate_dataset, load_model, run_experiment, save_model, Imputation, RunConfig,
};
use crate::model::{MsmfModel, Samples};
use crate::numcore::{check_gradients, GradCheckReport, DEFAULT_EPS};
use crate::training::batch_objective_graph;

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "msmf", version, about = "Multi-scale multi-modal multi-task stock prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run configuration; omit (or pass "default") for built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as CSV files.
    GenData {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Number of time steps.
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        /// Fraction of image and text rows marked absent.
        #[arg(long, value_name = "R")]
        missing_rate: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a model and write it with its history.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Model file to write.
        #[arg(long, value_name = "MODEL")]
        out: PathBuf,
    },
    /// Print test-split metrics of a trained model as JSON.
    Eval {
        /// Model file.
        #[arg(long, value_name = "MODEL")]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Compare the full objective's gradient with finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run an ablation suite and write the report.
    Ablate {
        /// encoder, completion, fusion, multitask, gates or all.
        #[arg(long, value_name = "NAME")]
        suite: String,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Compare gap-filling strategies and write the report.
    ImputeBench {
        #[command(flatten)]
        bench: BenchArgs,
    },
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Report file to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// md or csv.
    #[arg(long, default_value = "md")]
    format: String,
    /// Fraction of image and text rows marked absent when the data has no gaps.
    #[arg(long, default_value_t = 0.3, value_name = "R")]
    missing_rate: f64,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        None => Ok(RunConfig::default()),
        Some(p) if p.as_os_str() == "default" => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MsmfError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| MsmfError::io(path, e))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| MsmfError::Config(format!("seed '{t}' is not a non-negative integer")))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(MsmfError::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}

fn gap_rates(rate: f64) -> BTreeMap<Modality, f64> {
    [(Modality::Image, rate), (Modality::Text, rate)].into_iter().collect()
}

/// Full-objective gradient check on a model with every width capped at 8,
/// windows of 8 steps and a batch of 4 windows.
pub fn gradcheck_report(run: &RunConfig) -> Result<GradCheckReport> {
    let mut spec = run.data.synthetic.clone();
    spec.window = 8;
    spec.n_samples = 24;
    spec.missing_rate.clear();
    for d in spec.dims.values_mut() {
        *d = (*d).min(8);
    }
    let ds = generate_synthetic(&spec)?;
    let mut cfg = run.model.clone();
    cfg.d_e = cfg.d_e.min(8);
    cfg.d_a = cfg.d_a.min(8);
    cfg.d_h = cfg.d_h.min(8);
    cfg.experts = cfg.experts.min(8);
    cfg.coarse_window = cfg.coarse_window.min(8);
    if cfg.fine_window > 7 {
        cfg.fine_window = 7;
    }
    let model = MsmfModel::for_dataset(cfg, &ds, run.train.seed)?;
    let batch = Samples::from_dataset(&ds, &model.modalities())?.subset(0..4);
    check_gradients(
        |g, p| batch_objective_graph(g, p, &model, &batch, &run.loss),
        &model.params.tensors(),
        DEFAULT_EPS,
        GRADCHECK_TOLERANCE,
    )
}

fn load_dataset(dir: &Path, run: &RunConfig) -> Result<MultiModalDataset> {
    load_csv_dataset(dir, run.data.window)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData {
            out,
            seed,
            samples,
            missing_rate,
            config,
        } => {
            let mut run = load_config(&config)?;
            run.data.synthetic.seed = seed;
            if let Some(n) = samples {
                run.data.synthetic.n_samples = n;
            }
            if let Some(r) = missing_rate {
                run.data.synthetic.missing_rate = gap_rates(r);
            }
            run.validate()?;
            let ds = generate_synthetic(&run.data.synthetic)?;
            write_csv_dataset(&ds, &out)?;
            write_file(&out.join("config.json"), &run.to_json())?;
            println!(
                "wrote {} rows ({} windows) to {}",
                ds.n_samples(),
                ds.n_windows(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let run = load_config(&config)?;
            let ds = load_dataset(&data, &run)?;
            let outcome = run_experiment(&run, &ds, Imputation::Rbm)?;
            save_model(&out, &outcome.model, &run)?;
            write_file(&sibling(&out, ".history.csv"), &outcome.history.to_csv())?;
            write_file(&sibling(&out, ".config.json"), &run.to_json())?;
            println!(
                "train loss {:.6} -> {:.6}; best epoch {}; test accuracy {:.4}",
                outcome.history.initial_train_loss,
                outcome.history.final_train_loss,
                outcome.history.best_epoch,
                outcome.test_metrics.accuracy
            );
        }
        Command::Eval { model, data } => {
            let (m, run) = load_model(&model)?;
            let ds = load_dataset(&data, &run)?;
            let metrics = evaluate_dataset(&m, &run, &ds)?;
            println!("{}", serde_json::to_string(&metrics.summary())?);
        }
        Command::Gradcheck { config } => {
            let run = load_config(&config)?;
            let report = gradcheck_report(&run)?;
            println!(
                "max relative error {:e} over {} coordinates",
                report.max_relative_error, report.coordinates
            );
            if !report.passed {
                eprintln!(
                    "gradient check failed: parameter {} coordinate {} analytic {:e} numeric {:e}",
                    report.worst.0, report.worst.1, report.analytic, report.numeric
                );
                return Ok(3);
            }
        }
        Command::Ablate { suite, bench } => {
            let name = SuiteName::parse(&suite)
                .ok_or_else(|| MsmfError::Config(format!("unknown suite '{suite}'")))?;
            run_bench(name, &bench)?;
        }
        Command::ImputeBench { bench } => run_bench(SuiteName::Completion, &bench)?,
    }
    Ok(0)
}

fn run_bench(name: SuiteName, args: &BenchArgs) -> Result<()> {
    let run = load_config(&args.config)?;
    let format = ReportFormat::parse(&args.format)
        .ok_or_else(|| MsmfError::Config(format!("unknown format '{}'", args.format)))?;
    let seeds = parse_seeds(&args.seeds)?;
    if !(0.0..1.0).contains(&args.missing_rate) {
        return Err(MsmfError::Config(format!(
            "missing rate {} must lie in [0, 1)",
            args.missing_rate
        )));
    }
    let ds = load_dataset(&args.data, &run)?;
    let rates = if ds.all_present() {
        gap_rates(args.missing_rate)
    } else {
        BTreeMap::new()
    };
    let tables = run_named(name, &run, &ds, &seeds, &rates)?;
    write_file(&args.out, &emit_reports(&tables, format))?;
    write_file(&sibling(&args.out, ".config.json"), &run.to_json())?;
    println!("wrote {} table(s) to {}", tables.len(), args.out.display());
    Ok(())
}

/// Sizes the worker pool from `MSMF_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MSMF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| MsmfError::Config(format!("MSMF_THREADS must be a positive integer, got '{raw}'")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| execute(cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
