//! Ablation harness and paper-style report tables.
//!
//! Each suite trains the reference model and a set of variants for every
//! seed, evaluates on the test windows and reports the per-variant median.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::{simulate_missing, Modality, MultiModalDataset};
use crate::encoder::ScaleMode;
use crate::error::{MsmfError, Result};
use crate::experiment::{run_experiment, Imputation, RunConfig};
use crate::fusion::FusionMode;
use crate::metrics::MetricsRecord;
use crate::multitask::Task;
use crate::numcore::mix_seed;

pub const COLUMNS: [&str; 5] = ["Method", "Accuracy (%)", "F1 Score (%)", "MAPE", "RMSE"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteName {
    Encoder,
    Completion,
    Fusion,
    Multitask,
    Gates,
    All,
}

impl SuiteName {
    pub const SINGLE: [SuiteName; 5] = [
        SuiteName::Encoder,
        SuiteName::Completion,
        SuiteName::Fusion,
        SuiteName::Multitask,
        SuiteName::Gates,
    ];

    pub fn parse(s: &str) -> Option<SuiteName> {
        match s {
            "encoder" => Some(SuiteName::Encoder),
            "completion" => Some(SuiteName::Completion),
            "fusion" => Some(SuiteName::Fusion),
            "multitask" => Some(SuiteName::Multitask),
            "gates" => Some(SuiteName::Gates),
            "all" => Some(SuiteName::All),
            _ => None,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SuiteName::Encoder => "Performance on Multi-grained Encoder",
            SuiteName::Completion => "Performance on Modality Completion",
            SuiteName::Fusion => "Performance on Multi-modal Fusion",
            SuiteName::Multitask => "Performance on Multi-task Learning",
            SuiteName::Gates => "Performance on Multi-Granularity Gates",
            SuiteName::All => "All ablations",
        }
    }
}

impl fmt::Display for SuiteName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SuiteName::Encoder => "encoder",
            SuiteName::Completion => "completion",
            SuiteName::Fusion => "fusion",
            SuiteName::Multitask => "multitask",
            SuiteName::Gates => "gates",
            SuiteName::All => "all",
        };
        f.write_str(s)
    }
}

/// A change applied to the base configuration for one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Reference,
    SingleScale { modality: Modality, scale: ScaleMode },
    Fusion(FusionMode),
    /// Train with the other task's weight set to zero.
    SingleTask(Task),
    SharedGate,
    Impute(Imputation),
    /// Train on one fully-present modality alone.
    SingleModal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub change: Change,
}

impl Variant {
    fn new(label: impl Into<String>, change: Change) -> Variant {
        Variant {
            label: label.into(),
            change,
        }
    }

    /// Metric cells that the variant does not train for.
    fn blank_cells(&self) -> [bool; 4] {
        match self.change {
            Change::SingleTask(Task::Return) => [true, true, false, false],
            Change::SingleTask(Task::Movement) => [false, false, true, true],
            _ => [false; 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSuite {
    pub name: SuiteName,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationSuite {
    /// The standard variants for a single suite, reference last.
    pub fn standard(name: SuiteName, seeds: &[u64]) -> Result<AblationSuite> {
        let variants = match name {
            SuiteName::Encoder => {
                let mut v: Vec<Variant> = Modality::ALL
                    .iter()
                    .map(|&m| {
                        Variant::new(
                            format!("{} (Single-scale)", m.display_name()),
                            Change::SingleScale {
                                modality: m,
                                scale: ScaleMode::FineOnly,
                            },
                        )
                    })
                    .collect();
                v.push(Variant::new("MSMF", Change::Reference));
                v
            }
            SuiteName::Completion => vec![
                Variant::new("Single modal data", Change::SingleModal),
                Variant::new("Multimodal data(Zero Filling)", Change::Impute(Imputation::Zero)),
                Variant::new("Multimodal data(Forward Filling)", Change::Impute(Imputation::Forward)),
                Variant::new("Multimodal data(Mean Inputation)", Change::Impute(Imputation::Mean)),
                Variant::new("MSMF", Change::Reference),
            ],
            SuiteName::Fusion => vec![
                Variant::new("Feature stack", Change::Fusion(FusionMode::Stack)),
                Variant::new("Feature concatenate", Change::Fusion(FusionMode::Concat)),
                Variant::new("MSMF", Change::Reference),
            ],
            SuiteName::Multitask => vec![
                Variant::new("Stock Return", Change::SingleTask(Task::Return)),
                Variant::new("Stock Movement", Change::SingleTask(Task::Movement)),
                Variant::new("Multi-task", Change::Reference),
            ],
            SuiteName::Gates => vec![
                Variant::new("Without (MG Gates)", Change::SharedGate),
                Variant::new("With (MG Gates)", Change::Reference),
            ],
            SuiteName::All => {
                return Err(MsmfError::Config(
                    "the 'all' suite expands into the individual suites".into(),
                ))
            }
        };
        let suite = AblationSuite {
            name,
            variants,
            seeds: seeds.to_vec(),
        };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(MsmfError::Config(format!(
                "suite {} needs at least one variant and one seed",
                self.name
            )));
        }
        if !self.variants.iter().any(|v| v.change == Change::Reference) {
            return Err(MsmfError::Config(format!(
                "suite {} has no reference variant",
                self.name
            )));
        }
        Ok(())
    }
}

/// One report row. Cells are accuracy, F1 (fractions), MAPE and RMSE;
/// `None` renders as "-".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub cells: [Option<f64>; 4],
    /// Reason the row could not be produced.
    pub failed: Option<String>,
}

impl ReportRow {
    pub fn from_metrics(label: impl Into<String>, m: &MetricsRecord) -> ReportRow {
        ReportRow {
            label: label.into(),
            cells: [Some(m.accuracy), Some(m.f1), Some(m.mape), Some(m.rmse)],
            failed: None,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.cells[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(title: impl Into<String>) -> ReportTable {
        ReportTable {
            title: title.into(),
            columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.label.as_str()).collect()
    }
}

/// Median of the values; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Modality with the largest present fraction, preferring time series on ties.
fn most_present(ds: &MultiModalDataset) -> Modality {
    let mut best = None;
    for (m, s) in &ds.streams {
        let c = s.present_count();
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((*m, c));
        }
    }
    best.expect("dataset has streams").0
}

/// Configuration, dataset and gap filling for one cell.
fn cell_setup(
    change: &Change,
    base: &RunConfig,
    ds: &MultiModalDataset,
    seed: u64,
) -> Result<(RunConfig, MultiModalDataset, Imputation)> {
    let mut run = base.clone();
    run.train.seed = seed;
    let mut data = ds.clone();
    let mut imputation = Imputation::Rbm;
    match change {
        Change::Reference => {}
        Change::SingleScale { modality, scale } => {
            run.model.scale.insert(*modality, *scale);
        }
        Change::Fusion(mode) => run.model.fusion = *mode,
        Change::SingleTask(keep) => {
            for t in Task::ALL {
                if t != *keep {
                    run.loss.alpha.insert(t, 0.0);
                }
            }
        }
        Change::SharedGate => run.model.mg_gates = false,
        Change::Impute(method) => imputation = *method,
        Change::SingleModal => {
            let m = most_present(ds);
            data = ds.restrict(&[m])?;
            run.model.modalities = Some(vec![m]);
        }
    }
    Ok((run, data, imputation))
}

/// Memoises cell results across suites that share the reference run.
#[derive(Default)]
pub struct CellCache {
    results: HashMap<String, std::result::Result<MetricsRecord, String>>,
}

impl CellCache {
    fn run(
        &mut self,
        dataset_key: &str,
        change: &Change,
        base: &RunConfig,
        ds: &MultiModalDataset,
        seed: u64,
    ) -> Result<std::result::Result<MetricsRecord, String>> {
        let (run, data, imputation) = cell_setup(change, base, ds, seed)?;
        let key = format!(
            "{dataset_key}|{imputation:?}|{}|{:?}",
            serde_json::to_string(&run)?,
            data.modalities()
        );
        if let Some(r) = self.results.get(&key) {
            return Ok(r.clone());
        }
        let outcome = match run_experiment(&run, &data, imputation) {
            Ok(o) => Ok(o.test_metrics),
            Err(e @ (MsmfError::Training { .. } | MsmfError::Numeric(_))) => {
                log::warn!("cell ({change:?}, seed {seed}) failed: {e}");
                Err(e.to_string())
            }
            Err(e) => return Err(e),
        };
        self.results.insert(key, outcome.clone());
        Ok(outcome)
    }
}

fn run_suite_cached(
    suite: &AblationSuite,
    base: &RunConfig,
    ds: &MultiModalDataset,
    dataset_key: &str,
    cache: &mut CellCache,
) -> Result<ReportTable> {
    suite.validate()?;
    let mut table = ReportTable::new(suite.name.title());
    for variant in &suite.variants {
        let mut records = Vec::new();
        let mut failure = None;
        for &seed in &suite.seeds {
            log::info!("suite {}: {} seed {seed}", suite.name, variant.label);
            match cache.run(dataset_key, &variant.change, base, ds, seed)? {
                Ok(m) => records.push(m),
                Err(reason) => {
                    failure = Some(format!("seed {seed}: {reason}"));
                    break;
                }
            }
        }
        let row = match failure {
            Some(reason) => ReportRow {
                label: variant.label.clone(),
                cells: [None; 4],
                failed: Some(reason),
            },
            None => {
                let blank = variant.blank_cells();
                let pick: [fn(&MetricsRecord) -> f64; 4] =
                    [|m| m.accuracy, |m| m.f1, |m| m.mape, |m| m.rmse];
                let mut cells = [None; 4];
                for j in 0..4 {
                    if !blank[j] {
                        let vals: Vec<f64> = records.iter().map(pick[j]).collect();
                        cells[j] = median(&vals);
                    }
                }
                ReportRow {
                    label: variant.label.clone(),
                    cells,
                    failed: None,
                }
            }
        };
        table.rows.push(row);
    }
    Ok(table)
}

/// Runs one suite; the variants are trained on `ds` as given.
pub fn run_ablation(suite: &AblationSuite, base: &RunConfig, ds: &MultiModalDataset) -> Result<ReportTable> {
    run_suite_cached(suite, base, ds, "base", &mut CellCache::default())
}

/// Applies the missing-row rates (if any) and runs the completion suite.
pub fn run_imputation_bench(
    base: &RunConfig,
    ds: &MultiModalDataset,
    missing_rates: &BTreeMap<Modality, f64>,
    seeds: &[u64],
) -> Result<ReportTable> {
    run_imputation_cached(base, ds, missing_rates, seeds, &mut CellCache::default())
}

fn with_missing(
    base: &RunConfig,
    ds: &MultiModalDataset,
    missing_rates: &BTreeMap<Modality, f64>,
) -> Result<MultiModalDataset> {
    if missing_rates.values().all(|&r| r == 0.0) {
        return Ok(ds.clone());
    }
    simulate_missing(ds, missing_rates, mix_seed(base.data.synthetic.seed, 0x6d69_7373))
}

fn run_imputation_cached(
    base: &RunConfig,
    ds: &MultiModalDataset,
    missing_rates: &BTreeMap<Modality, f64>,
    seeds: &[u64],
    cache: &mut CellCache,
) -> Result<ReportTable> {
    let gappy = with_missing(base, ds, missing_rates)?;
    let suite = AblationSuite::standard(SuiteName::Completion, seeds)?;
    let key = format!("missing{}", serde_json::to_string(missing_rates)?);
    run_suite_cached(&suite, base, &gappy, &key, cache)
}

/// Runs the named suite (`all` expands to every suite) and returns one table
/// per suite. The completion suite applies `missing_rates` first.
pub fn run_named(
    name: SuiteName,
    base: &RunConfig,
    ds: &MultiModalDataset,
    seeds: &[u64],
    missing_rates: &BTreeMap<Modality, f64>,
) -> Result<Vec<ReportTable>> {
    let names: Vec<SuiteName> = if name == SuiteName::All {
        SuiteName::SINGLE.to_vec()
    } else {
        vec![name]
    };
    let mut cache = CellCache::default();
    names
        .into_iter()
        .map(|n| match n {
            SuiteName::Completion => run_imputation_cached(base, ds, missing_rates, seeds, &mut cache),
            _ => run_suite_cached(&AblationSuite::standard(n, seeds)?, base, ds, "base", &mut cache),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "md" | "markdown" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

fn render_cells(row: &ReportRow) -> Vec<String> {
    let mut out = vec![row.label.clone()];
    for (j, c) in row.cells.iter().enumerate() {
        out.push(match (&row.failed, c) {
            (Some(_), _) => "failed".to_string(),
            (None, None) => "-".to_string(),
            (None, Some(v)) if j < 2 => format!("{:.2}", v * 100.0),
            (None, Some(v)) => format!("{v:.4}"),
        });
    }
    out
}

pub fn emit_report(table: &ReportTable, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = format!("### {}\n\n", table.title);
            let _ = writeln!(out, "| {} |", table.columns.join(" | "));
            let sep: Vec<&str> = (0..table.columns.len())
                .map(|j| if j == 0 { "---" } else { "---:" })
                .collect();
            let _ = writeln!(out, "| {} |", sep.join(" | "));
            for row in &table.rows {
                let _ = writeln!(out, "| {} |", render_cells(row).join(" | "));
            }
            out
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
            w.write_record(&table.columns).expect("in-memory write");
            for row in &table.rows {
                w.write_record(render_cells(row)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
        }
    }
}

/// Renders several tables separated by blank lines.
pub fn emit_reports(tables: &[ReportTable], format: ReportFormat) -> String {
    tables
        .iter()
        .map(|t| emit_report(t, format))
        .collect::<Vec<_>>()
        .join("\n")
}
