//! End-to-end runs: gap filling, chronological split, training, test
//! evaluation, and the model file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::completion::{complete_dataset, fit_completion, CompletionConfig, RbmParams};
use crate::data::{
    generate_synthetic, impute_baseline, load_csv_dataset, split_dataset, DatasetSplit, ImputeMethod,
    Modality, MultiModalDataset, SyntheticSpec,
};
use crate::error::{MsmfError, Result};
use crate::metrics::MetricsRecord;
use crate::model::{ModelConfig, MsmfModel, Samples};
use crate::params::NamedTensor;
use crate::training::{evaluate, train, LossConfig, TrainConfig, TrainHistory};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV directory; the synthetic generator is used when absent.
    pub csv: Option<PathBuf>,
    /// Window length applied when loading CSV data.
    pub window: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        DataConfig {
            csv: None,
            window: synthetic.window,
            synthetic,
        }
    }
}

/// Complete run configuration; every section falls back to its defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub completion: CompletionConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if self.data.window == 0 {
            return Err(MsmfError::Config("data.window must be positive".into()));
        }
        self.completion.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| MsmfError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| MsmfError::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Dataset named by the `data` section.
    pub fn load_data(&self) -> Result<MultiModalDataset> {
        match &self.data.csv {
            Some(dir) => load_csv_dataset(dir, self.data.window),
            None => generate_synthetic(&self.data.synthetic),
        }
    }
}

/// How absent modality rows are filled before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imputation {
    Rbm,
    Zero,
    Forward,
    Mean,
}

/// Gap-filled dataset split into train, validation and test windows.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub completion: Option<RbmParams>,
}

/// Fills gaps and splits. The completion model only sees rows touched by
/// training windows.
pub fn prepare_data(
    ds: &MultiModalDataset,
    run: &RunConfig,
    imputation: Imputation,
) -> Result<PreparedData> {
    let t = &run.train;
    let (filled, completion) = if ds.all_present() {
        (ds.clone(), None)
    } else {
        match imputation {
            Imputation::Rbm => {
                let raw = split_dataset(ds, t.train_fraction, t.val_fraction, t.seed)?;
                let rows = 0..raw.train_windows.end + ds.window - 1;
                let fitted = fit_completion(ds, rows, &run.completion)?;
                log::info!(
                    "completion model: reconstruction error {:.5} -> {:.5}",
                    fitted.recon_mse[0],
                    fitted.recon_mse[fitted.recon_mse.len() - 1]
                );
                let filled = complete_dataset(ds, &fitted.params, &run.completion)?;
                (filled, Some(fitted.params))
            }
            Imputation::Zero => (impute_baseline(ds, ImputeMethod::Zero), None),
            Imputation::Forward => (impute_baseline(ds, ImputeMethod::Forward), None),
            Imputation::Mean => (impute_baseline(ds, ImputeMethod::Mean), None),
        }
    };
    Ok(PreparedData {
        split: split_dataset(&filled, t.train_fraction, t.val_fraction, t.seed)?,
        completion,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: MsmfModel,
    pub history: TrainHistory,
    pub test_metrics: MetricsRecord,
}

/// Prepares data, trains a fresh model seeded by `run.train.seed` and
/// evaluates it on the test windows.
pub fn run_experiment(
    run: &RunConfig,
    ds: &MultiModalDataset,
    imputation: Imputation,
) -> Result<RunOutcome> {
    run.validate()?;
    let prepared = prepare_data(ds, run, imputation)?;
    let split = &prepared.split;
    let mut model = MsmfModel::for_dataset(run.model.clone(), &split.train, run.train.seed)?;
    model.completion = prepared.completion;
    let mods = model.modalities();
    let train_set = Samples::from_dataset(&split.train, &mods)?;
    let val_set = Samples::from_dataset(&split.val, &mods)?;
    let test_set = Samples::from_dataset(&split.test, &mods)?;
    let (model, history) = train(model, &train_set, &val_set, &run.loss, &run.train)?;
    let test_metrics = evaluate(&model, &test_set)?;
    Ok(RunOutcome {
        model,
        history,
        test_metrics,
    })
}

/// Test-window metrics for a trained model on `ds`, filling gaps with the
/// model's own completion stage.
pub fn evaluate_dataset(model: &MsmfModel, run: &RunConfig, ds: &MultiModalDataset) -> Result<MetricsRecord> {
    let filled = if ds.all_present() {
        ds.clone()
    } else {
        let rbm = model.completion.as_ref().ok_or_else(|| {
            MsmfError::Data("data has absent rows but the model carries no completion stage".into())
        })?;
        complete_dataset(ds, rbm, &run.completion)?
    };
    let t = &run.train;
    let split = split_dataset(&filled, t.train_fraction, t.val_fraction, t.seed)?;
    let test = Samples::from_dataset(&split.test, &model.modalities())?;
    evaluate(model, &test)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: RunConfig,
    dims: BTreeMap<Modality, usize>,
    parameters: Vec<NamedTensor>,
    completion: Option<RbmParams>,
}

pub fn model_to_json(model: &MsmfModel, run: &RunConfig) -> String {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config: RunConfig {
            model: model.config.clone(),
            ..run.clone()
        },
        dims: model.dims.clone(),
        parameters: model.params.to_named(),
        completion: model.completion.clone(),
    };
    serde_json::to_string_pretty(&file).expect("model serialises")
}

pub fn model_from_json(text: &str) -> Result<(MsmfModel, RunConfig)> {
    let file: ModelFile = serde_json::from_str(text)
        .map_err(|e| MsmfError::Data(format!("invalid model file: {e}")))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(MsmfError::Data(format!(
            "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let mut model = MsmfModel::new(file.config.model.clone(), &file.dims, file.config.train.seed)?;
    model.params.assign_from(file.parameters)?;
    model.completion = file.completion;
    Ok((model, file.config))
}

pub fn save_model(path: &Path, model: &MsmfModel, run: &RunConfig) -> Result<()> {
    fs::write(path, model_to_json(model, run)).map_err(|e| MsmfError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(MsmfModel, RunConfig)> {
    let text = fs::read_to_string(path).map_err(|e| MsmfError::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.data.synthetic.n_samples = 160;
        run.data.synthetic.window = 8;
        run.model.d_e = 4;
        run.model.d_a = 4;
        run.model.d_h = 6;
        run.model.coarse_window = 4;
        run.train.epochs = 2;
        run.train.batch_size = 16;
        run.completion.epochs = 3;
        run
    }

    #[test]
    fn default_config_round_trips_and_rejects_unknown_keys() {
        let run = RunConfig::default();
        assert_eq!(RunConfig::from_json(&run.to_json()).unwrap(), run);
        assert_eq!(RunConfig::from_json("{}").unwrap(), run);
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"d_e": 4, "depth": 2}}"#).unwrap_err(),
            MsmfError::Config(_)
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"fine_window": 4}}"#).unwrap_err(),
            MsmfError::Config(_)
        ));
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let mut run = small_run();
        run.data.synthetic.missing_rate.insert(Modality::Text, 0.2);
        let ds = run.load_data().unwrap();
        let out = run_experiment(&run, &ds, Imputation::Rbm).unwrap();
        assert!(out.model.completion.is_some());
        let text = model_to_json(&out.model, &run);
        let (back, cfg) = model_from_json(&text).unwrap();
        assert_eq!(cfg, run);
        assert_eq!(back.params, out.model.params);
        assert_eq!(back.completion, out.model.completion);
        assert_eq!(model_to_json(&back, &cfg), text);
        let again = evaluate_dataset(&back, &cfg, &ds).unwrap();
        assert_eq!(again, out.test_metrics);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let run = small_run();
        let ds = run.load_data().unwrap();
        let model = MsmfModel::for_dataset(run.model.clone(), &ds, 1).unwrap();
        let text = model_to_json(&model, &run).replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(model_from_json(&text).unwrap_err(), MsmfError::Data(_)));
    }

    #[test]
    fn without_gaps_all_imputations_agree() {
        let run = small_run();
        let ds = run.load_data().unwrap();
        let reference = run_experiment(&run, &ds, Imputation::Rbm).unwrap().test_metrics;
        for imp in [Imputation::Zero, Imputation::Forward, Imputation::Mean] {
            assert_eq!(run_experiment(&run, &ds, imp).unwrap().test_metrics, reference);
        }
    }
}
