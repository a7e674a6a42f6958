//! Multi-modal datasets: per-modality feature streams with presence masks,
//! plus the return and movement labels of every prediction window.

mod csv_io;
mod missing;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};
use crate::numcore::Tensor;

pub use csv_io::{load_csv_dataset, write_csv_dataset};
pub use missing::{impute_baseline, simulate_missing, ImputeMethod};
pub use split::{split_dataset, DatasetSplit};
pub use synthetic::{generate_synthetic, generate_synthetic_with_latents, Latents, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[serde(rename = "timeseries")]
    TimeSeries,
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::TimeSeries, Modality::Image, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::TimeSeries => "timeseries",
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    /// Label used in report rows.
    pub fn display_name(self) -> &'static str {
        match self {
            Modality::TimeSeries => "Time Series",
            Modality::Image => "Image",
            Modality::Text => "Text",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    /// `N × d_m`; absent rows are all zeros.
    pub features: Tensor,
    pub present: Vec<bool>,
}

impl ModalityStream {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalDataset {
    pub timestamps: Vec<i64>,
    pub streams: BTreeMap<Modality, ModalityStream>,
    /// Samples per prediction window.
    pub window: usize,
    /// One return per window; window `i` covers rows `[i, i + window)`.
    pub returns: Vec<f64>,
    /// `1` (up) iff the matching return is positive.
    pub movements: Vec<u8>,
}

impl MultiModalDataset {
    pub fn n_samples(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_windows(&self) -> usize {
        self.returns.len()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.streams.keys().copied().collect()
    }

    pub fn stream(&self, m: Modality) -> Result<&ModalityStream> {
        self.streams
            .get(&m)
            .ok_or_else(|| MsmfError::Data(format!("dataset has no {m} stream")))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        if self.window == 0 || n < self.window {
            return Err(MsmfError::Data(format!(
                "{n} samples cannot hold a window of {}",
                self.window
            )));
        }
        if self.streams.is_empty() {
            return Err(MsmfError::Data("dataset has no modality streams".into()));
        }
        for (m, s) in &self.streams {
            if s.modality != *m || s.features.shape()[0] != n || s.present.len() != n {
                return Err(MsmfError::Data(format!(
                    "{m} stream does not cover {n} samples"
                )));
            }
        }
        let n_w = n - self.window + 1;
        if self.returns.len() != n_w || self.movements.len() != n_w {
            return Err(MsmfError::Data(format!(
                "expected {n_w} window labels, found {} returns and {} movements",
                self.returns.len(),
                self.movements.len()
            )));
        }
        if let Some(bad) = self.movements.iter().find(|&&v| v > 1) {
            return Err(MsmfError::Data(format!("movement label {bad} is not 0 or 1")));
        }
        Ok(())
    }

    /// `window × d_m` slice of one modality for window `i`.
    pub fn window_features(&self, m: Modality, i: usize) -> Result<Tensor> {
        let s = self.stream(m)?;
        let d = s.dim();
        let rows = &s.features.data()[i * d..(i + self.window) * d];
        Tensor::new(vec![self.window, d], rows.to_vec())
    }

    /// Windows `[start, end)` together with the rows they touch.
    pub fn window_range(&self, start: usize, end: usize) -> Result<MultiModalDataset> {
        if start >= end || end > self.n_windows() {
            return Err(MsmfError::Config(format!(
                "window range [{start}, {end}) outside [0, {})",
                self.n_windows()
            )));
        }
        let row_end = end + self.window - 1;
        let streams = self
            .streams
            .iter()
            .map(|(&m, s)| {
                let d = s.dim();
                let feats = s.features.data()[start * d..row_end * d].to_vec();
                let stream = ModalityStream {
                    modality: m,
                    features: Tensor::new(vec![row_end - start, d], feats)
                        .expect("row range is non-empty"),
                    present: s.present[start..row_end].to_vec(),
                };
                (m, stream)
            })
            .collect();
        Ok(MultiModalDataset {
            timestamps: self.timestamps[start..row_end].to_vec(),
            streams,
            window: self.window,
            returns: self.returns[start..end].to_vec(),
            movements: self.movements[start..end].to_vec(),
        })
    }

    /// Keeps only the listed modalities.
    pub fn restrict(&self, keep: &[Modality]) -> Result<MultiModalDataset> {
        let mut out = self.clone();
        out.streams.retain(|m, _| keep.contains(m));
        if out.streams.len() != keep.len() {
            return Err(MsmfError::Data(format!(
                "cannot restrict to {keep:?}: dataset has {:?}",
                self.modalities()
            )));
        }
        Ok(out)
    }

    pub fn all_present(&self) -> bool {
        self.streams.values().all(|s| s.present.iter().all(|&p| p))
    }
}
