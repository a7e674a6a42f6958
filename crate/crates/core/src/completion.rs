//! Modality completion with a Gaussian–Bernoulli restricted Boltzmann machine.
//!
//! The visible layer is the concatenation of every modality's feature row,
//! standardized per dimension so that a fixed unit visible variance is
//! appropriate. Energy (unit variance form):
//!
//! `E(v, h) = Σ_i (v_i - b_i)^2 / 2 - Σ_j c_j h_j - Σ_ij v_i W_ij h_j`
//!
//! Training uses k-step contrastive divergence; a missing modality is filled
//! by Gibbs sampling with the observed dimensions clamped.

use std::collections::BTreeSet;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, MultiModalDataset};
use crate::error::{MsmfError, Result};
use crate::numcore::{mix_seed, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub hidden_units: usize,
    pub cd_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gibbs_steps: usize,
    /// Number of trailing Gibbs sweeps averaged into the estimate.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            hidden_units: 32,
            cd_steps: 1,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            gibbs_steps: 20,
            n_samples: 10,
            seed: 42,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0
            || self.cd_steps == 0
            || self.batch_size == 0
            || self.gibbs_steps == 0
            || self.n_samples == 0
        {
            return Err(MsmfError::Config(
                "completion sizes and step counts must be positive".into(),
            ));
        }
        if self.n_samples > self.gibbs_steps {
            return Err(MsmfError::Config(format!(
                "n_samples ({}) cannot exceed gibbs_steps ({})",
                self.n_samples, self.gibbs_steps
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MsmfError::Config(format!(
                "completion learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub modality: Modality,
    pub offset: usize,
    pub len: usize,
}

impl LayoutEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Per-dimension affine map between raw features and the RBM's visible space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Column means and standard deviations; a constant column gets scale 1.
    pub fn fit(rows: &Tensor) -> Self {
        let (n, d) = rows.as_matrix_dims();
        let data = rows.data();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += data[r * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                let dev = data[r * d + j] - mean[j];
                var[j] += dev * dev;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn forward(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn inverse_at(&self, i: usize, v: f64) -> f64 {
        self.mean[i] + self.scale[i] * v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    /// `D × H` visible–hidden weights.
    pub weights: Tensor,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
    pub standardizer: Standardizer,
}

impl RbmParams {
    /// Zero-weight model over `layout`.
    pub fn zeros(layout: Vec<LayoutEntry>, hidden: usize) -> Result<Self> {
        let d = check_layout(&layout)?;
        Ok(RbmParams {
            weights: Tensor::zeros(&[d, hidden]),
            visible_bias: vec![0.0; d],
            hidden_bias: vec![0.0; hidden],
            layout,
            standardizer: Standardizer::identity(d),
        })
    }

    pub fn visible_dim(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_bias.len()
    }

    fn w(&self, i: usize, j: usize) -> f64 {
        self.weights.data()[i * self.hidden_dim() + j]
    }

    pub fn entry(&self, m: Modality) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.modality == m)
    }
}

/// Checks that the layout tiles `[0, D)` in order and returns `D`.
fn check_layout(layout: &[LayoutEntry]) -> Result<usize> {
    let mut next = 0;
    for e in layout {
        if e.offset != next || e.len == 0 {
            return Err(MsmfError::Contract(format!(
                "layout entry {:?} does not continue at offset {next}",
                e
            )));
        }
        next += e.len;
    }
    if next == 0 {
        return Err(MsmfError::Contract("empty visible layout".into()));
    }
    Ok(next)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Energy of a joint state in the standardized visible space.
pub fn rbm_energy(v: &[f64], h: &[f64], p: &RbmParams) -> Result<f64> {
    if v.len() != p.visible_dim() || h.len() != p.hidden_dim() {
        return Err(MsmfError::Dimension(format!(
            "energy: got v[{}], h[{}] for a {}x{} model",
            v.len(),
            h.len(),
            p.visible_dim(),
            p.hidden_dim()
        )));
    }
    if let Some(bad) = h.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(MsmfError::Contract(format!(
            "hidden state must be binary, found {bad}"
        )));
    }
    let quad: f64 = v
        .iter()
        .zip(&p.visible_bias)
        .map(|(vi, bi)| 0.5 * (vi - bi) * (vi - bi))
        .sum();
    let hid: f64 = h.iter().zip(&p.hidden_bias).map(|(hj, cj)| hj * cj).sum();
    let mut inter = 0.0;
    for (i, vi) in v.iter().enumerate() {
        for (j, hj) in h.iter().enumerate() {
            inter += vi * p.w(i, j) * hj;
        }
    }
    Ok(quad - hid - inter)
}

/// `P(h_j = 1 | v) = logistic(c_j + Σ_i v_i W_ij)`.
pub fn hidden_conditional(v: &[f64], p: &RbmParams) -> Result<Vec<f64>> {
    if v.len() != p.visible_dim() {
        return Err(MsmfError::Dimension(format!(
            "hidden_conditional: v has {} entries, model expects {}",
            v.len(),
            p.visible_dim()
        )));
    }
    Ok(hidden_activation(v, p).into_iter().map(logistic).collect())
}

fn hidden_activation(v: &[f64], p: &RbmParams) -> Vec<f64> {
    let h_dim = p.hidden_dim();
    let mut act = p.hidden_bias.clone();
    let w = p.weights.data();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (a, wij) in act.iter_mut().zip(&w[i * h_dim..(i + 1) * h_dim]) {
            *a += vi * wij;
        }
    }
    act
}

/// Mean of `v | h`, i.e. `b + W h`; the conditional is Normal with unit variance.
pub fn visible_conditional(h: &[f64], p: &RbmParams) -> Result<Vec<f64>> {
    if h.len() != p.hidden_dim() {
        return Err(MsmfError::Dimension(format!(
            "visible_conditional: h has {} entries, model expects {}",
            h.len(),
            p.hidden_dim()
        )));
    }
    Ok(visible_mean(h, p))
}

fn visible_mean(h: &[f64], p: &RbmParams) -> Vec<f64> {
    let h_dim = p.hidden_dim();
    let w = p.weights.data();
    p.visible_bias
        .iter()
        .enumerate()
        .map(|(i, bi)| {
            bi + w[i * h_dim..(i + 1) * h_dim]
                .iter()
                .zip(h)
                .map(|(wij, hj)| wij * hj)
                .sum::<f64>()
        })
        .collect()
}

fn sample_hidden(probs: &[f64], rng: &mut Rng) -> Vec<f64> {
    probs
        .iter()
        .map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 })
        .collect()
}

/// Mean squared one-step mean-field reconstruction error.
pub fn reconstruction_mse(rows: &[Vec<f64>], p: &RbmParams) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for v in rows {
        let ph: Vec<f64> = hidden_activation(v, p).into_iter().map(logistic).collect();
        let recon = visible_mean(&ph, p);
        total += v.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += v.len();
    }
    total / count as f64
}

#[derive(Clone, Debug)]
pub struct RbmTraining {
    pub params: RbmParams,
    /// Reconstruction MSE before training and after each epoch.
    pub recon_mse: Vec<f64>,
}

/// Fits the RBM by CD-k on fully-present rows (`N × D`, raw units).
pub fn train_cd(
    rows: &Tensor,
    layout: Vec<LayoutEntry>,
    cfg: &CompletionConfig,
) -> Result<RbmTraining> {
    cfg.validate()?;
    let d = check_layout(&layout)?;
    let (n, cols) = rows.as_matrix_dims();
    if rows.rank() != 2 || cols != d {
        return Err(MsmfError::Dimension(format!(
            "training rows {:?} do not match layout width {d}",
            rows.shape()
        )));
    }
    if n == 0 {
        return Err(MsmfError::Data("no fully-present rows to fit the RBM".into()));
    }
    let standardizer = Standardizer::fit(rows);
    let data: Vec<Vec<f64>> = (0..n)
        .map(|r| standardizer.forward(&rows.data()[r * d..(r + 1) * d]))
        .collect();

    let h_dim = cfg.hidden_units;
    let mut init = Rng::derived(cfg.seed, 0);
    let mut params = RbmParams {
        weights: init.normal_tensor(&[d, h_dim], 0.01),
        visible_bias: vec![0.0; d],
        hidden_bias: vec![0.0; h_dim],
        layout,
        standardizer,
    };
    let mut rng = Rng::derived(cfg.seed, 1);
    let mut history = vec![reconstruction_mse(&data, &params)];
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut dw = vec![0.0; d * h_dim];
            let mut db = vec![0.0; d];
            let mut dc = vec![0.0; h_dim];
            for &r in batch {
                let v0 = &data[r];
                let ph0: Vec<f64> = hidden_activation(v0, &params).into_iter().map(logistic).collect();
                let mut h = sample_hidden(&ph0, &mut rng);
                let mut vk = Vec::new();
                let mut phk = Vec::new();
                for step in 0..cfg.cd_steps {
                    vk = visible_mean(&h, &params);
                    phk = hidden_activation(&vk, &params).into_iter().map(logistic).collect();
                    if step + 1 < cfg.cd_steps {
                        h = sample_hidden(&phk, &mut rng);
                    }
                }
                for i in 0..d {
                    for j in 0..h_dim {
                        dw[i * h_dim + j] += v0[i] * ph0[j] - vk[i] * phk[j];
                    }
                    db[i] += v0[i] - vk[i];
                }
                for j in 0..h_dim {
                    dc[j] += ph0[j] - phk[j];
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            if step != 0.0 {
                for (w, g) in params.weights.data_mut().iter_mut().zip(&dw) {
                    *w += step * g;
                }
                for (b, g) in params.visible_bias.iter_mut().zip(&db) {
                    *b += step * g;
                }
                for (c, g) in params.hidden_bias.iter_mut().zip(&dc) {
                    *c += step * g;
                }
            }
        }
        history.push(reconstruction_mse(&data, &params));
    }
    Ok(RbmTraining {
        params,
        recon_mse: history,
    })
}

#[derive(Clone, Debug)]
pub struct CompletionTrace {
    /// Completed row in raw units.
    pub row: Vec<f64>,
    /// Joint energy after each Gibbs sweep.
    pub energies: Vec<f64>,
}

/// Fills the `missing` modalities of a raw row by clamped Gibbs sampling.
///
/// Missing visible units start at the visible bias; each sweep samples
/// `h | v` and then resamples only the missing units from `v | h`. The
/// estimate is the average of the missing units' conditional means over the
/// last `cfg.n_samples` sweeps. Observed entries are returned untouched.
pub fn complete_missing(
    row: &[f64],
    missing: &BTreeSet<Modality>,
    p: &RbmParams,
    cfg: &CompletionConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    complete_missing_traced(row, missing, p, cfg, seed).map(|t| t.row)
}

pub fn complete_missing_traced(
    row: &[f64],
    missing: &BTreeSet<Modality>,
    p: &RbmParams,
    cfg: &CompletionConfig,
    seed: u64,
) -> Result<CompletionTrace> {
    if row.len() != p.visible_dim() {
        return Err(MsmfError::Dimension(format!(
            "row has {} entries, model expects {}",
            row.len(),
            p.visible_dim()
        )));
    }
    if missing.is_empty() {
        return Ok(CompletionTrace {
            row: row.to_vec(),
            energies: Vec::new(),
        });
    }
    let mut missing_dims = Vec::new();
    for m in missing {
        let e = p
            .entry(*m)
            .ok_or_else(|| MsmfError::Contract(format!("{m} is not part of the RBM layout")))?;
        missing_dims.extend(e.range());
    }
    if missing_dims.len() == p.visible_dim() {
        return Err(MsmfError::Contract(
            "every modality is missing; nothing to condition on".into(),
        ));
    }
    let steps = cfg.gibbs_steps.max(1);
    let keep = cfg.n_samples.clamp(1, steps);

    let mut v = p.standardizer.forward(row);
    for &i in &missing_dims {
        v[i] = p.visible_bias[i];
    }
    let mut rng = Rng::new(seed);
    let mut acc = vec![0.0; missing_dims.len()];
    let mut energies = Vec::with_capacity(steps);
    for sweep in 0..steps {
        let ph: Vec<f64> = hidden_activation(&v, p).into_iter().map(logistic).collect();
        let h = sample_hidden(&ph, &mut rng);
        let mean = visible_mean(&h, p);
        let record = sweep >= steps - keep;
        for (k, &i) in missing_dims.iter().enumerate() {
            if record {
                acc[k] += mean[i];
            }
            v[i] = mean[i] + rng.normal();
        }
        energies.push(rbm_energy(&v, &h, p)?);
    }

    let mut out = row.to_vec();
    for (k, &i) in missing_dims.iter().enumerate() {
        out[i] = p.standardizer.inverse_at(i, acc[k] / keep as f64);
    }
    Ok(CompletionTrace { row: out, energies })
}

/// Discretized joint visible distribution, used as an exact oracle on tiny
/// models.
#[derive(Clone, Debug)]
pub struct GridDistribution {
    pub grid: Vec<Vec<f64>>,
    /// Row-major over the grid axes (first axis outermost); sums to 1.
    pub probs: Vec<f64>,
}

impl GridDistribution {
    /// `E[v_target | v_observed = grid[observed][at]]` for a 2-D grid.
    pub fn conditional_mean(&self, observed: usize, at: usize) -> f64 {
        assert_eq!(self.grid.len(), 2, "conditional_mean needs a 2-D grid");
        let target = 1 - observed;
        let n1 = self.grid[1].len();
        let (mut num, mut den) = (0.0, 0.0);
        for (k, &x) in self.grid[target].iter().enumerate() {
            let idx = if observed == 0 { at * n1 + k } else { k * n1 + at };
            num += x * self.probs[idx];
            den += self.probs[idx];
        }
        num / den
    }
}

pub const GRID_MAX_VISIBLE: usize = 2;
pub const GRID_MAX_HIDDEN: usize = 4;
pub const GRID_MAX_POINTS: usize = 41;

/// Sums `exp(-E(v, h))` over all `2^H` hidden states at each grid point of the
/// standardized visible space and normalizes over the grid.
pub fn brute_force_distribution(p: &RbmParams, grid: &[Vec<f64>]) -> Result<GridDistribution> {
    let d = p.visible_dim();
    let h_dim = p.hidden_dim();
    if d > GRID_MAX_VISIBLE || h_dim > GRID_MAX_HIDDEN {
        return Err(MsmfError::Resource(format!(
            "brute force supports D <= {GRID_MAX_VISIBLE}, H <= {GRID_MAX_HIDDEN}; got {d}x{h_dim}"
        )));
    }
    if grid.len() != d || grid.iter().any(|g| g.is_empty() || g.len() > GRID_MAX_POINTS) {
        return Err(MsmfError::Resource(format!(
            "grid needs {d} axes of 1..={GRID_MAX_POINTS} points"
        )));
    }
    let hidden_states: Vec<Vec<f64>> = (0..1usize << h_dim)
        .map(|bits| (0..h_dim).map(|j| ((bits >> j) & 1) as f64).collect())
        .collect();
    let total_points: usize = grid.iter().map(Vec::len).product();
    let mut v = vec![0.0; d];
    let mut log_weights = Vec::with_capacity(total_points);
    for flat in 0..total_points {
        let mut rem = flat;
        for axis in (0..d).rev() {
            let n = grid[axis].len();
            v[axis] = grid[axis][rem % n];
            rem /= n;
        }
        let energies: Vec<f64> = hidden_states
            .iter()
            .map(|h| rbm_energy(&v, h, p))
            .collect::<Result<_>>()?;
        let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let sum: f64 = energies.iter().map(|e| (min - e).exp()).sum();
        log_weights.push(sum.ln() - min);
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(GridDistribution {
        grid: grid.to_vec(),
        probs: unnorm.into_iter().map(|u| u / z).collect(),
    })
}

fn dataset_layout(ds: &MultiModalDataset) -> Vec<LayoutEntry> {
    let mut offset = 0;
    ds.streams
        .iter()
        .map(|(&m, s)| {
            let e = LayoutEntry {
                modality: m,
                offset,
                len: s.dim(),
            };
            offset += s.dim();
            e
        })
        .collect()
}

fn concatenated_row(ds: &MultiModalDataset, i: usize) -> Vec<f64> {
    ds.streams.values().flat_map(|s| s.row(i).iter().copied()).collect()
}

/// Fully-present concatenated rows within `rows`, with their layout.
pub fn completion_rows(ds: &MultiModalDataset, rows: Range<usize>) -> Result<(Tensor, Vec<LayoutEntry>)> {
    let layout = dataset_layout(ds);
    let d: usize = layout.iter().map(|e| e.len).sum();
    let mut data = Vec::new();
    for i in rows {
        if ds.streams.values().all(|s| s.present[i]) {
            data.extend(concatenated_row(ds, i));
        }
    }
    if data.is_empty() {
        return Err(MsmfError::Data(
            "no fully-present rows in the training range".into(),
        ));
    }
    let n = data.len() / d;
    Ok((Tensor::new(vec![n, d], data)?, layout))
}

/// Trains the completion model on the fully-present rows in `rows`.
pub fn fit_completion(
    ds: &MultiModalDataset,
    rows: Range<usize>,
    cfg: &CompletionConfig,
) -> Result<RbmTraining> {
    let (data, layout) = completion_rows(ds, rows)?;
    train_cd(&data, layout, cfg)
}

/// Completes every row with absent modalities and marks all rows present.
/// Rows where every modality is absent stay zero-filled.
pub fn complete_dataset(
    ds: &MultiModalDataset,
    p: &RbmParams,
    cfg: &CompletionConfig,
) -> Result<MultiModalDataset> {
    let layout = dataset_layout(ds);
    if layout != p.layout {
        return Err(MsmfError::Contract(
            "dataset modality layout does not match the RBM".into(),
        ));
    }
    let filled: Vec<Option<Vec<f64>>> = (0..ds.n_samples())
        .into_par_iter()
        .map(|i| {
            let missing: BTreeSet<Modality> = ds
                .streams
                .iter()
                .filter(|(_, s)| !s.present[i])
                .map(|(&m, _)| m)
                .collect();
            if missing.is_empty() || missing.len() == ds.streams.len() {
                return Ok(None);
            }
            let row = concatenated_row(ds, i);
            complete_missing(&row, &missing, p, cfg, mix_seed(cfg.seed, i as u64)).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut out = ds.clone();
    for (i, row) in filled.into_iter().enumerate() {
        if let Some(row) = row {
            for (e, s) in layout.iter().zip(out.streams.values_mut()) {
                let d = s.dim();
                s.features.data_mut()[i * d..(i + 1) * d].copy_from_slice(&row[e.range()]);
            }
        }
    }
    for s in out.streams.values_mut() {
        s.present.fill(true);
    }
    Ok(out)
}
