//! The full predictor: per-modality encoders, fusion, gated experts and heads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::completion::RbmParams;
use crate::data::{Modality, MultiModalDataset};
use crate::encoder::{encode_modality, EncoderParams, ModalityFeatures, ScaleMode};
use crate::error::{MsmfError, Result};
use crate::fusion::{fuse_features, retained_count, FusionMode, FusionOutput, FusionParams};
use crate::multitask::{
    expert_outputs, mix_experts, multi_granularity_gate, task_gate, ttpl_predict, GranularityOutput,
    MultitaskParams, Task, TaskPrediction,
};
use crate::numcore::{Graph, Rng, Tensor, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_e: usize,
    pub d_a: usize,
    pub d_h: usize,
    pub experts: usize,
    /// Fraction of aligned entries kept by the blank mask.
    pub rho: f64,
    pub fine_window: usize,
    pub coarse_window: usize,
    pub mg_gates: bool,
    pub fusion: FusionMode,
    /// Per-modality scale override; unlisted modalities use both scales.
    pub scale: BTreeMap<Modality, ScaleMode>,
    /// Modalities fed to the model; `None` uses every dataset stream.
    pub modalities: Option<Vec<Modality>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 16,
            d_a: 16,
            d_h: 32,
            experts: 4,
            rho: 0.5,
            fine_window: 3,
            coarse_window: 8,
            mg_gates: true,
            fusion: FusionMode::MsaBl,
            scale: BTreeMap::new(),
            modalities: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_a == 0 || self.d_h == 0 || self.experts == 0 {
            return Err(MsmfError::Config("model widths and expert count must be positive".into()));
        }
        if self.fine_window % 2 == 0 {
            return Err(MsmfError::Config(format!(
                "fine_window must be odd, got {}",
                self.fine_window
            )));
        }
        if self.coarse_window < 2 {
            return Err(MsmfError::Config(format!(
                "coarse_window must be at least 2, got {}",
                self.coarse_window
            )));
        }
        retained_count(self.rho, 1)?;
        if let Some(m) = &self.modalities {
            if m.is_empty() {
                return Err(MsmfError::Config("model modality list is empty".into()));
            }
        }
        Ok(())
    }

    pub fn scale_for(&self, m: Modality) -> ScaleMode {
        self.scale.get(&m).copied().unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct MsmfModel {
    pub config: ModelConfig,
    /// Input width per modality.
    pub dims: BTreeMap<Modality, usize>,
    pub params: ParamSet,
    pub encoders: Vec<EncoderParams>,
    pub fusion: FusionParams,
    pub multitask: MultitaskParams,
    /// Completion model fitted before training, if the data had gaps.
    pub completion: Option<RbmParams>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: BTreeMap<Modality, ModalityFeatures>,
    pub fusion: FusionOutput,
    /// Per task; empty when multi-granularity gates are off.
    pub granularity: Vec<GranularityOutput>,
    /// Expert weights per task (identical handles when the gate is shared).
    pub gates: Vec<Var>,
    /// `1 × 1`.
    pub return_hat: Var,
    /// `1 × 2`.
    pub movement_probs: Var,
}

impl MsmfModel {
    /// Builds a freshly initialised model for streams of the given widths.
    pub fn new(config: ModelConfig, dims: &BTreeMap<Modality, usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let modalities: Vec<Modality> = match &config.modalities {
            Some(list) => {
                let mut l = list.clone();
                l.sort();
                l.dedup();
                l
            }
            None => dims.keys().copied().collect(),
        };
        let mut used = BTreeMap::new();
        for m in &modalities {
            let d = *dims
                .get(m)
                .ok_or_else(|| MsmfError::Config(format!("model uses {m}, which the data lacks")))?;
            used.insert(*m, d);
        }
        let mut set = ParamSet::new();
        let mut rng = Rng::derived(seed, 7);
        let encoders = used
            .iter()
            .map(|(&m, &d)| {
                EncoderParams::init(
                    &mut set,
                    &mut rng,
                    m,
                    d,
                    config.d_e,
                    config.fine_window,
                    config.coarse_window,
                    config.scale_for(m),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionParams::init(
            &mut set,
            &mut rng,
            &modalities,
            config.d_e,
            config.d_a,
            config.rho,
            config.fusion,
        )?;
        let multitask = MultitaskParams::init(
            &mut set,
            &mut rng,
            &modalities,
            config.d_e,
            config.d_a,
            config.d_h,
            config.experts,
            config.mg_gates,
        )?;
        Ok(MsmfModel {
            config,
            dims: used,
            params: set,
            encoders,
            fusion,
            multitask,
            completion: None,
        })
    }

    /// Builds a model shaped for `ds`.
    pub fn for_dataset(config: ModelConfig, ds: &MultiModalDataset, seed: u64) -> Result<Self> {
        let dims = ds.streams.iter().map(|(&m, s)| (m, s.dim())).collect();
        MsmfModel::new(config, &dims, seed)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.dims.keys().copied().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward computation for one window. `p` must come from
    /// binding `self.params` into `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        windows: &BTreeMap<Modality, Tensor>,
    ) -> Result<ForwardOutput> {
        let mut features = BTreeMap::new();
        for enc in &self.encoders {
            let x = windows.get(&enc.modality).ok_or_else(|| {
                MsmfError::Contract(format!(
                    "{} window is missing; completion must run first",
                    enc.modality
                ))
            })?;
            if x.shape().len() != 2 || x.shape()[1] != enc.d_in {
                return Err(MsmfError::Dimension(format!(
                    "{} window has shape {:?}, expected T x {}",
                    enc.modality,
                    x.shape(),
                    enc.d_in
                )));
            }
            let xv = g.constant(x.clone());
            features.insert(enc.modality, encode_modality(g, p, enc, xv)?);
        }
        let fusion = fuse_features(g, p, &self.fusion, &features)?;
        let mt = &self.multitask;
        let outputs = expert_outputs(g, p, mt, fusion.x_all)?;
        let mut granularity = Vec::new();
        let mut gates = Vec::new();
        let mut heads = Vec::new();
        let shared = if mt.mg_gates {
            None
        } else {
            Some(task_gate(g, p, mt, fusion.x_all, None, Task::Return)?)
        };
        for t in Task::ALL {
            let gate = match shared {
                Some(s) => s,
                None => {
                    let gr = multi_granularity_gate(g, p, mt, &features, fusion.stack, t)?;
                    let gate = task_gate(g, p, mt, fusion.x_all, Some(gr.context), t)?;
                    granularity.push(gr);
                    gate
                }
            };
            let h = mix_experts(g, gate, outputs)?;
            heads.push(ttpl_predict(g, p, mt, h, &features, t)?);
            gates.push(gate);
        }
        Ok(ForwardOutput {
            features,
            fusion,
            granularity,
            gates,
            return_hat: heads[0],
            movement_probs: heads[1],
        })
    }

    pub fn predict(&self, windows: &BTreeMap<Modality, Tensor>) -> Result<TaskPrediction> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g);
        let out = self.forward_graph(&mut g, &p, windows)?;
        let probs = g.value(out.movement_probs).data();
        Ok(TaskPrediction {
            return_hat: g.scalar_value(out.return_hat),
            movement_probs: [probs[0], probs[1]],
        })
    }
}

/// Window inputs and labels prepared for the model.
#[derive(Clone, Debug)]
pub struct Samples {
    pub windows: Vec<BTreeMap<Modality, Tensor>>,
    pub returns: Vec<f64>,
    pub movements: Vec<u8>,
}

impl Samples {
    /// Extracts every window of `ds` for the listed modalities.
    pub fn from_dataset(ds: &MultiModalDataset, modalities: &[Modality]) -> Result<Samples> {
        if !ds.all_present() {
            return Err(MsmfError::Contract(
                "dataset still has absent rows; apply completion or imputation first".into(),
            ));
        }
        let windows = (0..ds.n_windows())
            .map(|i| {
                modalities
                    .iter()
                    .map(|&m| Ok((m, ds.window_features(m, i)?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples {
            windows,
            returns: ds.returns.clone(),
            movements: ds.movements.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Samples {
        Samples {
            windows: self.windows[range.clone()].to_vec(),
            returns: self.returns[range.clone()].to_vec(),
            movements: self.movements[range].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::numcore::gradient;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_e: 4,
            d_a: 4,
            d_h: 6,
            experts: 3,
            coarse_window: 4,
            ..Default::default()
        }
    }

    fn small_data() -> MultiModalDataset {
        generate_synthetic(&SyntheticSpec {
            n_samples: 40,
            dims: Modality::ALL.iter().map(|&m| (m, 3)).collect(),
            window: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic_with_fixed_arities() {
        let ds = small_data();
        let model = MsmfModel::for_dataset(small_config(), &ds, 1).unwrap();
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        let a = model.predict(&s.windows[0]).unwrap();
        let b = model.predict(&s.windows[0]).unwrap();
        assert_eq!(a, b);
        assert!((a.movement_probs[0] + a.movement_probs[1] - 1.0).abs() < 1e-12);
        assert!(a.return_hat.is_finite());
    }

    #[test]
    fn same_seed_same_parameters() {
        let ds = small_data();
        let a = MsmfModel::for_dataset(small_config(), &ds, 3).unwrap();
        let b = MsmfModel::for_dataset(small_config(), &ds, 3).unwrap();
        let c = MsmfModel::for_dataset(small_config(), &ds, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn single_scale_variants_keep_parameter_count() {
        let ds = small_data();
        let full = MsmfModel::for_dataset(small_config(), &ds, 1).unwrap().parameter_count();
        for m in Modality::ALL {
            for mode in [ScaleMode::FineOnly, ScaleMode::CoarseOnly] {
                let mut cfg = small_config();
                cfg.scale.insert(m, mode);
                let model = MsmfModel::for_dataset(cfg, &ds, 1).unwrap();
                assert_eq!(model.parameter_count(), full);
            }
        }
    }

    #[test]
    fn shared_gate_feeds_both_tasks() {
        let ds = small_data();
        let mut cfg = small_config();
        cfg.mg_gates = false;
        let model = MsmfModel::for_dataset(cfg, &ds, 2).unwrap();
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let out = model.forward_graph(&mut g, &p, &s.windows[3]).unwrap();
        assert_eq!(g.value(out.gates[0]), g.value(out.gates[1]));
        assert!(out.granularity.is_empty());
    }

    #[test]
    fn all_zero_mask_keeps_predictions_input_dependent() {
        let ds = small_data();
        let model = MsmfModel::for_dataset(small_config(), &ds, 5).unwrap();
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        let preds: Vec<TaskPrediction> = [0, 10].iter().map(|&i| {
            let mut g = Graph::new();
            let p = model.params.bind_constant(&mut g);
            let out = model.forward_graph(&mut g, &p, &s.windows[i]).unwrap();
            // Re-run the heads with the fused path zeroed.
            let zero = g.constant(Tensor::zeros(g.value(out.fusion.x_all).shape()));
            let outs = expert_outputs(&mut g, &p, &model.multitask, zero).unwrap();
            let gate = g.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
            let h = mix_experts(&mut g, gate, outs).unwrap();
            let r = ttpl_predict(&mut g, &p, &model.multitask, h, &out.features, Task::Return).unwrap();
            TaskPrediction { return_hat: g.scalar_value(r), movement_probs: [0.5, 0.5] }
        }).collect();
        assert_ne!(preds[0].return_hat, preds[1].return_hat);
    }

    #[test]
    fn restricted_modalities_and_unknown_modality() {
        let ds = small_data();
        let mut cfg = small_config();
        cfg.modalities = Some(vec![Modality::TimeSeries]);
        let model = MsmfModel::for_dataset(cfg, &ds, 1).unwrap();
        assert_eq!(model.modalities(), vec![Modality::TimeSeries]);
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        model.predict(&s.windows[0]).unwrap();

        let one = ds.restrict(&[Modality::Image]).unwrap();
        let mut cfg = small_config();
        cfg.modalities = Some(vec![Modality::Text]);
        assert!(matches!(
            MsmfModel::for_dataset(cfg, &one, 1).unwrap_err(),
            MsmfError::Config(_)
        ));
    }

    #[test]
    fn every_parameter_receives_gradient_in_full_model() {
        let ds = small_data();
        let model = MsmfModel::for_dataset(small_config(), &ds, 9).unwrap();
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let out = model.forward_graph(&mut g, &p, &s.windows[0]).unwrap();
        let r = g.square(out.return_hat);
        let lp = g.log(out.movement_probs);
        let a = g.sum(r);
        let b = g.sum(lp);
        let loss = g.sub(a, b).unwrap();
        let grads = gradient(&g, loss, &p).unwrap();
        for (i, gr) in grads.iter().enumerate() {
            let name = model.params.name(crate::params::ParamId(i));
            if name.starts_with("fusion.scorer") {
                // Scores only enter the loss through the entropy penalty.
                assert_eq!(gr.sum_squares(), 0.0, "{name}");
            }
        }
        let total: f64 = grads.iter().map(|t| t.sum_squares()).sum();
        assert!(total > 0.0);
    }
}
