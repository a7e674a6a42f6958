//! Joint multi-task objective, adaptive-moment optimiser and the training
//! loop with early stopping.
//!
//! The objective for a batch of `B` windows is
//! `α_ret·MSE + α_mov·CE + η·mean entropy(blank scores) + λ·Σθ²`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};
use crate::metrics::{self, MetricsRecord};
use crate::model::{ForwardOutput, MsmfModel, Samples};
use crate::multitask::{Task, TaskPrediction};
use crate::numcore::{gradient, Graph, Tensor, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Task weights; a task left out of the map gets weight 1.
    pub alpha: BTreeMap<Task, f64>,
    /// L2 coefficient over every model parameter.
    pub lambda: f64,
    /// Weight of the blank-score entropy penalty.
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: Task::ALL.iter().map(|&t| (t, 1.0)).collect(),
            lambda: 1e-4,
            eta: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn alpha(&self, t: Task) -> f64 {
        self.alpha.get(&t).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let weights: Vec<f64> = Task::ALL.iter().map(|&t| self.alpha(t)).collect();
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || weights.iter().all(|&w| w == 0.0) {
            return Err(MsmfError::Config(format!(
                "task weights must be non-negative and not all zero, got {weights:?}"
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(MsmfError::Config("lambda and eta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 42,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(MsmfError::Config(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MsmfError::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        let decay_ok = |b: f64| (0.0..1.0).contains(&b);
        if !decay_ok(self.beta1) || !decay_ok(self.beta2) || !(self.epsilon > 0.0) {
            return Err(MsmfError::Config(
                "moment decays must lie in [0, 1) and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(MsmfError::Data(format!("movement label {label} is not 0 or 1")));
    }
    Ok(())
}

/// Entropy `-Σ p ln p` of a probability row, recorded on the graph.
fn entropy(g: &mut Graph, probs: Var) -> Var {
    let lp = g.log(probs);
    let plogp = g.mul(probs, lp).expect("same shape");
    let s = g.sum(plogp);
    g.scale(s, -1.0).expect("scalar")
}

/// Contribution of one window to a batch of `batch` windows, without the
/// L2 term.
pub fn sample_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    target: f64,
    label: u8,
    cfg: &LossConfig,
    batch: usize,
) -> Result<Var> {
    check_label(label)?;
    let inv = 1.0 / batch as f64;
    let y = g.constant(Tensor::scalar(target));
    let err = g.sub(out.return_hat, y)?;
    let se = g.square(err);
    let se = g.sum(se);
    let mut total = g.scale(se, cfg.alpha(Task::Return) * inv)?;
    let p = g.slice(out.movement_probs, 1, label as usize, 1)?;
    let lp = g.log(p);
    let lp = g.sum(lp);
    let ce = g.scale(lp, -cfg.alpha(Task::Movement) * inv)?;
    total = g.add(total, ce)?;
    if let Some(b) = &out.fusion.blank {
        if cfg.eta > 0.0 {
            let h = entropy(g, b.scores);
            let h = g.scale(h, cfg.eta * inv)?;
            total = g.add(total, h)?;
        }
    }
    Ok(total)
}

/// `Σθ²` over the given parameter handles.
pub fn l2_penalty(g: &mut Graph, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = g.square(p);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| MsmfError::Contract("no parameters to regularise".into()))
}

/// Full batch objective on one graph.
pub fn multi_task_loss(
    g: &mut Graph,
    outputs: &[ForwardOutput],
    returns: &[f64],
    movements: &[u8],
    cfg: &LossConfig,
    params: &[Var],
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != returns.len() || outputs.len() != movements.len() {
        return Err(MsmfError::Contract(format!(
            "need a non-empty batch with matching labels, got {} outputs, {} returns, {} movements",
            outputs.len(),
            returns.len(),
            movements.len()
        )));
    }
    let b = outputs.len();
    let mut total = None;
    for ((out, &y), &l) in outputs.iter().zip(returns).zip(movements) {
        let s = sample_loss(g, out, y, l, cfg, b)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let mut total = total.expect("non-empty batch");
    if cfg.lambda > 0.0 {
        let omega = l2_penalty(g, params)?;
        let reg = g.scale(omega, cfg.lambda)?;
        total = g.add(total, reg)?;
    }
    Ok(total)
}

/// Objective over `samples` built as one graph; used for gradient checks.
pub fn batch_objective_graph(
    g: &mut Graph,
    p: &[Var],
    model: &MsmfModel,
    samples: &Samples,
    cfg: &LossConfig,
) -> Result<Var> {
    let outs = samples
        .windows
        .iter()
        .map(|w| model.forward_graph(g, p, w))
        .collect::<Result<Vec<_>>>()?;
    multi_task_loss(g, &outs, &samples.returns, &samples.movements, cfg, p)
}

/// Loss value and parameter gradient for a batch, computed one window per
/// graph and summed in window order.
pub fn batch_gradient(
    model: &MsmfModel,
    samples: &Samples,
    range: std::ops::Range<usize>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let b = range.len();
    let per_sample: Vec<(f64, Vec<Tensor>)> = range
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let out = model.forward_graph(&mut g, &p, &samples.windows[i])?;
            let loss = sample_loss(&mut g, &out, samples.returns[i], samples.movements[i], cfg, b)?;
            Ok((g.scalar_value(loss), gradient(&g, loss, &p)?))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|e| vec![0.0; e.tensor.len()]).collect();
    for (l, gs) in per_sample {
        loss += l;
        for (acc, gt) in grads.iter_mut().zip(gs) {
            for (a, v) in acc.iter_mut().zip(gt.data()) {
                *a += v;
            }
        }
    }
    if cfg.lambda > 0.0 {
        loss += cfg.lambda * model.params.squared_norm();
        for (acc, e) in grads.iter_mut().zip(model.params.iter()) {
            for (a, t) in acc.iter_mut().zip(e.tensor.data()) {
                *a += 2.0 * cfg.lambda * t;
            }
        }
    }
    let grads = grads
        .into_iter()
        .zip(model.params.iter())
        .map(|(g, e)| Tensor::new(e.tensor.shape().to_vec(), g))
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(MsmfError::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(MsmfError::Numeric(format!(
                "non-finite gradient for parameter {}",
                params.name(ParamId(i))
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (tensor, g)) in params.tensors_mut().zip(grads).enumerate() {
        tensor.expect_same_shape(g, "gradient")?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Per-window model outputs used for evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<TaskPrediction>,
    /// Blank-score entropy per window (0 without blank learning).
    pub entropies: Vec<f64>,
}

pub fn predict_all(model: &MsmfModel, samples: &Samples) -> Result<Evaluation> {
    let rows: Vec<(TaskPrediction, f64)> = samples
        .windows
        .par_iter()
        .map(|w| {
            let mut g = Graph::new();
            let p = model.params.bind_constant(&mut g);
            let out = model.forward_graph(&mut g, &p, w)?;
            let probs = g.value(out.movement_probs).data();
            let pred = TaskPrediction {
                return_hat: g.scalar_value(out.return_hat),
                movement_probs: [probs[0], probs[1]],
            };
            let h = match &out.fusion.blank {
                Some(b) => -g
                    .value(b.scores)
                    .data()
                    .iter()
                    .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
                    .sum::<f64>(),
                None => 0.0,
            };
            Ok((pred, h))
        })
        .collect::<Result<_>>()?;
    let (predictions, entropies) = rows.into_iter().unzip();
    Ok(Evaluation {
        predictions,
        entropies,
    })
}

/// Full objective over `samples` (means over windows plus the L2 term).
pub fn objective(model: &MsmfModel, samples: &Samples, cfg: &LossConfig) -> Result<f64> {
    let ev = predict_all(model, samples)?;
    objective_from(&ev, model, samples, cfg)
}

fn objective_from(ev: &Evaluation, model: &MsmfModel, samples: &Samples, cfg: &LossConfig) -> Result<f64> {
    let n = samples.len() as f64;
    let mut mse = 0.0;
    let mut ce = 0.0;
    for ((p, &y), &l) in ev.predictions.iter().zip(&samples.returns).zip(&samples.movements) {
        check_label(l)?;
        mse += (p.return_hat - y).powi(2);
        ce -= p.movement_probs[l as usize].ln();
    }
    let h: f64 = ev.entropies.iter().sum();
    Ok(cfg.alpha(Task::Return) * mse / n
        + cfg.alpha(Task::Movement) * ce / n
        + cfg.eta * h / n
        + cfg.lambda * model.params.squared_norm())
}

fn metrics_from(ev: &Evaluation, samples: &Samples) -> Result<MetricsRecord> {
    let ret: Vec<f64> = ev.predictions.iter().map(|p| p.return_hat).collect();
    let probs: Vec<[f64; 2]> = ev.predictions.iter().map(|p| p.movement_probs).collect();
    metrics::compute(&samples.returns, &ret, &samples.movements, &probs)
}

pub fn evaluate(model: &MsmfModel, samples: &Samples) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(MsmfError::Data("cannot evaluate an empty dataset".into()));
    }
    metrics_from(&predict_all(model, samples)?, samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch objectives seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Objective over the training windows before the first update.
    pub initial_train_loss: f64,
    /// Objective over the training windows at the returned parameters.
    pub final_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,val_f1,val_mape,val_rmse\n");
        for e in &self.epochs {
            let m = &e.val_metrics;
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                e.epoch, e.train_loss, e.val_loss, m.accuracy, m.f1, m.mape, m.rmse
            );
        }
        out
    }
}

/// Trains on chronological mini-batches and returns the parameters with the
/// lowest validation objective.
pub fn train(
    mut model: MsmfModel,
    train_set: &Samples,
    val_set: &Samples,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(MsmfModel, TrainHistory)> {
    loss_cfg.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MsmfError::Data("training and validation sets must be non-empty".into()));
    }
    let initial_train_loss = objective(&model, train_set, loss_cfg)?;
    let mut state = AdamState::new(&model.params);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let n = train_set.len();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, start) in (0..n).step_by(cfg.batch_size).enumerate() {
            let end = (start + cfg.batch_size).min(n);
            let (loss, grads) = batch_gradient(&model, train_set, start..end, loss_cfg)?;
            if !loss.is_finite() {
                return Err(MsmfError::Training {
                    epoch,
                    batch: bi,
                    reason: format!("loss became {loss}"),
                });
            }
            optimizer_step(&mut model.params, &grads, &mut state, cfg).map_err(|e| {
                MsmfError::Training {
                    epoch,
                    batch: bi,
                    reason: e.to_string(),
                }
            })?;
            total += loss;
            batches += 1;
        }
        let ev = predict_all(&model, val_set)?;
        let val_loss = objective_from(&ev, &model, val_set, loss_cfg)?;
        if !val_loss.is_finite() {
            return Err(MsmfError::Training {
                epoch,
                batch: batches,
                reason: format!("validation loss became {val_loss}"),
            });
        }
        let val_metrics = metrics_from(&ev, val_set)?;
        let train_loss = total / batches as f64;
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc {:.4}", val_metrics.accuracy);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });
        match &best {
            Some((b, _, _)) if val_loss >= *b => stale += 1,
            _ => {
                best = Some((val_loss, epoch, model.params.clone()));
                stale = 0;
            }
        }
        if stale >= cfg.patience && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    let final_train_loss = objective(&model, train_set, loss_cfg)?;
    Ok((
        model,
        TrainHistory {
            initial_train_loss,
            final_train_loss,
            epochs,
            best_epoch,
            stopped_early,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Modality, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::numcore::check_gradients;
    use proptest::prelude::*;

    fn tiny() -> (MsmfModel, Samples) {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 60,
            dims: Modality::ALL.iter().map(|&m| (m, 3)).collect(),
            window: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            d_e: 4,
            d_a: 4,
            d_h: 5,
            experts: 2,
            coarse_window: 4,
            ..Default::default()
        };
        let model = MsmfModel::for_dataset(cfg, &ds, 11).unwrap();
        let s = Samples::from_dataset(&ds, &model.modalities()).unwrap();
        (model, s)
    }

    fn graph_loss(model: &MsmfModel, s: &Samples, cfg: &LossConfig) -> f64 {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let l = batch_objective_graph(&mut g, &p, model, s, cfg).unwrap();
        g.scalar_value(l)
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let (model, s) = tiny();
        let batch = s.subset(0..4);
        let cfg = LossConfig::default();
        let report = check_gradients(
            |g, p| batch_objective_graph(g, p, &model, &batch, &cfg),
            &model.params.tensors(),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn per_window_gradient_equals_single_graph_gradient() {
        let (model, s) = tiny();
        let batch = s.subset(0..4);
        let cfg = LossConfig::default();
        let (loss, grads) = batch_gradient(&model, &s, 0..4, &cfg).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let l = batch_objective_graph(&mut g, &p, &model, &batch, &cfg).unwrap();
        assert!((loss - g.scalar_value(l)).abs() < 1e-12);
        let reference = gradient(&g, l, &p).unwrap();
        for (a, b) in grads.iter().zip(&reference) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        assert!((objective(&model, &batch, &cfg).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let (model, s) = tiny();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let mut out = model.forward_graph(&mut g, &p, &s.windows[0]).unwrap();
        out.fusion.blank = None;
        out.return_hat = g.constant(Tensor::scalar(0.25));
        out.movement_probs = g.constant(Tensor::row(vec![0.0, 1.0]));
        let cfg = LossConfig {
            lambda: 0.0,
            eta: 0.0,
            ..Default::default()
        };
        let l = multi_task_loss(&mut g, &[out.clone()], &[0.25], &[1], &cfg, &p).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        assert!(matches!(
            multi_task_loss(&mut g, &[out], &[0.25], &[2], &cfg, &p).unwrap_err(),
            MsmfError::Data(_)
        ));
    }

    #[test]
    fn zero_parameters_have_zero_penalty() {
        let (mut model, s) = tiny();
        for t in model.params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let batch = s.subset(0..3);
        let with = LossConfig { lambda: 0.5, ..Default::default() };
        let without = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(graph_loss(&model, &batch, &with), graph_loss(&model, &batch, &without));
    }

    #[test]
    fn l2_term_is_exactly_additive() {
        let (model, s) = tiny();
        let batch = s.subset(0..4);
        let omega = model.params.squared_norm();
        for a in [1e-4, 0.3, 2.0] {
            let with = LossConfig { lambda: a, ..Default::default() };
            let without = LossConfig { lambda: 0.0, ..Default::default() };
            let diff = graph_loss(&model, &batch, &with) - graph_loss(&model, &batch, &without);
            assert!((diff - a * omega).abs() < 1e-12, "{diff} vs {}", a * omega);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loss_is_linear_in_return_weight(a in 0.0f64..5.0) {
            let (model, s) = tiny();
            let batch = s.subset(0..4);
            let at = |w: f64| {
                let mut cfg = LossConfig::default();
                cfg.alpha.insert(Task::Return, w);
                graph_loss(&model, &batch, &cfg)
            };
            let base = at(0.0);
            let lhs = at(2.0 * a) - base;
            let rhs = 2.0 * (at(a) - base);
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn loss_config_validation() {
        let mut cfg = LossConfig::default();
        cfg.alpha.insert(Task::Return, 0.0);
        cfg.alpha.insert(Task::Movement, 0.0);
        assert!(cfg.validate().is_err());
        cfg.alpha.insert(Task::Movement, -1.0);
        assert!(cfg.validate().is_err());
        let neg = LossConfig { lambda: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("x", Tensor::scalar(v));
        set
    }

    #[test]
    fn first_adaptive_step_moves_by_learning_rate() {
        let mut set = scalar_set(1.0);
        let mut st = AdamState::new(&set);
        let cfg = TrainConfig { learning_rate: 0.01, ..Default::default() };
        optimizer_step(&mut set, &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
        assert!((set.get(ParamId(0)).data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut set = scalar_set(0.7);
        let mut st = AdamState::new(&set);
        let cfg = TrainConfig::default();
        for _ in 0..50 {
            optimizer_step(&mut set, &[Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
        }
        assert_eq!(set.get(ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut set = scalar_set(0.7);
        let mut st = AdamState::new(&set);
        let err = optimizer_step(&mut set, &[Tensor::scalar(f64::NAN)], &mut st, &TrainConfig::default()).unwrap_err();
        match err {
            MsmfError::Numeric(msg) => assert!(msg.contains('x')),
            other => panic!("unexpected {other}"),
        }
    }

    fn quick_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: lr,
            patience: 10,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (model, s) = tiny();
        let (tr, va) = (s.subset(0..30), s.subset(30..40));
        let a = train(model.clone(), &tr, &va, &LossConfig::default(), &quick_cfg(0.01)).unwrap();
        let b = train(model, &tr, &va, &LossConfig::default(), &quick_cfg(0.01)).unwrap();
        assert_eq!(a.0.params, b.0.params);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_learning_rate_keeps_losses_constant() {
        let (model, s) = tiny();
        let (tr, va) = (s.subset(0..30), s.subset(30..40));
        let (trained, h) = train(model.clone(), &tr, &va, &LossConfig::default(), &quick_cfg(0.0)).unwrap();
        assert_eq!(trained.params, model.params);
        for e in &h.epochs {
            assert!((e.train_loss - h.epochs[0].train_loss).abs() < 1e-12);
            assert!((e.val_loss - h.epochs[0].val_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn returned_parameters_have_best_validation_loss() {
        let (model, s) = tiny();
        let (tr, va) = (s.subset(0..30), s.subset(30..40));
        let cfg = TrainConfig { epochs: 8, learning_rate: 0.05, patience: 2, ..quick_cfg(0.05) };
        let (trained, h) = train(model, &tr, &va, &LossConfig::default(), &cfg).unwrap();
        let min = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_loss(), min);
        let recomputed = objective(&trained, &va, &LossConfig::default()).unwrap();
        assert!((recomputed - min).abs() < 1e-12);
    }

    #[test]
    fn single_task_training_leaves_movement_head_untouched() {
        let (model, s) = tiny();
        let (tr, va) = (s.subset(0..30), s.subset(30..40));
        let mut loss = LossConfig { lambda: 0.0, ..Default::default() };
        loss.alpha.insert(Task::Movement, 0.0);
        let (trained, _) = train(model.clone(), &tr, &va, &loss, &quick_cfg(0.01)).unwrap();
        let head = model.multitask.heads[1];
        assert_eq!(trained.params.get(head.weight), model.params.get(head.weight));
        assert_ne!(
            trained.params.get(model.multitask.heads[0].weight),
            model.params.get(model.multitask.heads[0].weight)
        );
        let m = evaluate(&trained, &va).unwrap();
        assert!((0.0..=1.0).contains(&m.accuracy));
    }

    #[test]
    fn zero_heads_predict_class_zero() {
        let (mut model, s) = tiny();
        for d in &model.multitask.heads.clone() {
            *model.params.get_mut(d.weight) = Tensor::zeros(model.params.get(d.weight).shape());
        }
        let m = evaluate(&model, &s).unwrap();
        let down = s.movements.iter().filter(|&&l| l == 0).count() as f64 / s.len() as f64;
        assert_eq!(m.accuracy, down);
        assert_eq!(evaluate(&model, &s).unwrap(), m);
    }
}
