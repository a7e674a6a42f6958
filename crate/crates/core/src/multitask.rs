//! Gated mixture of experts with per-task gates, multi-granularity gates and
//! task-targeted prediction heads.
//!
//! With multi-granularity gates on, each task weighs the fine and coarse
//! aligned rows of every modality (β), then weighs modalities against each
//! other (γ). The resulting context vector joins the flattened fused
//! representation as input to that task's expert gate. With the gates off a
//! single expert gate over the fused representation serves both tasks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoder::ModalityFeatures;
use crate::error::{MsmfError, Result};
use crate::numcore::{Graph, Rng, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Return,
    Movement,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Return, Task::Movement];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Task> {
        Task::ALL
            .get(i)
            .copied()
            .ok_or_else(|| MsmfError::Contract(format!("unknown task id {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Return => "return",
            Task::Movement => "movement",
        }
    }

    /// Head output width.
    pub fn arity(self) -> usize {
        match self {
            Task::Return => 1,
            Task::Movement => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn init(set: &mut ParamSet, rng: &mut Rng, name: &str, d_in: usize, d_out: usize, gain: f64) -> Dense {
        Dense {
            weight: set.add_weight(format!("{name}.weight"), &[d_in, d_out], d_in, gain, rng),
            bias: set.add_zeros(format!("{name}.bias"), &[1, d_out]),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.index()], p[self.bias.index()])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Expert {
    pub hidden: Dense,
    pub output: Dense,
}

/// Per-task multi-granularity gates.
#[derive(Clone, Debug)]
pub struct GranularityGates {
    /// One `2·d_e → 2` map per modality, in modality order.
    pub scale: Vec<Dense>,
    /// `M·d_a → M`.
    pub modality: Dense,
}

#[derive(Clone, Debug)]
pub struct MultitaskParams {
    pub modalities: Vec<Modality>,
    pub d_e: usize,
    pub d_a: usize,
    pub d_h: usize,
    pub experts: Vec<Expert>,
    pub mg_gates: bool,
    /// Per task when `mg_gates`, otherwise a single shared gate.
    pub task_gates: Vec<Dense>,
    /// Per task; empty when `mg_gates` is off.
    pub granularity: Vec<GranularityGates>,
    /// Per task, `d_h + 2·M·d_e → arity`.
    pub heads: Vec<Dense>,
}

impl MultitaskParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        set: &mut ParamSet,
        rng: &mut Rng,
        modalities: &[Modality],
        d_e: usize,
        d_a: usize,
        d_h: usize,
        n_experts: usize,
        mg_gates: bool,
    ) -> Result<Self> {
        if n_experts == 0 || d_h == 0 || modalities.is_empty() {
            return Err(MsmfError::Config(
                "need at least one expert, one modality and a positive hidden width".into(),
            ));
        }
        let mut modalities = modalities.to_vec();
        modalities.sort();
        let m = modalities.len();
        let flat = 2 * m * d_a;
        let experts = (0..n_experts)
            .map(|i| Expert {
                hidden: Dense::init(set, rng, &format!("expert.{i}.hidden"), flat, d_h, 2.0),
                output: Dense::init(set, rng, &format!("expert.{i}.output"), d_h, d_h, 1.0),
            })
            .collect();
        let mut task_gates = Vec::new();
        let mut granularity = Vec::new();
        if mg_gates {
            for t in Task::ALL {
                task_gates.push(Dense::init(set, rng, &format!("gate.{t}"), flat + d_a, n_experts, 1.0));
            }
            for t in Task::ALL {
                let scale = modalities
                    .iter()
                    .map(|md| Dense::init(set, rng, &format!("gate.{t}.scale.{}", md.name()), 2 * d_e, 2, 1.0))
                    .collect();
                let modality = Dense::init(set, rng, &format!("gate.{t}.modality"), m * d_a, m, 1.0);
                granularity.push(GranularityGates { scale, modality });
            }
        } else {
            task_gates.push(Dense::init(set, rng, "gate.shared", flat, n_experts, 1.0));
        }
        let heads = Task::ALL
            .iter()
            .map(|t| Dense::init(set, rng, &format!("head.{t}"), d_h + 2 * m * d_e, t.arity(), 1.0))
            .collect();
        Ok(MultitaskParams {
            modalities,
            d_e,
            d_a,
            d_h,
            experts,
            mg_gates,
            task_gates,
            granularity,
            heads,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Gate values and context for one task.
#[derive(Clone, Debug)]
pub struct GranularityOutput {
    /// Per modality `1 × 2` weights over (fine, coarse).
    pub beta: Vec<Var>,
    /// `1 × M` weights over modalities.
    pub gamma: Var,
    /// `1 × d_a`.
    pub context: Var,
}

fn features_of<'a>(
    features: &'a BTreeMap<Modality, ModalityFeatures>,
    m: Modality,
) -> Result<&'a ModalityFeatures> {
    features
        .get(&m)
        .ok_or_else(|| MsmfError::Contract(format!("{m} features are missing")))
}

pub fn multi_granularity_gate(
    g: &mut Graph,
    p: &[Var],
    mp: &MultitaskParams,
    features: &BTreeMap<Modality, ModalityFeatures>,
    aligned: Var,
    t: Task,
) -> Result<GranularityOutput> {
    let gates = mp.granularity.get(t.index()).ok_or_else(|| {
        MsmfError::Contract("multi-granularity gates are disabled".into())
    })?;
    let mut beta = Vec::with_capacity(mp.modalities.len());
    let mut mixed = Vec::with_capacity(mp.modalities.len());
    for (j, (&m, gate)) in mp.modalities.iter().zip(&gates.scale).enumerate() {
        let f = features_of(features, m)?;
        let logits = gate.apply(g, p, f.combined)?;
        let b = g.softmax(logits)?;
        let rows = g.slice(aligned, 0, 2 * j, 2)?;
        mixed.push(g.matmul(b, rows)?);
        beta.push(b);
    }
    let joined = g.concat(&mixed, 1)?;
    let logits = gates.modality.apply(g, p, joined)?;
    let gamma = g.softmax(logits)?;
    let rows = g.concat(&mixed, 0)?;
    let context = g.matmul(gamma, rows)?;
    Ok(GranularityOutput { beta, gamma, context })
}

/// Expert weights for task `t` (`1 × K`). `context` must be given exactly
/// when multi-granularity gates are on.
pub fn task_gate(
    g: &mut Graph,
    p: &[Var],
    mp: &MultitaskParams,
    x_all: Var,
    context: Option<Var>,
    t: Task,
) -> Result<Var> {
    let n = g.value(x_all).len();
    let flat = g.reshape(x_all, vec![1, n])?;
    let (gate, input) = match (mp.mg_gates, context) {
        (true, Some(c)) => (&mp.task_gates[t.index()], g.concat(&[flat, c], 1)?),
        (false, None) => (&mp.task_gates[0], flat),
        _ => {
            return Err(MsmfError::Contract(
                "gate context must be supplied exactly when multi-granularity gates are on".into(),
            ))
        }
    };
    let logits = gate.apply(g, p, input)?;
    g.softmax(logits)
}

/// Output of one expert, `1 × d_h`.
pub fn expert_output(g: &mut Graph, p: &[Var], e: &Expert, x_all: Var) -> Result<Var> {
    let n = g.value(x_all).len();
    let flat = g.reshape(x_all, vec![1, n])?;
    let z = e.hidden.apply(g, p, flat)?;
    let a = g.relu(z);
    e.output.apply(g, p, a)
}

/// `K × d_h` matrix of expert outputs, computed once and shared by tasks.
pub fn expert_outputs(g: &mut Graph, p: &[Var], mp: &MultitaskParams, x_all: Var) -> Result<Var> {
    let outs = mp
        .experts
        .iter()
        .map(|e| expert_output(g, p, e, x_all))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&outs, 0)
}

/// Convex combination `gate · outputs` (`1 × d_h`).
pub fn mix_experts(g: &mut Graph, gate: Var, outputs: Var) -> Result<Var> {
    g.matmul(gate, outputs)
}

/// Head for task `t`: return gives `1 × 1`, movement gives `1 × 2`
/// probabilities.
pub fn ttpl_predict(
    g: &mut Graph,
    p: &[Var],
    mp: &MultitaskParams,
    h: Var,
    features: &BTreeMap<Modality, ModalityFeatures>,
    t: Task,
) -> Result<Var> {
    let mut parts = vec![h];
    for &m in &mp.modalities {
        parts.push(features_of(features, m)?.fine);
    }
    for &m in &mp.modalities {
        parts.push(features_of(features, m)?.coarse);
    }
    let input = g.concat(&parts, 1)?;
    let out = mp.heads[t.index()].apply(g, p, input)?;
    match t {
        Task::Return => Ok(out),
        Task::Movement => g.softmax(out),
    }
}

/// Predictions for one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub return_hat: f64,
    pub movement_probs: [f64; 2],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_gradients, Tensor};

    const D_E: usize = 3;
    const D_A: usize = 3;

    fn build(mods: &[Modality], k: usize, mg: bool, seed: u64) -> (ParamSet, MultitaskParams) {
        let mut set = ParamSet::new();
        let mp = MultitaskParams::init(&mut set, &mut Rng::new(seed), mods, D_E, D_A, 4, k, mg).unwrap();
        (set, mp)
    }

    fn features(g: &mut Graph, rng: &mut Rng, mods: &[Modality]) -> BTreeMap<Modality, ModalityFeatures> {
        mods.iter()
            .map(|&m| {
                let fine = g.constant(rng.normal_tensor(&[1, D_E], 1.0));
                let coarse = g.constant(rng.normal_tensor(&[1, D_E], 1.0));
                let combined = g.concat(&[fine, coarse], 1).unwrap();
                (m, ModalityFeatures { fine, coarse, combined })
            })
            .collect()
    }

    fn zero_all(set: &mut ParamSet) {
        for t in set.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }

    fn on_simplex(v: &Tensor) -> bool {
        v.data().iter().all(|&x| x >= 0.0) && (v.sum() - 1.0).abs() < 1e-12
    }

    #[test]
    fn zero_gates_are_uniform() {
        let (mut set, mp) = build(&Modality::ALL, 4, true, 1);
        zero_all(&mut set);
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let mut rng = Rng::new(2);
        let feats = features(&mut g, &mut rng, &Modality::ALL);
        let aligned_t = rng.normal_tensor(&[6, D_A], 1.0);
        let aligned = g.constant(aligned_t.clone());
        let out = multi_granularity_gate(&mut g, &p, &mp, &feats, aligned, Task::Return).unwrap();
        for b in &out.beta {
            assert_eq!(g.value(*b).data(), &[0.5, 0.5]);
        }
        for v in g.value(out.gamma).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in 0..D_A {
            let mean = (0..6).map(|r| aligned_t.at(r, c)).sum::<f64>() / 6.0;
            assert!((g.value(out.context).data()[c] - mean).abs() < 1e-12);
        }
        let gate = task_gate(&mut g, &p, &mp, aligned, Some(out.context), Task::Movement).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_modality_and_single_expert_are_degenerate_simplices() {
        let (set, mp) = build(&[Modality::Text], 1, true, 3);
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let mut rng = Rng::new(4);
        let feats = features(&mut g, &mut rng, &[Modality::Text]);
        let aligned = g.constant(rng.normal_tensor(&[2, D_A], 1.0));
        let out = multi_granularity_gate(&mut g, &p, &mp, &feats, aligned, Task::Movement).unwrap();
        assert_eq!(g.value(out.gamma).data(), &[1.0]);
        let gate = task_gate(&mut g, &p, &mp, aligned, Some(out.context), Task::Movement).unwrap();
        assert_eq!(g.value(gate).data(), &[1.0]);
    }

    #[test]
    fn random_gates_stay_on_simplex() {
        for seed in 0..20 {
            let (set, mp) = build(&Modality::ALL, 4, true, seed);
            let mut g = Graph::new();
            let p = set.bind(&mut g);
            let mut rng = Rng::new(seed + 100);
            let feats = features(&mut g, &mut rng, &Modality::ALL);
            let aligned = g.constant(rng.normal_tensor(&[6, D_A], 5.0));
            for t in Task::ALL {
                let out = multi_granularity_gate(&mut g, &p, &mp, &feats, aligned, t).unwrap();
                for b in &out.beta {
                    assert!(on_simplex(g.value(*b)));
                }
                assert!(on_simplex(g.value(out.gamma)));
                let gate = task_gate(&mut g, &p, &mp, aligned, Some(out.context), t).unwrap();
                assert!(on_simplex(g.value(gate)));
            }
        }
    }

    #[test]
    fn shared_gate_is_identical_across_tasks() {
        let (set, mp) = build(&Modality::ALL, 4, false, 5);
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let x = g.constant(Rng::new(6).normal_tensor(&[6, D_A], 1.0));
        let a = task_gate(&mut g, &p, &mp, x, None, Task::Return).unwrap();
        let b = task_gate(&mut g, &p, &mp, x, None, Task::Movement).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(task_gate(&mut g, &p, &mp, x, Some(a), Task::Return).is_err());
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let (set, mp) = build(&Modality::ALL, 3, true, 7);
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let x = g.constant(Rng::new(8).normal_tensor(&[6, D_A], 1.0));
        let outs = expert_outputs(&mut g, &p, &mp, x).unwrap();
        for j in 0..3 {
            let mut onehot = vec![0.0; 3];
            onehot[j] = 1.0;
            let gate = g.constant(Tensor::row(onehot));
            let h = mix_experts(&mut g, gate, outs).unwrap();
            let single = expert_output(&mut g, &p, &mp.experts[j], x).unwrap();
            assert_eq!(g.value(h), g.value(single));
        }
        // Random convex weights stay inside the coordinatewise hull.
        let gate = g.constant(Tensor::row(vec![0.2, 0.5, 0.3]));
        let h = mix_experts(&mut g, gate, outs).unwrap();
        let o = g.value(outs).clone();
        for c in 0..4 {
            let col: Vec<f64> = (0..3).map(|r| o.at(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = g.value(h).data()[c];
            assert!(lo - 1e-12 <= v && v <= hi + 1e-12);
        }
    }

    #[test]
    fn identical_experts_ignore_gate() {
        let (mut set, mp) = build(&Modality::ALL, 4, true, 9);
        for e in &mp.experts[1..] {
            for (src, dst) in [
                (mp.experts[0].hidden.weight, e.hidden.weight),
                (mp.experts[0].hidden.bias, e.hidden.bias),
                (mp.experts[0].output.weight, e.output.weight),
                (mp.experts[0].output.bias, e.output.bias),
            ] {
                let t = set.get(src).clone();
                *set.get_mut(dst) = t;
            }
        }
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let x = g.constant(Rng::new(10).normal_tensor(&[6, D_A], 1.0));
        let outs = expert_outputs(&mut g, &p, &mp, x).unwrap();
        let single = expert_output(&mut g, &p, &mp.experts[0], x).unwrap();
        for w in [[0.25; 4], [0.7, 0.1, 0.1, 0.1]] {
            let gate = g.constant(Tensor::row(w.to_vec()));
            let h = mix_experts(&mut g, gate, outs).unwrap();
            assert!(g.value(h).max_abs_diff(g.value(single)) < 1e-12);
        }
    }

    #[test]
    fn zero_heads_give_neutral_predictions() {
        let (mut set, mp) = build(&Modality::ALL, 2, true, 11);
        for d in &mp.heads {
            *set.get_mut(d.weight) = Tensor::zeros(set.get(d.weight).shape());
        }
        let mut g = Graph::new();
        let p = set.bind(&mut g);
        let mut rng = Rng::new(12);
        let feats = features(&mut g, &mut rng, &Modality::ALL);
        let h = g.constant(rng.normal_tensor(&[1, 4], 1.0));
        let r = ttpl_predict(&mut g, &p, &mp, h, &feats, Task::Return).unwrap();
        let m = ttpl_predict(&mut g, &p, &mp, h, &feats, Task::Movement).unwrap();
        assert_eq!(g.value(r).data(), &[0.0]);
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn head_depends_on_fine_summary() {
        let (set, mp) = build(&Modality::ALL, 2, true, 13);
        let mut rng = Rng::new(14);
        let h = rng.normal_tensor(&[1, 4], 1.0);
        let summaries: Vec<Tensor> = (0..6).map(|_| rng.normal_tensor(&[1, D_E], 1.0)).collect();
        let tensors = set.tensors();
        let eval = |fine0: &Tensor| {
            let mut g = Graph::new();
            let p: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
            let hv = g.constant(h.clone());
            let mut feats = BTreeMap::new();
            for (j, &m) in Modality::ALL.iter().enumerate() {
                let fine = g.constant(if j == 0 { fine0.clone() } else { summaries[2 * j].clone() });
                let coarse = g.constant(summaries[2 * j + 1].clone());
                let combined = g.concat(&[fine, coarse], 1).unwrap();
                feats.insert(m, ModalityFeatures { fine, coarse, combined });
            }
            let r = ttpl_predict(&mut g, &p, &mp, hv, &feats, Task::Return).unwrap();
            g.scalar_value(r)
        };
        let eps = 1e-6;
        let base = summaries[0].clone();
        let mut plus = base.to_vec();
        plus[0] += eps;
        let mut minus = base.to_vec();
        minus[0] -= eps;
        let d = (eval(&Tensor::row(plus)) - eval(&Tensor::row(minus))) / (2.0 * eps);
        let w = set.get(mp.heads[0].weight);
        // The first fine entry of the first modality sits right after h.
        assert!((d - w.at(4, 0)).abs() < 1e-6);
        assert!(d.abs() > 1e-6);
    }

    #[test]
    fn gate_path_gradients_match_finite_differences() {
        let (set, mp) = build(&Modality::ALL, 3, true, 15);
        let mut rng = Rng::new(16);
        let aligned = rng.normal_tensor(&[6, D_A], 1.0);
        let summaries: Vec<Tensor> = (0..6).map(|_| rng.normal_tensor(&[1, D_E], 1.0)).collect();
        let report = check_gradients(
            |g, p| {
                let mut feats = BTreeMap::new();
                for (j, &m) in Modality::ALL.iter().enumerate() {
                    let fine = g.constant(summaries[2 * j].clone());
                    let coarse = g.constant(summaries[2 * j + 1].clone());
                    let combined = g.concat(&[fine, coarse], 1)?;
                    feats.insert(m, ModalityFeatures { fine, coarse, combined });
                }
                let a = g.constant(aligned.clone());
                let ctx = multi_granularity_gate(g, p, &mp, &feats, a, Task::Movement)?;
                let gate = task_gate(g, p, &mp, a, Some(ctx.context), Task::Movement)?;
                let outs = expert_outputs(g, p, &mp, a)?;
                let h = mix_experts(g, gate, outs)?;
                let probs = ttpl_predict(g, p, &mp, h, &feats, Task::Movement)?;
                let lp = g.log(probs);
                let picked = g.slice(lp, 1, 1, 1)?;
                Ok(g.sum(picked))
            },
            &set.tensors(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn task_ids() {
        assert_eq!(Task::from_index(1).unwrap(), Task::Movement);
        assert!(matches!(Task::from_index(2).unwrap_err(), MsmfError::Contract(_)));
    }
}
