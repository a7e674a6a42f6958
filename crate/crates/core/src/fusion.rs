//! Multi-scale alignment and blank-learning fusion.
//!
//! Every (modality, scale) summary is projected to a common width `d_a` and
//! stacked into a `C × d_a` matrix with rows ordered
//! `m0-fine, m0-coarse, m1-fine, ...` by fixed modality index. A learned
//! elementwise scorer ranks all `C·d_a` entries; the top `k = ⌈rho·C·d_a⌉`
//! are retained and the rest are zeroed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoder::ModalityFeatures;
use crate::error::{MsmfError, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learned alignment followed by the top-k blank mask.
    #[default]
    MsaBl,
    /// Raw summaries zero-padded or truncated to `d_a`, no mask.
    Stack,
    /// All summaries concatenated and mapped by one shared linear layer, no mask.
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "msa_bl" => Some(FusionMode::MsaBl),
            "stack" => Some(FusionMode::Stack),
            "concat" => Some(FusionMode::Concat),
            _ => None,
        }
    }
}

/// Number of retained entries out of `n`, `⌈rho·n⌉`.
///
/// A relative slack of a few ulps keeps products such as `0.3 · 10` from
/// rounding up past the exact integer.
pub fn retained_count(rho: f64, n: usize) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(MsmfError::Config(format!(
            "retention ratio must lie in (0, 1], got {rho}"
        )));
    }
    let raw = rho * n as f64;
    let k = (raw - raw * 4.0 * f64::EPSILON).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Indicator of the `k` largest values; ties go to the lower index.
pub fn top_k_mask(values: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps equal values in index order.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut mask = vec![0.0; values.len()];
    for &i in order.iter().take(k) {
        mask[i] = 1.0;
    }
    mask
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub modalities: Vec<Modality>,
    pub d_e: usize,
    pub d_a: usize,
    pub rho: f64,
    pub mode: FusionMode,
    /// Per slot `(weight d_e × d_a, bias 1 × d_a)`; used by `MsaBl`.
    pub align: Vec<(ParamId, ParamId)>,
    /// Elementwise scorer `w ⊙ stack + u`; used by `MsaBl`.
    pub scorer: Option<(ParamId, ParamId)>,
    /// Shared `C·d_e → C·d_a` map; used by `Concat`.
    pub concat: Option<(ParamId, ParamId)>,
}

impl FusionParams {
    pub fn init(
        set: &mut ParamSet,
        rng: &mut Rng,
        modalities: &[Modality],
        d_e: usize,
        d_a: usize,
        rho: f64,
        mode: FusionMode,
    ) -> Result<Self> {
        if modalities.is_empty() || d_a == 0 || d_e == 0 {
            return Err(MsmfError::Config(
                "fusion needs at least one modality and positive widths".into(),
            ));
        }
        retained_count(rho, 1)?;
        let mut modalities = modalities.to_vec();
        modalities.sort();
        let c = 2 * modalities.len();
        let mut align = Vec::new();
        let mut scorer = None;
        let mut concat = None;
        match mode {
            FusionMode::MsaBl => {
                for m in &modalities {
                    for scale in ["fine", "coarse"] {
                        let prefix = format!("fusion.align.{}.{scale}", m.name());
                        let w = set.add_weight(format!("{prefix}.weight"), &[d_e, d_a], d_e, 1.0, rng);
                        let b = set.add_zeros(format!("{prefix}.bias"), &[1, d_a]);
                        align.push((w, b));
                    }
                }
                let w = set.add("fusion.scorer.weight", Tensor::full(&[c, d_a], 1.0));
                let u = set.add_zeros("fusion.scorer.offset", &[c, d_a]);
                scorer = Some((w, u));
            }
            FusionMode::Concat => {
                let w = set.add_weight("fusion.concat.weight", &[c * d_e, c * d_a], c * d_e, 1.0, rng);
                let b = set.add_zeros("fusion.concat.bias", &[1, c * d_a]);
                concat = Some((w, b));
            }
            FusionMode::Stack => {}
        }
        Ok(FusionParams {
            modalities,
            d_e,
            d_a,
            rho,
            mode,
            align,
            scorer,
            concat,
        })
    }

    /// Number of stacked rows, `2M`.
    pub fn slots(&self) -> usize {
        2 * self.modalities.len()
    }

    pub fn retained(&self) -> Result<usize> {
        retained_count(self.rho, self.slots() * self.d_a)
    }
}

/// Scale summaries in slot order.
fn slot_vectors(
    fp: &FusionParams,
    features: &BTreeMap<Modality, ModalityFeatures>,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(fp.slots());
    for m in &fp.modalities {
        let f = features.get(m).ok_or_else(|| {
            MsmfError::Contract(format!("{m} features are missing; run completion first"))
        })?;
        out.push(f.fine);
        out.push(f.coarse);
    }
    Ok(out)
}

/// Projects each scale summary to `d_a` and stacks them (`C × d_a`).
pub fn align_features(
    g: &mut Graph,
    p: &[Var],
    fp: &FusionParams,
    features: &BTreeMap<Modality, ModalityFeatures>,
) -> Result<Var> {
    if fp.align.len() != fp.slots() {
        return Err(MsmfError::Contract(
            "alignment projections are only built for blank-learning fusion".into(),
        ));
    }
    let rows = slot_vectors(fp, features)?
        .into_iter()
        .zip(&fp.align)
        .map(|(v, (w, b))| g.linear(v, p[w.index()], p[b.index()]))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&rows, 0)
}

/// Blank-learning selection for one sample.
#[derive(Clone, Debug)]
pub struct BlankMask {
    /// Binary `C × d_a` constant.
    pub mask: Tensor,
    pub k: usize,
    /// Softmax over all `C·d_a` scoring pre-activations, `1 × C·d_a`.
    pub scores: Var,
}

pub fn blank_mask(g: &mut Graph, p: &[Var], fp: &FusionParams, stack: Var) -> Result<BlankMask> {
    let (w, u) = fp.scorer.ok_or_else(|| {
        MsmfError::Contract("blank scorer is only built for blank-learning fusion".into())
    })?;
    let shape = g.value(stack).shape().to_vec();
    let n: usize = shape.iter().product();
    let k = retained_count(fp.rho, n)?;
    let weighted = g.mul(p[w.index()], stack)?;
    let pre = g.add(weighted, p[u.index()])?;
    let flat = g.reshape(pre, vec![1, n])?;
    let scores = g.softmax(flat)?;
    // Softmax is monotone, so ranking the pre-activations gives the same set
    // without rounding ties in the exponentials.
    let mask = Tensor::new(shape, top_k_mask(g.value(pre).data(), k))?;
    Ok(BlankMask { mask, k, scores })
}

/// Elementwise product with a constant mask.
pub fn fuse(g: &mut Graph, stack: Var, mask: &Tensor) -> Result<Var> {
    g.value(stack).expect_same_shape(mask, "fusion mask")?;
    let m = g.constant(mask.clone());
    g.mul(stack, m)
}

/// Unmasked stack or concatenation baseline (`C × d_a`).
pub fn fuse_baseline(
    g: &mut Graph,
    p: &[Var],
    fp: &FusionParams,
    features: &BTreeMap<Modality, ModalityFeatures>,
) -> Result<Var> {
    let slots = slot_vectors(fp, features)?;
    let (c, d_e, d_a) = (fp.slots(), fp.d_e, fp.d_a);
    match fp.mode {
        FusionMode::Stack => {
            let rows = slots
                .into_iter()
                .map(|v| {
                    if d_e >= d_a {
                        g.slice(v, 1, 0, d_a)
                    } else {
                        let pad = g.constant(Tensor::zeros(&[1, d_a - d_e]));
                        g.concat(&[v, pad], 1)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&rows, 0)
        }
        FusionMode::Concat => {
            let (w, b) = fp.concat.ok_or_else(|| {
                MsmfError::Contract("concatenation map was not built".into())
            })?;
            let long = g.concat(&slots, 1)?;
            let mapped = g.linear(long, p[w.index()], p[b.index()])?;
            g.reshape(mapped, vec![c, d_a])
        }
        FusionMode::MsaBl => Err(MsmfError::Contract(
            "blank-learning fusion is not a baseline".into(),
        )),
    }
}

/// Outputs of the fusion stage for one sample.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Pre-mask `C × d_a` stack.
    pub stack: Var,
    pub x_all: Var,
    /// Present for blank-learning fusion only.
    pub blank: Option<BlankMask>,
}

pub fn fuse_features(
    g: &mut Graph,
    p: &[Var],
    fp: &FusionParams,
    features: &BTreeMap<Modality, ModalityFeatures>,
) -> Result<FusionOutput> {
    match fp.mode {
        FusionMode::MsaBl => {
            let stack = align_features(g, p, fp, features)?;
            let blank = blank_mask(g, p, fp, stack)?;
            let x_all = fuse(g, stack, &blank.mask)?;
            Ok(FusionOutput {
                stack,
                x_all,
                blank: Some(blank),
            })
        }
        FusionMode::Stack | FusionMode::Concat => {
            let stack = fuse_baseline(g, p, fp, features)?;
            Ok(FusionOutput {
                stack,
                x_all: stack,
                blank: None,
            })
        }
    }
}
