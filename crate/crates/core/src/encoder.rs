//! Fine- and coarse-grained temporal encoders for one modality window.
//!
//! The fine path is a same-padded convolution followed by ReLU and a temporal
//! mean; the coarse path mean-pools non-overlapping blocks, projects, applies
//! ReLU and averages. The modality representation is `fine ⊕ coarse`.

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{MsmfError, Result};
use crate::numcore::{Graph, Rng, Var};
use crate::params::{ParamId, ParamSet};

/// Which scales feed the two halves of the combined representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Multi,
    /// Fine features duplicated into the coarse half.
    FineOnly,
    /// Coarse features duplicated into the fine half.
    CoarseOnly,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub modality: Modality,
    pub d_in: usize,
    pub d_e: usize,
    pub fine_window: usize,
    pub coarse_window: usize,
    pub scale: ScaleMode,
    pub fine_kernel: ParamId,
    pub fine_bias: ParamId,
    pub coarse_weight: ParamId,
    pub coarse_bias: ParamId,
}

impl EncoderParams {
    pub fn init(
        set: &mut ParamSet,
        rng: &mut Rng,
        modality: Modality,
        d_in: usize,
        d_e: usize,
        fine_window: usize,
        coarse_window: usize,
        scale: ScaleMode,
    ) -> Result<Self> {
        if fine_window % 2 == 0 {
            return Err(MsmfError::Config(format!(
                "fine window must be odd, got {fine_window}"
            )));
        }
        if coarse_window < 2 || d_e == 0 {
            return Err(MsmfError::Config(format!(
                "coarse window ({coarse_window}) must be >= 2 and d_e ({d_e}) positive"
            )));
        }
        let name = modality.name();
        Ok(EncoderParams {
            modality,
            d_in,
            d_e,
            fine_window,
            coarse_window,
            scale,
            fine_kernel: set.add_weight(
                format!("encoder.{name}.fine.kernel"),
                &[fine_window, d_in, d_e],
                fine_window * d_in,
                2.0,
                rng,
            ),
            fine_bias: set.add_zeros(format!("encoder.{name}.fine.bias"), &[d_e]),
            coarse_weight: set.add_weight(
                format!("encoder.{name}.coarse.weight"),
                &[d_in, d_e],
                d_in,
                2.0,
                rng,
            ),
            coarse_bias: set.add_zeros(format!("encoder.{name}.coarse.bias"), &[1, d_e]),
        })
    }
}

/// Graph handles for one encoded modality. `combined` is `1 × 2·d_e`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures {
    pub fine: Var,
    pub coarse: Var,
    pub combined: Var,
}

/// Pre-activation of the fine path (`T × d_e`), exposed for inspection.
pub fn fine_preactivation(g: &mut Graph, p: &[Var], enc: &EncoderParams, x: Var) -> Result<Var> {
    let t_len = g.value(x).shape()[0];
    if t_len < enc.fine_window {
        return Err(MsmfError::Data(format!(
            "window of {t_len} rows is shorter than the fine kernel ({})",
            enc.fine_window
        )));
    }
    g.temporal_conv(x, p[enc.fine_kernel.index()], p[enc.fine_bias.index()])
}

pub fn encode_fine(g: &mut Graph, p: &[Var], enc: &EncoderParams, x: Var) -> Result<Var> {
    let z = fine_preactivation(g, p, enc, x)?;
    let a = g.relu(z);
    g.mean_rows(a)
}

/// Pooled rows before projection (`⌈T / w_c⌉ × d_in`).
pub fn coarse_pooled(g: &mut Graph, enc: &EncoderParams, x: Var) -> Result<Var> {
    let t_len = g.value(x).shape()[0];
    if t_len < enc.coarse_window {
        return Err(MsmfError::Data(format!(
            "window of {t_len} rows is shorter than the coarse pool ({})",
            enc.coarse_window
        )));
    }
    g.temporal_pool(x, enc.coarse_window)
}

pub fn encode_coarse(g: &mut Graph, p: &[Var], enc: &EncoderParams, x: Var) -> Result<Var> {
    let pooled = coarse_pooled(g, enc, x)?;
    let z = g.linear(pooled, p[enc.coarse_weight.index()], p[enc.coarse_bias.index()])?;
    let a = g.relu(z);
    g.mean_rows(a)
}

pub fn encode_modality(
    g: &mut Graph,
    p: &[Var],
    enc: &EncoderParams,
    x: Var,
) -> Result<ModalityFeatures> {
    let (fine, coarse) = match enc.scale {
        ScaleMode::Multi => (
            encode_fine(g, p, enc, x)?,
            encode_coarse(g, p, enc, x)?,
        ),
        ScaleMode::FineOnly => {
            let f = encode_fine(g, p, enc, x)?;
            (f, f)
        }
        ScaleMode::CoarseOnly => {
            let c = encode_coarse(g, p, enc, x)?;
            (c, c)
        }
    };
    let combined = g.concat(&[fine, coarse], 1)?;
    Ok(ModalityFeatures {
        fine,
        coarse,
        combined,
    })
}
