use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};
use crate::numcore::{Rng, Tensor};

use super::{simulate_missing, Modality, ModalityStream, MultiModalDataset};

/// Parameters of the planted two-factor generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub dims: BTreeMap<Modality, usize>,
    pub window: usize,
    /// Period of the short-scale latent factor, in samples.
    pub local_period: f64,
    /// Period of the long-scale latent factor, in samples.
    pub global_period: f64,
    pub noise_std: f64,
    pub missing_rate: BTreeMap<Modality, f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 4000,
            dims: Modality::ALL.iter().map(|&m| (m, 8)).collect(),
            window: 16,
            local_period: 12.0,
            global_period: 96.0,
            noise_std: 0.1,
            missing_rate: Modality::ALL.iter().map(|&m| (m, 0.0)).collect(),
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MsmfError::Config(msg));
        if self.dims.is_empty() || self.dims.values().any(|&d| d == 0) {
            return bad("every modality needs a positive feature dimension".into());
        }
        if self.window == 0 || self.n_samples < self.window {
            return bad(format!(
                "n_samples ({}) must be at least the window ({})",
                self.n_samples, self.window
            ));
        }
        if !(self.local_period >= 2.0 && self.global_period > self.local_period) {
            return bad(format!(
                "periods must satisfy global ({}) > local ({}) >= 2",
                self.global_period, self.local_period
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        for (m, &r) in &self.missing_rate {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("missing rate {r} for {m} outside [0, 1)"));
            }
            if !self.dims.contains_key(m) {
                return bad(format!("missing rate given for absent modality {m}"));
            }
        }
        Ok(())
    }
}

/// Latent factor paths, one entry per dataset row.
#[derive(Clone, Debug)]
pub struct Latents {
    pub local: Vec<f64>,
    pub global: Vec<f64>,
    /// Per-window summaries that drive the return label.
    pub local_summary: Vec<f64>,
    pub global_summary: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiModalDataset> {
    generate_synthetic_with_latents(spec).map(|(ds, _)| ds)
}

/// Two sinusoid-plus-noise factors with periods `local_period` and
/// `global_period` drive every modality through a fixed random linear map.
/// The return of a window is `0.5 * mean(local) + 0.5 * mean(global)` over
/// the window's rows plus noise; movement is `return > 0`.
pub fn generate_synthetic_with_latents(
    spec: &SyntheticSpec,
) -> Result<(MultiModalDataset, Latents)> {
    spec.validate()?;
    let n = spec.n_samples;
    let t_win = spec.window;
    let mut rng = Rng::derived(spec.seed, 0);

    let phase_local = rng.uniform() * 2.0 * PI;
    let phase_global = rng.uniform() * 2.0 * PI;
    let factor = |t: usize, period: f64, phase: f64, rng: &mut Rng| {
        (2.0 * PI * t as f64 / period + phase).sin() + spec.noise_std * rng.normal()
    };
    let mut local = Vec::with_capacity(n);
    let mut global = Vec::with_capacity(n);
    for t in 0..n {
        local.push(factor(t, spec.local_period, phase_local, &mut rng));
        global.push(factor(t, spec.global_period, phase_global, &mut rng));
    }

    let n_w = n - t_win + 1;
    let mut returns = Vec::with_capacity(n_w);
    let mut local_summary = Vec::with_capacity(n_w);
    let mut global_summary = Vec::with_capacity(n_w);
    for i in 0..n_w {
        let l = local[i..i + t_win].iter().sum::<f64>() / t_win as f64;
        let g = global[i..i + t_win].iter().sum::<f64>() / t_win as f64;
        local_summary.push(l);
        global_summary.push(g);
        returns.push(0.5 * l + 0.5 * g + spec.noise_std * rng.normal());
    }
    let movements = returns.iter().map(|&r| u8::from(r > 0.0)).collect();

    let mut streams = BTreeMap::new();
    for (&m, &d) in &spec.dims {
        let mut mrng = Rng::derived(spec.seed, 1 + m.index() as u64);
        // d × 2 mixing map, scaled so each feature has roughly unit signal variance.
        let mixing: Vec<f64> = (0..d * 2).map(|_| mrng.normal()).collect();
        let mut feats = Vec::with_capacity(n * d);
        for t in 0..n {
            for j in 0..d {
                let signal = mixing[2 * j] * local[t] + mixing[2 * j + 1] * global[t];
                feats.push(signal + spec.noise_std * mrng.normal());
            }
        }
        streams.insert(
            m,
            ModalityStream {
                modality: m,
                features: Tensor::new(vec![n, d], feats)?,
                present: vec![true; n],
            },
        );
    }

    let ds = MultiModalDataset {
        timestamps: (0..n as i64).collect(),
        streams,
        window: t_win,
        returns,
        movements,
    };
    let ds = if spec.missing_rate.values().any(|&r| r > 0.0) {
        simulate_missing(&ds, &spec.missing_rate, Rng::derived(spec.seed, 100).next_u64())?
    } else {
        ds
    };
    Ok((
        ds,
        Latents {
            local,
            global,
            local_summary,
            global_summary,
        },
    ))
}
