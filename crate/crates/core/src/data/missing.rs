use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};
use crate::numcore::Rng;

use super::{Modality, MultiModalDataset};

/// Marks each row of each modality absent with that modality's rate, zeroing
/// the absent features. Labels are never touched.
pub fn simulate_missing(
    ds: &MultiModalDataset,
    rates: &BTreeMap<Modality, f64>,
    seed: u64,
) -> Result<MultiModalDataset> {
    for (m, &r) in rates {
        if !(0.0..1.0).contains(&r) {
            return Err(MsmfError::Config(format!(
                "missing rate {r} for {m} outside [0, 1)"
            )));
        }
    }
    let mut out = ds.clone();
    for (m, stream) in out.streams.iter_mut() {
        let rate = rates.get(m).copied().unwrap_or(0.0);
        if rate == 0.0 {
            continue;
        }
        let mut rng = Rng::derived(seed, m.index() as u64);
        let d = stream.dim();
        let feats = stream.features.data_mut();
        for (i, present) in stream.present.iter_mut().enumerate() {
            if rng.bernoulli(rate) {
                *present = false;
                feats[i * d..(i + 1) * d].fill(0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMethod {
    Zero,
    Forward,
    Mean,
}

/// Fills absent rows and marks everything present. Present rows are copied
/// through unchanged.
pub fn impute_baseline(ds: &MultiModalDataset, method: ImputeMethod) -> MultiModalDataset {
    let mut out = ds.clone();
    for (m, stream) in out.streams.iter_mut() {
        let d = stream.dim();
        let present = stream.present.clone();
        let feats = stream.features.data_mut();
        match method {
            ImputeMethod::Zero => {
                for (i, &p) in present.iter().enumerate() {
                    if !p {
                        feats[i * d..(i + 1) * d].fill(0.0);
                    }
                }
            }
            ImputeMethod::Forward => {
                let mut last: Option<Vec<f64>> = None;
                for (i, &p) in present.iter().enumerate() {
                    let row = &mut feats[i * d..(i + 1) * d];
                    if p {
                        last = Some(row.to_vec());
                    } else {
                        match &last {
                            Some(prev) => row.copy_from_slice(prev),
                            None => row.fill(0.0),
                        }
                    }
                }
            }
            ImputeMethod::Mean => {
                let count = present.iter().filter(|&&p| p).count();
                let mut mean = vec![0.0; d];
                if count == 0 {
                    log::warn!("{m} has no present rows; mean imputation falls back to zeros");
                } else {
                    for (i, _) in present.iter().enumerate().filter(|(_, &p)| p) {
                        for (acc, v) in mean.iter_mut().zip(&feats[i * d..(i + 1) * d]) {
                            *acc += v;
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= count as f64;
                    }
                }
                for (i, &p) in present.iter().enumerate() {
                    if !p {
                        feats[i * d..(i + 1) * d].copy_from_slice(&mean);
                    }
                }
            }
        }
        stream.present.fill(true);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_support::column_dataset;
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn column(ds: &MultiModalDataset) -> Vec<f64> {
        ds.streams[&Modality::Text].features.to_vec()
    }

    #[test]
    fn forward_fill() {
        let ds = column_dataset(&[Some(1.0), None, None]);
        assert_eq!(column(&impute_baseline(&ds, ImputeMethod::Forward)), [1.0, 1.0, 1.0]);
        let ds = column_dataset(&[None, Some(2.0), None]);
        assert_eq!(column(&impute_baseline(&ds, ImputeMethod::Forward)), [0.0, 2.0, 2.0]);
    }

    #[test]
    fn mean_fill() {
        let ds = column_dataset(&[Some(1.0), None, Some(3.0)]);
        let out = impute_baseline(&ds, ImputeMethod::Mean);
        assert_eq!(column(&out), [1.0, 2.0, 3.0]);
        assert!(out.all_present());
    }

    #[test]
    fn mean_fill_without_present_rows_uses_zeros() {
        let ds = column_dataset(&[None, None]);
        assert_eq!(column(&impute_baseline(&ds, ImputeMethod::Mean)), [0.0, 0.0]);
    }

    #[test]
    fn zero_fill_keeps_absent_rows_zero() {
        let ds = column_dataset(&[Some(4.0), None]);
        assert_eq!(column(&impute_baseline(&ds, ImputeMethod::Zero)), [4.0, 0.0]);
    }

    fn small() -> MultiModalDataset {
        generate_synthetic(&SyntheticSpec {
            n_samples: 10_000,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = small();
        let rates = Modality::ALL.iter().map(|&m| (m, 0.0)).collect();
        assert_eq!(simulate_missing(&ds, &rates, 3).unwrap(), ds);
    }

    #[test]
    fn missingness_is_independent_per_modality() {
        let ds = small();
        let rates = [(Modality::Text, 1.0 - 1e-9)].into_iter().collect();
        let out = simulate_missing(&ds, &rates, 3).unwrap();
        assert_eq!(out.streams[&Modality::TimeSeries].present_count(), ds.n_samples());
        assert_eq!(out.streams[&Modality::Image].present_count(), ds.n_samples());
        assert_eq!(out.streams[&Modality::Text].present_count(), 0);
        assert_eq!(out.returns, ds.returns);
    }

    #[test]
    fn empirical_rate_concentrates() {
        // Binomial(10000, 0.3) has sd ~0.0046, so +-0.02 is over 4 sd.
        let ds = small();
        let rates = [(Modality::Image, 0.3)].into_iter().collect();
        let out = simulate_missing(&ds, &rates, 11).unwrap();
        let absent = 1.0 - out.streams[&Modality::Image].present_count() as f64 / ds.n_samples() as f64;
        assert!((absent - 0.3).abs() < 0.02, "absent fraction {absent}");
        let s = &out.streams[&Modality::Image];
        for i in 0..ds.n_samples() {
            if !s.present[i] {
                assert!(s.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rate_out_of_range_rejected() {
        let ds = column_dataset(&[Some(1.0)]);
        let rates = [(Modality::Text, 1.0)].into_iter().collect();
        assert!(matches!(
            simulate_missing(&ds, &rates, 0).unwrap_err(),
            MsmfError::Config(_)
        ));
    }
}
