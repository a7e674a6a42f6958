//! Accuracy, F1, MAPE and RMSE.

use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};

/// Targets with `|y| < MAPE_FLOOR` are excluded from MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub f1: f64,
    pub mape: f64,
    pub rmse: f64,
    pub n_reg: usize,
    pub n_cls: usize,
    pub n_excluded_mape: usize,
}

/// The four reported fields, in the order they appear in tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub f1: f64,
    pub mape: f64,
    pub rmse: f64,
}

impl MetricsRecord {
    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            accuracy: self.accuracy,
            f1: self.f1,
            mape: self.mape,
            rmse: self.rmse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mape {
    pub value: f64,
    pub n_excluded: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(MsmfError::Metric(format!(
            "need equal non-empty inputs, got lengths {a} and {b}"
        )));
    }
    Ok(())
}

pub fn mape(y: &[f64], yhat: &[f64]) -> Result<Mape> {
    check_lengths(y.len(), yhat.len())?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (&t, &p) in y.iter().zip(yhat) {
        if t.abs() >= MAPE_FLOOR {
            total += (t - p).abs() / t.abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(MsmfError::Metric(
            "every target is below the MAPE floor".into(),
        ));
    }
    Ok(Mape {
        value: total / used as f64,
        n_excluded: y.len() - used,
    })
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yhat.len())?;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

/// Argmax over two classes; ties go to class 0.
pub fn predicted_class(probs: &[f64; 2]) -> u8 {
    u8::from(probs[1] > probs[0])
}

pub fn accuracy(labels: &[u8], probs: &[[f64; 2]]) -> Result<f64> {
    check_lengths(labels.len(), probs.len())?;
    let hits = labels
        .iter()
        .zip(probs)
        .filter(|(&l, p)| predicted_class(p) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Binary F1 on the positive (up) class; 0 when precision + recall is 0.
pub fn f1(labels: &[u8], probs: &[[f64; 2]]) -> Result<f64> {
    check_lengths(labels.len(), probs.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&l, p) in labels.iter().zip(probs) {
        match (predicted_class(p), l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn compute(
    returns: &[f64],
    return_hat: &[f64],
    labels: &[u8],
    probs: &[[f64; 2]],
) -> Result<MetricsRecord> {
    let m = mape(returns, return_hat)?;
    Ok(MetricsRecord {
        accuracy: accuracy(labels, probs)?,
        f1: f1(labels, probs)?,
        mape: m.value,
        rmse: rmse(returns, return_hat)?,
        n_reg: returns.len(),
        n_cls: labels.len(),
        n_excluded_mape: m.n_excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mape_cases() {
        assert!((mape(&[100.0], &[110.0]).unwrap().value - 0.10).abs() < 1e-15);
        assert_eq!(mape(&[1.0, -2.0], &[1.0, -2.0]).unwrap().value, 0.0);
        let m = mape(&[0.0, 2.0], &[5.0, 3.0]).unwrap();
        assert_eq!(m.value, 0.5);
        assert_eq!(m.n_excluded, 1);
        assert!(mape(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn rmse_cases() {
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let p = [[0.2, 0.8], [0.9, 0.1], [0.4, 0.6], [0.7, 0.3]];
        assert_eq!(accuracy(&[1, 0, 1, 0], &p).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1, 1], &p).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 0], &[[0.5, 0.5], [0.5, 0.5]]).unwrap(), 1.0);
    }

    #[test]
    fn f1_cases() {
        // TP=2, FP=1, FN=1.
        let labels = [1, 1, 0, 1, 0];
        let p = [[0.1, 0.9], [0.2, 0.8], [0.3, 0.7], [0.6, 0.4], [0.9, 0.1]];
        assert!((f1(&labels, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&[1, 0], &[[0.0, 1.0], [1.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0], &[[0.9, 0.1], [0.8, 0.2]]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn rmse_symmetric(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        }

        #[test]
        fn classification_metrics_ignore_order_and_monotone_maps(
            rows in prop::collection::vec((0u8..2, 0.0f64..1.0), 1..30),
            rot in 0usize..30,
        ) {
            let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let probs: Vec<[f64; 2]> = rows.iter().map(|r| [1.0 - r.1, r.1]).collect();
            let acc = accuracy(&labels, &probs).unwrap();
            let f = f1(&labels, &probs).unwrap();

            let k = rot % labels.len();
            let mut l2 = labels.clone();
            let mut p2 = probs.clone();
            l2.rotate_left(k);
            p2.rotate_left(k);
            prop_assert_eq!(accuracy(&l2, &p2).unwrap(), acc);
            prop_assert_eq!(f1(&l2, &p2).unwrap(), f);

            // Strictly increasing map applied to both entries keeps the argmax.
            let p3: Vec<[f64; 2]> = probs.iter().map(|p| [p[0].powi(3) + 2.0, p[1].powi(3) + 2.0]).collect();
            prop_assert_eq!(accuracy(&labels, &p3).unwrap(), acc);
            prop_assert_eq!(f1(&labels, &p3).unwrap(), f);
        }

        #[test]
        fn mape_counts_partition(y in prop::collection::vec(prop_oneof![Just(0.0f64), 0.5f64..3.0], 1..20)) {
            prop_assume!(y.iter().any(|v| v.abs() >= MAPE_FLOOR));
            let yhat: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
            let m = mape(&y, &yhat).unwrap();
            let included = y.iter().filter(|v| v.abs() >= MAPE_FLOOR).count();
            prop_assert_eq!(m.n_excluded + included, y.len());
        }
    }
}
