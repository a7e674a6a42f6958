use std::ops::Range;

use crate::error::{MsmfError, Result};

use super::MultiModalDataset;

/// Chronological train/validation/test partition of the window indices.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: MultiModalDataset,
    pub val: MultiModalDataset,
    pub test: MultiModalDataset,
    pub train_windows: Range<usize>,
    pub val_windows: Range<usize>,
    pub test_windows: Range<usize>,
}

/// Splits on window index without shuffling: sizes are
/// `floor(N_w * train_frac)`, `floor(N_w * val_frac)`, remainder to test.
///
/// `_seed` is accepted for interface symmetry; the split is deterministic.
pub fn split_dataset(
    ds: &MultiModalDataset,
    train_frac: f64,
    val_frac: f64,
    _seed: u64,
) -> Result<DatasetSplit> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(MsmfError::Config(format!(
            "split fractions {train_frac}/{val_frac} must be positive and sum below 1"
        )));
    }
    let n_w = ds.n_windows();
    let n_train = (n_w as f64 * train_frac).floor() as usize;
    let n_val = (n_w as f64 * val_frac).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_w {
        return Err(MsmfError::Config(format!(
            "split of {n_w} windows into {n_train}/{n_val}/{} leaves an empty part",
            n_w.saturating_sub(n_train + n_val)
        )));
    }
    let train_windows = 0..n_train;
    let val_windows = n_train..n_train + n_val;
    let test_windows = n_train + n_val..n_w;
    Ok(DatasetSplit {
        train: ds.window_range(train_windows.start, train_windows.end)?,
        val: ds.window_range(val_windows.start, val_windows.end)?,
        test: ds.window_range(test_windows.start, test_windows.end)?,
        train_windows,
        val_windows,
        test_windows,
    })
}
