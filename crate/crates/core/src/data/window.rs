use serde::{Deserialize, Serialize};

use super::BasinRecord;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One lookback window of per-step `[x_t; y_t]` encoder inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub basin_id: String,
    pub start_index: usize,
    pub length: usize,
    /// `length × (D_x + 1)`, drivers followed by the response.
    pub inputs: Tensor,
    pub target_statics: Option<Vec<f64>>,
}

/// Slices `record` into windows starting at `0, stride, 2·stride, …` while
/// `start + lookback ≤ T`. Windows touching a day with any missing value are
/// dropped.
pub fn make_windows(record: &BasinRecord, lookback: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if lookback == 0 || stride == 0 {
        return Err(Error::arg(format!(
            "lookback and stride must be positive (got {lookback}, {stride})"
        )));
    }
    let t_len = record.len();
    if lookback > t_len {
        return Ok(Vec::new());
    }
    // Prefix count of incomplete days for O(1) window validity checks.
    let mut bad = vec![0usize; t_len + 1];
    for t in 0..t_len {
        bad[t + 1] = bad[t] + usize::from(!record.row_complete(t));
    }
    let width = record.drivers.first().map_or(0, Vec::len) + 1;
    let mut out = Vec::new();
    let mut start = 0;
    while start + lookback <= t_len {
        if bad[start + lookback] == bad[start] {
            let mut data = Vec::with_capacity(lookback * width);
            for t in start..start + lookback {
                data.extend_from_slice(&record.drivers[t]);
                data.push(record.response[t]);
            }
            out.push(WindowSample {
                basin_id: record.basin_id.clone(),
                start_index: start,
                length: lookback,
                inputs: Tensor::from_vec(lookback, width, data)?,
                target_statics: record.statics.clone(),
            });
        }
        start += stride;
    }
    Ok(out)
}
