//! Forecasting and imputation objectives, mask generation and metrics.

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Value written into masked cells.
pub const MASK_VALUE: Scalar = -1.0;

/// The missing ratios evaluated for imputation.
pub const IMPUTATION_RATIOS: [Scalar; 4] = [0.125, 0.25, 0.375, 0.5];

/// The forecasting horizons evaluated for forecasting.
pub const FORECAST_HORIZONS: [usize; 4] = [96, 192, 336, 720];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecast,
    Impute,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Forecast => "forecast",
            Task::Impute => "impute",
        })
    }
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{what}: prediction {:?} and target {:?} differ in shape", a, b));
    }
    Ok(())
}

/// `|e| + e^2` per cell.
fn l1_plus_l2(t: &mut Tape, e: Var) -> Var {
    let a = t.abs(e);
    let s = t.square(e);
    t.add(a, s).expect("same shape")
}

/// Forecasting objective: `(1/(F H)) sum_i (|yhat_i - y_i|_1 + |yhat_i - y_i|_2^2)`,
/// averaged over the batch. `yhat` and `y` are `[.., H, F]`.
pub fn forecast_loss(t: &mut Tape, yhat: Var, y: &Tensor) -> Result<Var> {
    check_same_shape(t.shape(yhat), y.shape(), "forecast loss")?;
    let yv = t.constant(y.clone());
    let e = t.sub(yhat, yv)?;
    let l = l1_plus_l2(t, e);
    Ok(t.mean(l))
}

/// Imputation objective on `[.., T, F]` with a 0/1 mask of the same shape.
///
/// `L_m = sum |m*e| + (m*e)^2 / (r_m F T)`, `L_u` likewise over `1 - m` with
/// `1/((1 - r_m) F T)`, and the total is `L_m / r_m + L_u`. With
/// `single_rm_weighting` the outer `1/r_m` is dropped. Batch entries are
/// averaged.
pub fn imputation_loss(t: &mut Tape, yhat: Var, y: &Tensor, mask: &Tensor, ratio: Scalar, single_rm_weighting: bool) -> Result<Var> {
    check_ratio(ratio)?;
    check_same_shape(t.shape(yhat), y.shape(), "imputation loss")?;
    check_same_shape(mask.shape(), y.shape(), "imputation mask")?;
    let yv = t.constant(y.clone());
    let e = t.sub(yhat, yv)?;
    let m = t.constant(mask.clone());
    let keep = t.constant(mask.map(|v| 1.0 - v));
    let me = t.mul(e, m)?;
    let ue = t.mul(e, keep)?;
    let lm = l1_plus_l2(t, me);
    let lm = t.mean(lm);
    let lu = l1_plus_l2(t, ue);
    let lu = t.mean(lu);
    let outer = if single_rm_weighting { 1.0 } else { 1.0 / ratio };
    let lm = t.mul_scalar(lm, outer / ratio);
    let lu = t.mul_scalar(lu, 1.0 / (1.0 - ratio));
    t.add(lm, lu)
}

fn check_ratio(ratio: Scalar) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(config_err!("missing ratio r_m must lie strictly between 0 and 1, got {ratio}"));
    }
    Ok(())
}

/// A binary imputation mask over one `[T, F]` window (1 = masked).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub mask: Tensor,
    pub ratio: Scalar,
    pub seed: u64,
}

impl MaskSet {
    pub fn masked_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Masks `round(F T r_m)` cells chosen uniformly without replacement.
pub fn generate_mask(len: usize, features: usize, ratio: Scalar, seed: u64) -> Result<MaskSet> {
    check_ratio(ratio)?;
    let cells = len * features;
    if cells == 0 {
        return Err(config_err!("cannot mask an empty window"));
    }
    let count = ((cells as f64) * ratio as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; cells];
    for i in sample(&mut rng, cells, count.min(cells)) {
        data[i] = 1.0;
    }
    Ok(MaskSet { mask: Tensor::new(vec![len, features], data)?, ratio, seed })
}

/// Writes [`MASK_VALUE`] into every masked cell of `x`.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same_shape(x.shape(), mask.shape(), "apply mask")?;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0.0 { MASK_VALUE } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Running MSE/MAE over many windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    count: usize,
}

impl MetricAccumulator {
    /// Adds all cells, or only those with `mask != 0` when a mask is given.
    pub fn add(&mut self, yhat: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> Result<()> {
        check_same_shape(yhat.shape(), y.shape(), "metrics")?;
        if let Some(m) = mask {
            check_same_shape(m.shape(), y.shape(), "metrics mask")?;
        }
        for (i, (&a, &b)) in yhat.data().iter().zip(y.data()).enumerate() {
            if mask.is_some_and(|m| m.data()[i] == 0.0) {
                continue;
            }
            let e = (a - b) as f64;
            self.sum_sq += e * e;
            self.sum_abs += e.abs();
            self.count += 1;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(mse, mae)`. Errors when no cell was scored.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(contract_err!("no cells were scored; an imputation mask must select at least one cell"));
        }
        let n = self.count as f64;
        Ok((self.sum_sq / n, self.sum_abs / n))
    }
}

/// `(mse, mae)` over all cells, or over masked cells only when `mask` is given.
pub fn metrics(yhat: &Tensor, y: &Tensor, mask: Option<&Tensor>) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::default();
    acc.add(yhat, y, mask)?;
    acc.finish()
}

/// One evaluation result row.
///
/// CSV column order: `split, task, setting, epoch, config_hash, mse, mae`.
/// `setting` is the horizon (forecast), the missing ratio (imputation) or
/// `AVG` for an averaged row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub task: Task,
    pub setting: String,
    pub epoch: Option<usize>,
    pub config_hash: String,
    pub mse: f64,
    pub mae: f64,
}

impl EvalRecord {
    pub const CSV_HEADER: [&'static str; 7] = ["split", "task", "setting", "epoch", "config_hash", "mse", "mae"];

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }

    /// Mean of `records` under the setting label `AVG`.
    pub fn average(records: &[EvalRecord]) -> Result<EvalRecord> {
        let first = records.first().ok_or_else(|| contract_err!("cannot average zero evaluation records"))?;
        let n = records.len() as f64;
        Ok(EvalRecord {
            split: first.split.clone(),
            task: first.task,
            setting: "AVG".into(),
            epoch: first.epoch,
            config_hash: first.config_hash.clone(),
            mse: records.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: records.iter().map(|r| r.mae).sum::<f64>() / n,
        })
    }
}

/// Writes records as RFC-4180 CSV with a header row.
pub fn write_records_csv<W: std::io::Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| crate::Error::Data(format!("writing CSV: {e}")))?;
    }
    if records.is_empty() {
        w.write_record(EvalRecord::CSV_HEADER).map_err(|e| crate::Error::Data(format!("writing CSV: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
