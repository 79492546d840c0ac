//! Optimization loop: Adam, reduce-on-plateau, thresholded early stopping.

use crate::data::Windows;
use crate::error::{config_err, contract_err, Result};
use crate::model::Tsrm;
use crate::nn::{ParamGrads, ParamStore, Session};
use crate::tasks::{apply_mask, forecast_loss, generate_mask, imputation_loss, MetricAccumulator, Task};
use crate::tensor::{Scalar, Tensor};
use crate::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: Scalar,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Relative val-MSE improvement needed to reset early stopping.
    pub early_stop_threshold: Scalar,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: Scalar,
    pub seed: u64,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub adam_eps: Scalar,
    /// Global gradient-norm clip; off when `None`.
    pub clip_grad_norm: Option<Scalar>,
    /// Worker threads per batch. Results depend on this value.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 20,
            early_stop_threshold: 0.01,
            early_stop_patience: 3,
            plateau_patience: 2,
            plateau_factor: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad_norm: None,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(config_err!("batch_size and jobs must be positive"));
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(config_err!("patience values must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(config_err!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(config_err!("Adam needs betas in [0, 1) and a positive epsilon"));
        }
        if self.clip_grad_norm.is_some_and(|c| c <= 0.0) {
            return Err(config_err!("clip_grad_norm must be positive when set"));
        }
        Ok(())
    }
}

/// What is optimized and how windows are prepared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "task")]
pub enum Objective {
    Forecast,
    Impute {
        ratio: Scalar,
        #[serde(default)]
        single_rm_weighting: bool,
    },
}

impl Objective {
    pub fn task(&self) -> Task {
        match self {
            Objective::Forecast => Task::Forecast,
            Objective::Impute { .. } => Task::Impute,
        }
    }
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState { step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }
}

/// One Adam update on every trainable parameter.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, lr: Scalar, cfg: &TrainConfig) -> Result<()> {
    for (id, p) in store.iter() {
        if p.trainable && grads.get(id).is_none() {
            return Err(contract_err!("trainable parameter {} received no gradient", p.name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(id).expect("checked above");
        let i = id.0;
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
        let w = p.value.data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: Scalar,
    pub best: Scalar,
    pub bad_epochs: usize,
    patience: usize,
    factor: Scalar,
}

impl PlateauScheduler {
    pub fn new(lr: Scalar, patience: usize, factor: Scalar) -> Self {
        PlateauScheduler { lr, best: Scalar::INFINITY, bad_epochs: 0, patience, factor }
    }

    /// Feeds one validation result and returns the learning rate to use next.
    pub fn step(&mut self, val_mse: Scalar) -> Scalar {
        if val_mse < self.best {
            self.best = val_mse;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` epochs without a relative improvement of at least
/// `threshold` over the best accepted value.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub best: Option<Scalar>,
    pub epochs_since_improvement: usize,
    /// Set once a non-finite value has been seen.
    pub saw_non_finite: bool,
    threshold: Scalar,
    patience: usize,
}

impl EarlyStopping {
    pub fn new(threshold: Scalar, patience: usize) -> Self {
        EarlyStopping { best: None, epochs_since_improvement: 0, saw_non_finite: false, threshold, patience }
    }

    pub fn check(&mut self, val_mse: Scalar) -> StopDecision {
        let improved = if !val_mse.is_finite() {
            self.saw_non_finite = true;
            log::warn!("validation MSE is {val_mse}; counted as no improvement");
            false
        } else {
            match self.best {
                None => true,
                Some(best) => val_mse < best * (1.0 - self.threshold),
            }
        };
        if improved {
            self.best = Some(val_mse);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Everything but the wall-clock time.
    pub fn same_values(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_mse.to_bits() == other.val_mse.to_bits()
            && self.val_mae.to_bits() == other.val_mae.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

/// Writes the history as CSV: `epoch,train_loss,val_mse,val_mae,lr,seconds`.
pub fn write_history_csv<W: std::io::Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_mse", "val_mae", "lr", "seconds"])
            .map_err(|e| Error::Data(format!("writing history: {e}")))?;
    }
    for r in history {
        w.serialize(r).map_err(|e| Error::Data(format!("writing history: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were retained.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

/// Mixes a base seed with stream coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Inputs, mask (1 = masked) and targets for a batch.
pub struct PreparedBatch {
    pub inputs: Tensor,
    pub mask: Option<Tensor>,
    pub targets: Tensor,
}

/// Masks imputation windows; the mask of each window is a function of
/// `(mask_seed, window start)` only.
pub fn prepare_batch(batch: crate::data::WindowBatch, objective: Objective, mask_seed: u64) -> Result<PreparedBatch> {
    match objective {
        Objective::Forecast => Ok(PreparedBatch { inputs: batch.inputs, mask: None, targets: batch.targets }),
        Objective::Impute { ratio, .. } => {
            let shape = batch.inputs.shape().to_vec();
            let (t, f) = (shape[1], shape[2]);
            let mut mask = Vec::with_capacity(batch.inputs.numel());
            for &start in &batch.starts {
                let m = generate_mask(t, f, ratio, derive_seed(mask_seed, &[start as u64]))?;
                mask.extend_from_slice(m.mask.data());
            }
            let mask = Tensor::new(shape, mask)?;
            let inputs = apply_mask(&batch.inputs, &mask)?;
            Ok(PreparedBatch { inputs, mask: Some(mask), targets: batch.targets })
        }
    }
}

/// Seed of the fixed validation/test masks.
pub fn eval_mask_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0xE7A1])
}

/// MSE/MAE of `model` over `windows`: all cells for forecasting, masked
/// cells only for imputation.
pub fn evaluate(model: &Tsrm, windows: &Windows, objective: Objective, mask_seed: u64, batch_size: usize) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::default();
    for batch in windows.batches(batch_size) {
        let b = prepare_batch(batch?, objective, mask_seed)?;
        let mut s = Session::eval(&model.params);
        let out = model.forward(&mut s, &b.inputs, b.mask.as_ref(), false)?;
        acc.add(s.tape.value(out.y), &b.targets, b.mask.as_ref())?;
    }
    acc.finish()
}

/// Loss and gradients of one shard of a batch.
fn shard_grads(model: &Tsrm, b: &PreparedBatch, objective: Objective, rng_seed: u64) -> Result<(Scalar, ParamGrads)> {
    let mut s = Session::new(&model.params, true, true, ChaCha8Rng::seed_from_u64(rng_seed));
    let out = model.forward(&mut s, &b.inputs, b.mask.as_ref(), false)?;
    let loss = match objective {
        Objective::Forecast => forecast_loss(&mut s.tape, out.y, &b.targets)?,
        Objective::Impute { ratio, single_rm_weighting } => {
            let mask = b.mask.as_ref().expect("imputation batches carry a mask");
            imputation_loss(&mut s.tape, out.y, &b.targets, mask, ratio, single_rm_weighting)?
        }
    };
    let value = s.tape.value(loss).item();
    let grads = s.backward(loss)?;
    Ok((value, grads))
}

fn slice_rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * row..(start + len) * row].to_vec())
}

/// Loss and summed-then-averaged gradients of one batch, split across
/// `jobs` threads in fixed shard order.
fn batch_grads(model: &Tsrm, b: &PreparedBatch, objective: Objective, jobs: usize, seed: u64) -> Result<(Scalar, ParamGrads)> {
    let n = b.inputs.shape()[0];
    let jobs = jobs.min(n).max(1);
    if jobs == 1 {
        return shard_grads(model, b, objective, derive_seed(seed, &[0]));
    }
    let per = n.div_ceil(jobs);
    let shards: Vec<(usize, usize)> = (0..n).step_by(per).map(|s| (s, per.min(n - s))).collect();
    let results: Vec<Result<(Scalar, ParamGrads)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(k, &(start, len))| {
                scope.spawn(move || {
                    let shard = PreparedBatch {
                        inputs: slice_rows(&b.inputs, start, len)?,
                        mask: b.mask.as_ref().map(|m| slice_rows(m, start, len)).transpose()?,
                        targets: slice_rows(&b.targets, start, len)?,
                    };
                    let (loss, mut g) = shard_grads(model, &shard, objective, derive_seed(seed, &[k as u64]))?;
                    let w = len as Scalar / n as Scalar;
                    g.scale(w);
                    Ok((loss * w, g))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = 0.0;
    let mut grads: Option<ParamGrads> = None;
    for r in results {
        let (l, g) = r?;
        total += l;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(g),
            None => grads = Some(g),
        }
    }
    Ok((total, grads.expect("at least one shard")))
}

/// Trains `model` in place. On return `model.params` holds the parameters of
/// the epoch with the lowest validation MSE.
pub fn train(model: &mut Tsrm, train_windows: &Windows, val_windows: &Windows, objective: Objective, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(crate::error::data_err!("training needs at least one train and one validation window"));
    }
    if let Objective::Impute { ratio, .. } = objective {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(config_err!("missing ratio r_m must lie strictly between 0 and 1, got {ratio}"));
        }
    }
    let mut adam = AdamState::new(&model.params);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor);
    let mut stopper = EarlyStopping::new(cfg.early_stop_threshold, cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;
    let val_mask_seed = eval_mask_seed(cfg.seed);
    let mut order = train_windows.clone();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        order.starts.clone_from(&train_windows.starts);
        order.shuffle(derive_seed(cfg.seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let train_mask_seed = derive_seed(cfg.seed, &[2, epoch as u64]);
        for (bi, batch) in order.batches(cfg.batch_size).enumerate() {
            let prepared = prepare_batch(batch?, objective, train_mask_seed)?;
            let n = prepared.inputs.shape()[0];
            let step_seed = derive_seed(cfg.seed, &[3, epoch as u64, bi as u64]);
            let (loss, mut grads) = batch_grads(model, &prepared, objective, cfg.jobs, step_seed)?;
            let norm = grads.global_norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training state at epoch {epoch}, batch {bi}: loss {loss}, lr {lr}, global grad norm {norm}; per-parameter grad norms: {}",
                    grad_norm_report(&model.params, &grads)
                )));
            }
            if let Some(max) = cfg.clip_grad_norm {
                grads.clip_global_norm(max);
            }
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg)?;
            loss_sum += loss as f64 * n as f64;
            seen += n;
        }
        let train_loss = loss_sum / seen as f64;
        let (val_mse, val_mae) = evaluate(model, val_windows, objective, val_mask_seed, cfg.batch_size.max(32))?;
        let record = EpochRecord { epoch, train_loss, val_mse, val_mae, lr: lr as f64, seconds: started.elapsed().as_secs_f64() };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, val mse {val_mse:.6}, val mae {val_mae:.6}, lr {lr:e} ({:.1}s)",
            record.seconds
        );
        history.push(record);
        if val_mse.is_finite() && best.as_ref().is_none_or(|b| val_mse < b.1) {
            best = Some((epoch, val_mse, model.params.clone()));
        }
        sched.step(val_mse as Scalar);
        if stopper.check(val_mse as Scalar) == StopDecision::Stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_mse, params) =
        best.ok_or_else(|| Error::Numeric("validation MSE was never finite; no checkpoint to keep".into()))?;
    model.params = params;
    Ok(TrainOutcome { history, best_epoch, best_val_mse, stopped_early })
}

fn grad_norm_report(store: &ParamStore, grads: &ParamGrads) -> String {
    store
        .iter()
        .filter_map(|(id, p)| {
            grads.get(id).map(|g| {
                let n: f64 = g.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                format!("{}={n:.3e}", p.name)
            })
        })
        .collect::<Vec<_>>()
        .join(", ")
}
