use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::training_loss;
use super::nets::{FitterNetworks, StepDiagnostics};
use super::TrainLossWeights;
use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::neural::{adam_step, zeros_like, AdamState, Checkpoint, Params};
use crate::par::Exec;
use crate::residuals::DataTerm;

/// Samples per gradient chunk. Chunks are reduced in a fixed order, so the
/// summed gradient does not depend on the worker count.
const CHUNK: usize = 8;
/// Upper bound on samples used for the epoch-0 loss row.
const BASELINE_SAMPLES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `anneal_factor` from this epoch on.
    pub anneal_epoch: usize,
    pub anneal_factor: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 300, lr: 1e-4, anneal_epoch: 200, anneal_factor: 0.1 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.anneal_factor > 0.0) {
            return Err(Error::BadConfig(format!("invalid training schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.anneal_epoch {
            self.lr * self.anneal_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean per-sample loss; epoch 0 is measured before any update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Lowest validation loss (training loss when there is no validation split).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub history: Vec<HistoryRow>,
    /// Samples skipped because their iterates left the valid domain.
    pub skipped: usize,
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::BehindCamera { .. } | Error::DegenerateInput(_))
}

/// Loss and parameter gradient of one sample, accumulated into `grad`.
fn sample_gradient(
    nets: &FitterNetworks,
    data: &DataTerm,
    rec: &DatasetRecord,
    weights: &TrainLossWeights,
    rng: &mut ChaCha8Rng,
    grad: &mut FitterNetworks,
) -> Result<f64> {
    let trace = nets.forward(data, &rec.obs, nets.config.n_iters, Some(rng), None)?;
    let (loss, dthetas) = training_loss(data, &trace.thetas, &rec.theta, &rec.obs, weights)?;
    nets.backward(&trace, &dthetas, grad)?;
    Ok(loss)
}

/// Mean per-sample loss in inference mode. Samples whose fit leaves the
/// valid domain are skipped.
pub fn mean_loss(
    nets: &FitterNetworks,
    data: &DataTerm,
    records: &[&DatasetRecord],
    weights: &TrainLossWeights,
    exec: Exec,
) -> Result<f64> {
    let losses = exec.map(records, |rec| -> Result<Option<f64>> {
        let trace = match nets.forward(data, &rec.obs, nets.config.n_iters, None, None) {
            Ok(t) => t,
            Err(e) if skippable(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        Ok(Some(training_loss(data, &trace.thetas, &rec.theta, &rec.obs, weights)?.0))
    });
    let mut sum = 0.0;
    let mut n = 0;
    for l in losses {
        if let Some(l) = l? {
            sum += l;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Adam on the mean per-sample loss over mini-batches. On return `nets`
/// holds the best checkpoint's weights.
#[allow(clippy::too_many_arguments)]
pub fn train(
    nets: &mut FitterNetworks,
    data: &DataTerm,
    train_set: &[&DatasetRecord],
    val_set: &[&DatasetRecord],
    weights: &TrainLossWeights,
    schedule: &TrainSchedule,
    seed: u64,
    exec: Exec,
    config_hash: u64,
) -> Result<TrainOutput> {
    schedule.validate()?;
    weights.validate()?;
    nets.check_compatible(data)?;
    if train_set.is_empty() {
        return Err(Error::BadConfig("empty training split".into()));
    }
    let mut adam = AdamState::new(nets.num_params(), schedule.lr);
    let mut step = 0u64;
    let mut skipped = 0usize;

    let baseline = &train_set[..train_set.len().min(BASELINE_SAMPLES)];
    let val0 = if val_set.is_empty() { None } else { Some(mean_loss(nets, data, val_set, weights, exec)?) };
    let train0 = mean_loss(nets, data, baseline, weights, exec)?;
    let mut history = vec![HistoryRow { epoch: 0, train_loss: train0, val_loss: val0, lr: schedule.lr_at(0) }];
    let mut best = nets.to_checkpoint(step, config_hash, Some(adam.clone()));
    let mut best_score = val0.unwrap_or(train0);
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=schedule.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        adam.lr = schedule.lr_at(epoch - 1);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
            let snapshot: &FitterNetworks = nets;
            let results = exec.map(&chunks, |chunk| -> Result<(FitterNetworks, f64, usize, usize)> {
                let mut grad = zeros_like(snapshot);
                let (mut loss, mut used, mut skip) = (0.0, 0, 0);
                for &i in chunk.iter() {
                    let rec = train_set[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f);
                    rng.set_stream(((epoch as u64) << 32) | (rec.id & 0xffff_ffff));
                    let mut g = zeros_like(snapshot);
                    match sample_gradient(snapshot, data, rec, weights, &mut rng, &mut g) {
                        Ok(l) => {
                            grad.accumulate(&g);
                            loss += l;
                            used += 1;
                        }
                        Err(e) if skippable(&e) => skip += 1,
                        Err(e) => return Err(e),
                    }
                }
                Ok((grad, loss, used, skip))
            });
            let mut total = zeros_like(nets);
            let (mut loss, mut used) = (0.0, 0usize);
            for r in results {
                let (g, l, u, s) = r.map_err(|e| match e {
                    Error::NonFiniteState(m) => Error::NonFiniteState(format!("epoch {epoch} batch {b}: {m}")),
                    e => e,
                })?;
                total.accumulate(&g);
                loss += l;
                used += u;
                skipped += s;
            }
            if used == 0 {
                continue;
            }
            let mut flat = total.flatten();
            let inv = 1.0 / used as f64;
            flat.iter_mut().for_each(|v| *v *= inv);
            if !loss.is_finite() || !flat.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState(format!("epoch {epoch} batch {b}: non-finite loss or gradient")));
            }
            let mut params = nets.flatten();
            adam_step(&mut params, &flat, &mut adam)?;
            nets.assign(&params);
            step += 1;
            epoch_sum += loss;
            epoch_n += used;
        }
        let train_loss = if epoch_n > 0 { epoch_sum / epoch_n as f64 } else { f64::NAN };
        let val_loss = if val_set.is_empty() { None } else { Some(mean_loss(nets, data, val_set, weights, exec)?) };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:?} lr {}", adam.lr);
        history.push(HistoryRow { epoch, train_loss, val_loss, lr: adam.lr });
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best_epoch = epoch;
            best = nets.to_checkpoint(step, config_hash, Some(adam.clone()));
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} training samples skipped (iterate left the valid domain)");
    }
    let last = nets.to_checkpoint(step, config_hash, Some(adam));
    nets.assign(&best.params);
    Ok(TrainOutput { best, best_epoch, last, history, skipped })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_history_csv(path: impl AsRef<Path>, rows: &[HistoryRow], config_hash: u64) -> Result<()> {
    let mut s = format!("# config_hash={config_hash:016x}\nepoch,train_loss,val_loss,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, fmt_opt(r.val_loss), r.lr);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_diagnostics_csv(path: impl AsRef<Path>, rows: &[StepDiagnostics], config_hash: u64) -> Result<()> {
    let mut s = format!("# config_hash={config_hash:016x}\niter,data_term,grad_norm,lambda_norm,gamma_norm,delta_norm\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iter, r.data_term, r.grad_norm, r.lambda_norm, r.gamma_norm, r.delta_norm
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}
