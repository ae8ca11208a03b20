//! Masked self-supervised training: a random share of the observed entries is
//! hidden from the model each batch and the loss is scored on exactly those.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Tape};
use crate::data::{SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::masking::{gen_training_mask, MaskPair};
use crate::model::T1Model;
use crate::rng::{derive_seed, domain, stream_rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_mask_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 300,
            patience: 30,
            train_mask_ratio: 0.4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be > 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.train_mask_ratio) {
            return fail(format!("train_mask_ratio must lie in [0, 1), got {}", self.train_mask_ratio));
        }
        Ok(())
    }
}

/// Mean squared error over the supervision set and the size of that set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    /// Zero means the batch has no supervised entries and must be skipped.
    pub count: usize,
}

/// Mean of `(x_hat - y)^2` over `{omega = 1, psi = 0}`; other positions are never read.
pub fn masked_mse_loss(x_hat: &Tensor, y: &Tensor, omega: &Tensor, psi: &Tensor) -> Result<MaskedLoss> {
    for (what, t) in [("y", y), ("omega", omega), ("psi", psi)] {
        if t.shape() != x_hat.shape() {
            return Err(Error::shape(
                "masked_mse_loss",
                format!("x_hat {:?} vs {what} {:?}", x_hat.shape(), t.shape()),
            ));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..x_hat.len() {
        if omega.data()[i] == 1.0 && psi.data()[i] == 0.0 {
            let d = x_hat.data()[i] - y.data()[i];
            sum += d * d;
            count += 1;
        }
    }
    Ok(MaskedLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    })
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, name, _)) = params.iter().find(|(_, _, e)| !e.grad.all_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let e = params.entry_mut(id);
            let n = e.value.len();
            for i in 0..n {
                let g = e.grad.data()[i];
                let m = self.beta1 * e.adam_m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * e.adam_v.data()[i] + (1.0 - self.beta2) * g * g;
                e.adam_m.data_mut()[i] = m;
                e.adam_v.data_mut()[i] = v;
                let update = self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                e.value.data_mut()[i] -= update;
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Loss and gradient sum of one batch, built from per-sample tapes.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: MaskedLoss,
    pub grads: ParamGrads,
}

/// Forward and backward over a batch with training mask `psi`.
///
/// Each sample gets its own tape; gradients are reduced in sample order, so the
/// result does not depend on thread count.
pub fn batch_gradients(model: &T1Model, params: &ParamStore, batch: &SeriesBatch) -> Result<BatchGradients> {
    let psi = batch
        .psi
        .clone()
        .unwrap_or_else(|| Tensor::ones(batch.x.shape().to_vec()));
    let pair = MaskPair::new(batch.omega.clone(), psi)?;
    let eff = pair.effective();
    let sup = pair.supervision();
    let count = sup.data().iter().filter(|&&v| v == 1.0).count();
    let n_params = params.len();
    if count == 0 {
        return Ok(BatchGradients {
            loss: MaskedLoss { value: 0.0, count: 0 },
            grads: ParamGrads::new(n_params),
        });
    }
    let weight = 1.0 / count as f64;
    let per_sample: Vec<(f64, ParamGrads)> = (0..batch.batch_size())
        .into_par_iter()
        .map(|b| {
            let mut tape = Tape::new();
            let y = batch.x.index_first(b);
            let out = model.forward_sample(&mut tape, params, &y, &eff.index_first(b))?;
            let loss = tape.masked_sq_err(out.x_hat, &y, &sup.index_first(b), weight)?;
            Ok((tape.value(loss).item(), tape.gradients(loss, n_params)?))
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::new(n_params);
    let mut value = 0.0;
    for (l, g) in &per_sample {
        value += l;
        grads.merge(g);
    }
    Ok(BatchGradients {
        loss: MaskedLoss { value, count },
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Seed of the training mask for one batch.
fn batch_mask_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(seed, &[domain::TRAINING, epoch as u64, batch as u64])
}

/// Window order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, domain::SHUFFLE, epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Fixed training-ratio masks over a window set, in chunks of `batch_size`.
fn masked_batches(windows: &[Window], batch_size: usize, ratio: f64, seed: u64) -> Result<Vec<SeriesBatch>> {
    windows
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| {
            let batch = SeriesBatch::from_windows(chunk)?;
            let psi = gen_training_mask(&batch.omega, ratio, derive_seed(seed, &[i as u64]))?.psi;
            batch.with_psi(psi)
        })
        .collect()
}

/// Pooled masked MSE of `batches` (sum of squared errors over total count).
pub fn masked_loss_over(model: &T1Model, params: &ParamStore, batches: &[SeriesBatch]) -> Result<MaskedLoss> {
    let mut sum = 0.0;
    let mut count = 0;
    for batch in batches {
        let (x_hat, _) = model.forward(params, batch)?;
        let psi = batch.psi.as_ref().expect("masked batch");
        let l = masked_mse_loss(&x_hat, &batch.x, &batch.omega, psi)?;
        sum += l.value * l.count as f64;
        count += l.count;
    }
    Ok(MaskedLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    })
}

/// Trains from fresh parameters seeded by `cfg.seed`.
pub fn train(model: &T1Model, train_set: &[Window], valid_set: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = model.init_params(cfg.seed);
    train_from(model, params, train_set, valid_set, cfg)
}

/// Trains starting from `params`. With an empty validation set the training
/// loss drives model selection.
pub fn train_from(
    model: &T1Model,
    mut params: ParamStore,
    train_set: &[Window],
    valid_set: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&params)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if valid_set.is_empty() {
        log::warn!("validation set is empty; selecting on training loss");
    }
    let valid_seed = derive_seed(cfg.seed, &[domain::TRAINING, u64::MAX]);
    let valid_batches = masked_batches(valid_set, cfg.batch_size, cfg.train_mask_ratio, valid_seed)?;

    let mut adam = Adam::new(cfg);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<Window> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = SeriesBatch::from_windows(&windows)?;
            let psi = gen_training_mask(&batch.omega, cfg.train_mask_ratio, batch_mask_seed(cfg.seed, epoch, bi))?.psi;
            let batch = batch.with_psi(psi)?;
            let g = batch_gradients(model, &params, &batch)?;
            if g.loss.count == 0 {
                log::debug!("epoch {epoch} batch {bi}: empty supervision set, skipped");
                continue;
            }
            if !g.loss.value.is_finite() {
                aborted = Some(format!("non-finite training loss at epoch {epoch}, batch {bi}"));
                break 'epochs;
            }
            params.accumulate(&g.grads);
            if let Err(e) = adam.step(&mut params) {
                aborted = Some(format!("epoch {epoch}, batch {bi}: {e}"));
                break 'epochs;
            }
            sum += g.loss.value * g.loss.count as f64;
            count += g.loss.count;
        }
        let train_loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let valid_loss = if valid_batches.is_empty() {
            train_loss
        } else {
            masked_loss_over(model, &params, &valid_batches)?.value
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        if !valid_loss.is_finite() {
            aborted = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    if let Some(reason) = &aborted {
        log::error!("training aborted: {reason}");
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_valid_loss: best_loss,
        stopped_early,
        aborted,
    })
}

/// Writes `epoch,train_loss,valid_loss` rows.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn loss_hand_cases() {
        let y = t(&[1.0, 2.0, 3.0]);
        let ones = t(&[1.0; 3]);
        let psi = t(&[0.0, 0.0, 1.0]);
        assert_eq!(masked_mse_loss(&y, &y, &ones, &psi).unwrap().value, 0.0);
        let pred = t(&[1.0, 4.0, 100.0]);
        let l = masked_mse_loss(&pred, &y, &ones, &psi).unwrap();
        assert_eq!((l.value, l.count), (2.0, 2));
        let none = masked_mse_loss(&pred, &y, &ones, &ones).unwrap();
        assert_eq!((none.value, none.count), (0.0, 0));
    }

    fn scalar_store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new([1], vec![w]).unwrap()).unwrap();
        s.entry_mut(id).grad = Tensor::new([1], vec![g]).unwrap();
        s
    }

    #[test]
    fn adam_first_step() {
        let mut s = scalar_store(0.0, 1.0);
        Adam::new(&TrainConfig::default()).step(&mut s).unwrap();
        let w = s.value("w").unwrap().item();
        // m_hat = v_hat = 1
        assert_eq!(w, -1e-3 / (1.0 + 1e-8));
        assert_eq!(s.get("w").unwrap().grad.item(), 0.0);

        let mut still = scalar_store(0.5, 0.0);
        Adam::new(&TrainConfig::default()).step(&mut still).unwrap();
        assert_eq!(still.value("w").unwrap().item(), 0.5);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut s = scalar_store(0.0, f64::NAN);
        let err = Adam::new(&TrainConfig::default()).step(&mut s).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
        assert_eq!(s.value("w").unwrap().item(), 0.0);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(20, 1, 3);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(20, 1, 3));
        assert_ne!(a, epoch_order(20, 1, 4));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            patience: 400,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_beta = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_beta.validate().is_err());
    }
}
