//! Mini-batch training loop with held-out evaluation.

use super::loss::{dice_loss_value, generalized_dice_loss, LossConfig};
use super::optim::{AdamW, AdamWConfig};
use super::synth::{split_indices, standardize, SynthSample};
use crate::error::{Error, Result};
use crate::layers::{apply_stat_updates, Ctx};
use crate::metrics::dice_score;
use crate::model::Model;
use crate::ops::norm::{Mode, RunningStats};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Random horizontal and vertical flips of training batches.
    pub augment: bool,
    /// Recompute batch-norm statistics from the training split after each epoch.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            optim: AdamWConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            augment: false,
            recalibrate_bn: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,val_dice,seed";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.epochs {
            writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.seed
            )
            .expect("string write");
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Stacks standardized images and masks of the given samples into batches.
pub fn make_batch<T: Float>(data: &[SynthSample<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = idx.iter().map(|&i| standardize(&data[i].image)).collect();
    let masks: Vec<&Tensor<T>> = idx.iter().map(|&i| &data[i].mask).collect();
    Ok((Tensor::stack(&images.iter().collect::<Vec<_>>())?, Tensor::stack(&masks)?))
}

fn flip<T: Float>(x: &Tensor<T>, vertical: bool) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = if vertical { (h - 1 - y, xx) } else { (y, w - 1 - xx) };
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Mean loss and mean per-image Dice of eval-mode predictions.
pub fn evaluate<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    data: &[SynthSample<T>],
    idx: &[usize],
    batch: usize,
    loss: &LossConfig,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
    for chunk in idx.chunks(batch.max(1)) {
        let (x, r) = make_batch(data, chunk)?;
        let y = model.predict(params, &x)?;
        loss_sum += dice_loss_value(&y, &r, loss.eps)? * chunk.len() as f64;
        for b in 0..chunk.len() {
            dice_sum += dice_score(&y.select_batch(&[b])?, &r.select_batch(&[b])?)?;
        }
    }
    let n = idx.len().max(1) as f64;
    Ok((loss_sum / n, dice_sum / n))
}

fn non_finite_report<T: Float>(
    params: &ParamStore<T>,
    grads: &Grads<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> String {
    if !x.is_finite() {
        return "input batch".into();
    }
    if let Some(name) = params.first_non_finite() {
        return format!("parameter {name}");
    }
    if !y.is_finite() {
        return "model output".into();
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return format!("gradient of {}", params.slot(id).name);
        }
    }
    "loss only".into()
}

/// Replaces every batch-norm running estimate with the average batch
/// statistics of the current weights over `idx`.
pub fn recalibrate_bn<T: Float>(
    model: &Model,
    params: &mut ParamStore<T>,
    data: &[SynthSample<T>],
    idx: &[usize],
    batch: usize,
) -> Result<()> {
    for bn in model.batch_norms() {
        let fresh = RunningStats::<T>::new(params.get(bn.running_mean).len());
        params.set(bn.running_mean, fresh.mean)?;
        params.set(bn.running_var, fresh.var)?;
        params.set(bn.updates, Tensor::zeros(&[1]))?;
    }
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = make_batch(data, chunk)?;
        let mut ctx = Ctx::new(&*params, Mode::Train);
        ctx.bn_momentum = None;
        model.forward(&mut ctx, &x)?;
        let updates = ctx.stat_updates;
        apply_stat_updates(params, updates)?;
    }
    Ok(())
}

/// Trains on a deterministic 75/25 split of `data`, returning one record per epoch.
pub fn train<T: Float>(
    model: &Model,
    params: &mut ParamStore<T>,
    data: &[SynthSample<T>],
    cfg: &TrainConfig,
) -> Result<History> {
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig(vec!["batch must be positive".into()]));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig(vec![format!(
            "{} samples are too few for a train/val split",
            data.len()
        )]));
    }
    let mut opt = AdamW::new(params, cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = Grads::zeros_like(params);
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let (mut x, mut r) = make_batch(data, chunk)?;
            if cfg.augment {
                for vertical in [false, true] {
                    if rng.gen_bool(0.5) {
                        x = flip(&x, vertical);
                        r = flip(&r, vertical);
                    }
                }
            }
            let mut ctx = Ctx::new(&*params, Mode::Train);
            let (y, cache) = model.forward(&mut ctx, &x)?;
            let updates = ctx.stat_updates;
            let loss = generalized_dice_loss(&y, &r, cfg.loss.eps);
            grads.zero();
            let loss = match loss {
                Ok(l) if l.value.is_finite() => l,
                other => {
                    let value = other.map(|l| l.value).unwrap_or(f64::NAN);
                    return Err(Error::NonFinite(format!(
                        "loss {value} at epoch {epoch} step {step}; first non-finite: {}",
                        non_finite_report(params, &grads, &x, &y)
                    )));
                }
            };
            model.backward(params, &cache, &loss.grad, &mut grads)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient at epoch {epoch} step {step}; first non-finite: {}",
                    non_finite_report(params, &grads, &x, &y)
                )));
            }
            drop(cache);
            opt.step(params, &grads)?;
            apply_stat_updates(params, updates)?;
            loss_sum += loss.value * chunk.len() as f64;
        }
        if cfg.recalibrate_bn {
            recalibrate_bn(model, params, data, &train_idx, cfg.batch)?;
        }
        let (val_loss, val_dice) = evaluate(model, params, data, &val_idx, cfg.batch, &cfg.loss)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            val_dice,
            seed: cfg.seed,
        });
    }
    Ok(history)
}
