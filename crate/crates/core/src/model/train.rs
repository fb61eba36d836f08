// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::optim::{clip_grad_norm, Adam};
use super::params::Model;
use super::real::Real;
use crate::corpus::DocumentSet;
use crate::error::{Error, Result};

/// Optimization hyperparameters. Every field is explicit in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_frac: 0.1,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("min_lr_frac must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to `min_lr_frac * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.min_lr_frac * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One optimizer step on `batch`. Returns the mean loss before the update.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    opt: &mut Adam,
    batch: &[&[u32]],
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut grads = Model::zeros(model.cfg)?;
    let loss = model.loss_and_grad(batch, Some(&mut grads))?;
    let step = opt.steps_taken() as usize;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    let norm = clip_grad_norm(&mut grads, clip_norm);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("gradient norm is {norm}"),
        });
    }
    opt.update(model, &grads, lr);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Checkpoint,
    /// `(step, mean loss over the logging window)`.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub steps_run: usize,
    /// Set when training stopped on divergence; `model` is the last good state.
    pub aborted: Option<String>,
    pub stopped_early: bool,
}

/// Wrap every document as `<eot> doc <eot>`, cut to `max_context + 1` tokens.
pub fn training_sequences(docs: &DocumentSet, eot: u32, max_context: usize) -> Vec<Vec<u32>> {
    docs.documents
        .iter()
        .map(|d| {
            let mut s = Vec::with_capacity(d.len() + 2);
            s.push(eot);
            s.extend_from_slice(d);
            s.push(eot);
            s.truncate(max_context + 1);
            s
        })
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Callback run every `every` steps; returning `true` stops training.
pub struct Probe<'a> {
    pub every: usize,
    pub check: &'a mut dyn FnMut(usize, &Checkpoint) -> bool,
}

/// Train a fresh model on `docs`. Fully determined by `seed`.
pub fn train(
    docs: &DocumentSet,
    eot: u32,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut probe: Option<Probe<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let seqs = training_sequences(docs, eot, model_cfg.max_context);
    if seqs.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::init(model_cfg, rng.random())?;
    let mut opt = Adam::new(model.n_params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::new();
    let mut window = (0.0, 0usize);
    let mut final_loss = f64::NAN;
    let mut aborted = None;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let mut batch: Vec<&[u32]> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&seqs[order[cursor]]);
            cursor += 1;
        }
        let last_good = model.clone();
        match train_step(&mut model, &mut opt, &batch, cfg.lr_at(step), cfg.clip_norm) {
            Ok(loss) => {
                final_loss = loss;
                window.0 += loss;
                window.1 += 1;
            }
            Err(Error::Diverged { step: _, detail }) => {
                model = last_good;
                aborted = Some(format!("diverged at step {step}: {detail}"));
                log::warn!("training aborted at step {step}: {detail}");
                break;
            }
            Err(e) => return Err(e),
        }
        steps_run = step + 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let mean = window.0 / window.1.max(1) as f64;
            log::info!("step {:>6}  loss {:.4}  lr {:.2e}", step + 1, mean, cfg.lr_at(step));
            losses.push((step + 1, mean));
            window = (0.0, 0);
        }
        if let Some(p) = probe.as_mut() {
            if p.every > 0 && (step + 1) % p.every == 0 && (p.check)(step + 1, &model) {
                stopped_early = true;
                break;
            }
        }
    }
    if window.1 > 0 {
        losses.push((steps_run, window.0 / window.1 as f64));
    }
    Ok(TrainOutcome {
        model,
        losses,
        final_loss,
        steps_run,
        aborted,
        stopped_early,
    })
}
