//! RMSProp training with validation-based early stopping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::save_checkpoint;
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::layers::Net;
use crate::model::Model;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight-decay coefficient α.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps, for desk-scale runs.
    pub max_steps: Option<usize>,
    /// Consecutive validation increases that stop training.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 10,
            max_epochs: 100,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            seed: 0,
            max_steps: None,
            patience: 2,
        }
    }
}

impl TrainConfig {
    /// Defaults with the desk-scale batch size of 4.
    pub fn desk() -> Self {
        TrainConfig { batch_size: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            // lr = 0 is allowed as a no-op run.
            if self.learning_rate != 0.0 {
                return bad("learning_rate must be > 0");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms_decay must be in [0, 1)");
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        Ok(())
    }
}

/// One RMSProp update with a momentum buffer on the scaled step:
/// `s = ρs + (1-ρ)g²`, `m = μm + lr·g/√(s+eps)`, `p -= m`.
/// Every entry must carry a gradient; gradients are cleared afterwards.
pub fn rmsprop_step(store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
    if let Some(name) = store.iter().find(|(_, t)| t.grad.is_none()).map(|(n, _)| n.to_string()) {
        return Err(Error::MissingGradient(name));
    }
    let (rho, mu, lr, eps) = (cfg.rms_decay, cfg.momentum, cfg.learning_rate, cfg.rms_eps);
    for (_, t, st) in store.iter_mut() {
        let g = t.grad.take().expect("checked above");
        let p = t.data_mut();
        for i in 0..p.len() {
            let s = rho * st.square_avg[i] + (1.0 - rho) * g[i] * g[i];
            st.square_avg[i] = s;
            let m = mu * st.momentum[i] + lr * g[i] / (s + eps).sqrt();
            st.momentum[i] = m;
            p[i] -= m;
        }
    }
    Ok(())
}

/// Total loss of one sample and the gradient for every parameter.
pub fn sample_gradients(model: &Model, sample: &SampleRecord, alpha: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let bound = model.params.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(sample.image.clone());
    let out = model.forward(&net, x)?;
    let terms = model.loss(&g, &out, &sample.density, alpha)?;
    let loss = g.value(terms.total).data()[0];
    g.backward(terms.total)?;
    Ok((loss, model.params.gradients(&g, &bound)))
}

/// Total loss of one sample, forward only.
pub fn sample_loss(model: &Model, sample: &SampleRecord, alpha: f64) -> Result<f64> {
    let g = Graph::new();
    let bound = model.params.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(sample.image.clone());
    let out = model.forward(&net, x)?;
    let terms = model.loss(&g, &out, &sample.density, alpha)?;
    let loss = g.value(terms.total).data()[0];
    Ok(loss)
}

#[cfg(feature = "parallel")]
fn map_samples<T: Send>(samples: &[&SampleRecord], f: impl Fn(&SampleRecord) -> Result<T> + Sync) -> Result<Vec<T>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_samples<T: Send>(samples: &[&SampleRecord], f: impl Fn(&SampleRecord) -> Result<T> + Sync) -> Result<Vec<T>> {
    samples.iter().map(|s| f(s)).collect()
}

/// Mean loss and mean gradients over a minibatch. Per-sample results are
/// reduced in batch order, so the result does not depend on threading.
pub fn batch_gradients(model: &Model, batch: &[&SampleRecord], alpha: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty minibatch".into()));
    }
    let results = map_samples(batch, |s| sample_gradients(model, s, alpha))?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty");
    for (l, gs) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss * scale, grads))
}

/// Mean total loss over `samples`.
pub fn mean_loss(model: &Model, samples: &[SampleRecord], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let refs: Vec<&SampleRecord> = samples.iter().collect();
    let losses = map_samples(&refs, |s| sample_loss(model, s, alpha))?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Set on the last step of an epoch when a validation set exists.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    MaxSteps,
    /// Validation loss rose for `patience` consecutive epochs.
    EarlyStop,
    /// A non-finite loss appeared; parameters were rolled back.
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainHistory {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.train_loss)
    }

    /// `step,train_loss,val_loss` rows; empty `val_loss` off epoch ends.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        for s in &self.steps {
            let val = s.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", s.step, s.train_loss, val);
        }
        out
    }
}

fn persist(store: &ParamStore, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => save_checkpoint(store, p),
        None => Ok(()),
    }
}

/// Trains `model` in place. Minibatches are reshuffled every epoch from
/// `cfg.seed`. With a validation set, the lowest-validation parameters are
/// kept (and written to `checkpoint`) and training stops after `patience`
/// consecutive increases; without one it runs to `max_epochs`/`max_steps`.
pub fn train(
    model: &mut Model,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let alpha = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = Vec::new();
    let mut last_good = model.params.clone();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut prev_val: Option<f64> = None;
    let mut rises = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, alpha)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                model.params = best.as_ref().map(|b| b.2.clone()).unwrap_or(last_good);
                stop = StopReason::NonFinite;
                break 'epochs;
            }
            last_good = model.params.clone();
            model.params.zero_grads();
            model.params.accumulate_grads(&grads, 1.0);
            rmsprop_step(&mut model.params, cfg)?;
            steps.push(StepRecord { step, epoch, train_loss: loss, val_loss: None });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = StopReason::MaxSteps;
                break;
            }
        }
        if !val_set.is_empty() {
            let val = mean_loss(model, val_set, alpha)?;
            if let Some(last) = steps.last_mut() {
                last.val_loss = Some(val);
            }
            if !val.is_finite() {
                model.params = best.as_ref().map(|b| b.2.clone()).unwrap_or(last_good);
                stop = StopReason::NonFinite;
                break;
            }
            if best.as_ref().is_none_or(|b| val < b.1) {
                best = Some((epoch, val, model.params.clone()));
                persist(&model.params, checkpoint)?;
            }
            rises = if prev_val.is_some_and(|p| val > p) { rises + 1 } else { 0 };
            prev_val = Some(val);
            if rises >= cfg.patience {
                stop = StopReason::EarlyStop;
                break;
            }
        }
        if stop == StopReason::MaxSteps {
            break;
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((e, v, params)) => {
            if stop != StopReason::NonFinite {
                model.params = params;
            }
            (Some(e), Some(v))
        }
        None => {
            persist(&model.params, checkpoint)?;
            (steps.last().map(|s| s.epoch), None)
        }
    };
    Ok(TrainHistory { steps, stop, best_epoch, best_val_loss })
}
