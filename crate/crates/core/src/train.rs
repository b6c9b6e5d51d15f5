//! Surrogate-gradient training: AdamW, the warmup/cosine/cooldown schedule,
//! minibatch epochs, the fit loop and a finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SpikeMode, Tape};
use crate::config::{RunConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, forward_tape, stack_batch, update_running_stats, Model, TapeBn, TapeOptions};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Per-step learning rate: linear warmup from zero, cosine decay to
/// `min_lr`, then `min_lr` for the cooldown epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let warmup = cfg.warmup_epochs.min(cfg.epochs);
        let cooldown = cfg.cooldown_epochs.min(cfg.epochs - warmup);
        Self {
            base_lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: warmup * steps_per_epoch,
            decay_steps: (cfg.epochs - warmup - cooldown) * steps_per_epoch,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let k = step - self.warmup_steps;
        if k >= self.decay_steps {
            return self.min_lr;
        }
        let cos = (std::f64::consts::PI * k as f64 / self.decay_steps as f64).cos();
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + cos)
    }
}

/// AdamW moments for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// Decay applies to matrices and kernels only; missing gradients count as
/// zero. Frozen parameters are untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &[Option<Vec<f64>>], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let p = params.by_id_mut(id);
        if !p.trainable {
            continue;
        }
        let decay = if p.value.rank() >= 2 { state.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        if m.len() != p.numel() || g.as_ref().is_some_and(|g| g.len() != m.len()) {
            return Err(Error::dim(format!("gradient or moment shape mismatch for `{}`", p.name)));
        }
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g.as_ref().map_or(0.0, |g| g[i]);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            *w -= lr * decay * *w;
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Loss and gradients of one minibatch under hard spikes and batch-stat BN.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

pub fn batch_gradients(model: &Model, samples: &[&Tensor], labels: &[usize], smoothing: f64) -> Result<(StepOutput, Vec<(String, crate::autodiff::BatchStats)>)> {
    let mut tape = Tape::new();
    let input = stack_batch(&model.config, samples)?;
    let out = forward_tape(&mut tape, &model.params, &model.config, input, TapeOptions::train())?;
    let loss = tape.cross_entropy(out.logits, labels, smoothing)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?.params(&tape, model.params.len());
    Ok((StepOutput { loss: value, grads }, out.bn_stats))
}

/// Forward + backward + AdamW step on one minibatch; returns the loss.
pub fn train_step(
    model: &mut Model,
    samples: &[&Tensor],
    labels: &[usize],
    smoothing: f64,
    state: &mut OptimState,
    lr: f64,
) -> Result<f64> {
    let (out, stats) = batch_gradients(model, samples, labels, smoothing)?;
    adamw_step(&mut model.params, &out.grads, state, lr)?;
    update_running_stats(&mut model.params, &stats)?;
    Ok(out.loss)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean minibatch loss of one epoch and the learning rate of its last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub loss: f64,
    pub lr: f64,
}

/// One pass over `ds` in a seeded order.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimState,
    schedule: &Schedule,
    epoch: usize,
) -> Result<EpochLoss> {
    if ds.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(model.config.seed, epoch)));
    let steps = ds.len().div_ceil(cfg.batch_size);
    let (mut total, mut lr) = (0.0, 0.0);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        lr = schedule.lr(epoch * steps + b);
        let samples: Vec<&Tensor> = chunk.iter().map(|&i| &ds.inputs[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        total += chunk.len() as f64 * train_step(model, &samples, &labels, cfg.label_smoothing, state, lr)?;
    }
    Ok(EpochLoss {
        loss: total / ds.len() as f64,
        lr,
    })
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Inference-engine top-1 accuracy on the training set after the epoch.
    pub acc: f64,
}

pub struct FitOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Builds a model from `run` and trains it on `ds`. `on_epoch` sees every
/// epoch's metrics and the model after it; an error from it aborts the fit.
pub fn fit(
    run: &RunConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<FitOutcome> {
    run.validate()?;
    if ds.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if ds.num_classes != run.model.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("model has {} classes, dataset {}", run.model.num_classes, ds.num_classes),
        ));
    }
    let cfg = &run.train;
    let mut model = build_model(&run.model)?;
    let mut state = OptimState::new(&model.params, cfg);
    let schedule = Schedule::new(cfg, ds.len().div_ceil(cfg.batch_size));
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let e = train_epoch(&mut model, ds, cfg, &mut state, &schedule, epoch)?;
        let acc = model.compile()?.evaluate(ds)?.accuracy();
        let m = EpochMetrics {
            epoch,
            lr: e.lr,
            loss: e.loss,
            acc,
        };
        log::info!("epoch {epoch}: lr {:.3e} loss {:.4} acc {:.4}", m.lr, m.loss, m.acc);
        on_epoch(&m, &model)?;
        history.push(m);
        if cfg.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok(FitOutcome { model, history })
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

/// Settings of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSpec {
    pub sharpness: f64,
    pub eps: f64,
    pub probes: usize,
    pub smoothing: f64,
    pub seed: u64,
}

fn smooth_loss(params: &ParamSet, model: &Model, samples: &[&Tensor], labels: &[usize], spec: &GradCheckSpec) -> Result<(Tape, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let input = stack_batch(&model.config, samples)?;
    let opts = TapeOptions {
        bn: TapeBn::Batch,
        spike: SpikeMode::Smooth { sharpness: spec.sharpness },
    };
    let out = forward_tape(&mut tape, params, &model.config, input, opts)?;
    let loss = tape.cross_entropy(out.logits, labels, spec.smoothing)?;
    Ok((tape, loss))
}

/// Compares backward against central differences on randomly probed
/// trainable scalars, with every spike step replaced by its smooth ramp.
pub fn gradient_check(model: &Model, samples: &[&Tensor], labels: &[usize], spec: &GradCheckSpec) -> Result<GradCheck> {
    let (tape, loss) = smooth_loss(&model.params, model, samples, labels, spec)?;
    let grads = tape.backward(loss)?.params(&tape, model.params.len());
    let slots: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.numel()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut probes = Vec::with_capacity(spec.probes);
    let mut params = model.params.clone();
    for _ in 0..spec.probes {
        let (id, i) = slots[rng.random_range(0..slots.len())];
        let orig = params.by_id(id).value.data()[i];
        let eval = |x: f64, params: &mut ParamSet| -> Result<f64> {
            params.by_id_mut(id).value.data_mut()[i] = x;
            let (t, l) = smooth_loss(params, model, samples, labels, spec)?;
            Ok(t.value(l).data()[0])
        };
        let up = eval(orig + spec.eps, &mut params)?;
        let down = eval(orig - spec.eps, &mut params)?;
        params.by_id_mut(id).value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * spec.eps);
        let analytic = grads[id].as_ref().map_or(0.0, |g| g[i]);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        probes.push(GradProbe {
            param: params.by_id(id).name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheck { probes, max_rel_err })
}

/// Arctan width and softplus sharpness of the gradient-check network.
pub const GRAD_CHECK_SURROGATE_WIDTH: f64 = 0.5;
pub const GRAD_CHECK_SHARPNESS: f64 = 1.0;

/// Moves `model` to the point the gradient check probes: linear weights
/// rescaled to `1/sqrt(fan_in)` and every BN gamma drawn from `U(0.5, 1.5)`.
/// At the `0.02` init the batch-normalized loss curves like `1/|w|²` and
/// central differences stop resolving the slope.
pub fn grad_check_point(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..model.params.len() {
        let p = model.params.by_id_mut(id);
        if p.value.rank() == 2 {
            let f = 1.0 / (crate::params::LINEAR_INIT_STD * (p.shape()[0] as f64).sqrt());
            p.value.data_mut().iter_mut().for_each(|v| *v *= f);
        }
        if p.name.ends_with(".gamma") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
}
