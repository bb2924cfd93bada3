//! Adapter-only training: masked next-token loss, AdamW with global-norm
//! clipping, linear warmup into cosine decay, and greedy evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{DecoderModel, ForwardExtras, Mode};
use crate::taskgen::{TaskKind, TaskSample, EOS};
use crate::tensor::{cross_entropy, no_grad, Float, Tensor};

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `cfg.lr` over
/// the warmup steps, then cosine down to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("lr_at needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let warmup = warmup_steps(total_steps, cfg.warmup_ratio);
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// AdamW state over a fixed list of parameters.
pub struct AdamW<T: Float> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: Vec<Tensor<T>>, cfg: &TrainConfig) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            v: m.clone(),
            m,
            params,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// L2 norm of all current gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.into_iter().map(|x| x.as_f64() * x.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// One update with gradients scaled by `grad_scale`. Parameters without
    /// a gradient are left untouched.
    pub fn step(&mut self, lr: f64, grad_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            let mut data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64() * grad_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let x = data[i].as_f64();
                data[i] = T::lit(x - lr * (update + self.weight_decay * x));
            }
        }
    }
}

/// Mean cross-entropy over the loss-masked positions of one sample.
pub fn sample_loss<T: Float>(
    model: &DecoderModel<T>,
    sample: &TaskSample,
    balance: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (inputs, labels) = sample.training_pairs();
    let mut extras = ForwardExtras::default();
    let logits = model.forward_with(&inputs, Mode::Adapted, &mut extras, false, balance)?;
    let positions: Vec<usize> = labels.iter().map(|&(p, _)| p).collect();
    let targets: Vec<usize> = labels.iter().map(|&(_, t)| t).collect();
    let loss = cross_entropy(&logits.index_rows(&positions)?, &targets)?;
    Ok((loss, extras.balance_loss))
}

/// One optimizer step on `batch`. Returns the batch-mean loss (without the
/// balance term).
pub fn train_step<T: Float>(
    model: &DecoderModel<T>,
    batch: &[TaskSample],
    opt: &mut AdamW<T>,
    lr: f64,
    cfg: &TrainConfig,
    balance_coef: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    opt.zero_grad();
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for sample in batch {
        let (loss, balance) = sample_loss(model, sample, balance_coef > 0.0)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Training {
                step: opt.steps_taken() as usize,
                loss: value,
            });
        }
        total += value;
        let mut objective = loss.scale(T::lit(inv));
        if let Some(b) = balance {
            objective = objective.add(&b.scale(T::lit(balance_coef * inv)))?;
        }
        objective.backward()?;
    }
    let mean = total * inv;
    let norm = opt.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Training {
            step: opt.steps_taken() as usize,
            loss: mean,
        });
    }
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    opt.step(lr, scale);
    Ok(mean)
}

/// Per-step record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// Mean loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let tail = &self.steps[n - window.clamp(1, n)..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }
}

pub fn total_steps(n_samples: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * n_samples.div_ceil(cfg.batch_size)
}

/// Train all adapter parameters of `model` on `data`. Each epoch visits the
/// data in an order drawn from `cfg.seed`. When `log` is given, one CSV
/// record `step,lr,loss` is written per step after a header line.
pub fn train<T: Float>(
    model: &DecoderModel<T>,
    data: &[TaskSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let total = total_steps(data.len(), cfg);
    let balance_coef = model.config.adapter.balance_loss_coef;
    let mut opt = AdamW::new(model.trainable_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    if let Some(w) = log.as_mut() {
        writeln!(w, "step,lr,loss")?;
    }
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TaskSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let lr = lr_at(step, total, cfg)?;
            let loss = train_step(model, &batch, &mut opt, lr, cfg, balance_coef)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{step},{lr:e},{loss}")?;
            }
            report.steps.push(StepRecord { step, lr, loss });
            step += 1;
        }
    }
    Ok(report)
}

/// Exact-match and loss over a held-out set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub exact_match: BTreeMap<TaskKind, f64>,
    pub counts: BTreeMap<TaskKind, usize>,
}

impl EvalMetrics {
    pub fn overall_exact_match(&self) -> f64 {
        let n: usize = self.counts.values().sum();
        let hits: f64 = self.counts.iter().map(|(t, &c)| self.exact_match[t] * c as f64).sum();
        hits / n as f64
    }
}

/// Greedy continuation of the prompt, cut after EOS.
pub fn complete<T: Float>(model: &DecoderModel<T>, sample: &TaskSample) -> Result<Vec<usize>> {
    let out = model.generate(&sample.prompt, sample.target.len() + 1, Some(EOS))?;
    Ok(out[sample.prompt.len()..].to_vec())
}

/// Greedy-decode every sample and compare `target ++ [EOS]` exactly.
pub fn evaluate<T: Float>(model: &DecoderModel<T>, dataset: &[TaskSample]) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut hits: BTreeMap<TaskKind, usize> = BTreeMap::new();
    let mut counts: BTreeMap<TaskKind, usize> = BTreeMap::new();
    let mut loss = 0.0;
    for sample in dataset {
        loss += no_grad(|| sample_loss(model, sample, false))?.0.item().as_f64();
        let mut want = sample.target.clone();
        want.push(EOS);
        *counts.entry(sample.task).or_default() += 1;
        let hit = complete(model, sample)? == want;
        *hits.entry(sample.task).or_default() += hit as usize;
    }
    let exact_match = counts
        .iter()
        .map(|(t, &c)| (*t, hits.get(t).copied().unwrap_or(0) as f64 / c as f64))
        .collect();
    Ok(EvalMetrics {
        loss: loss / dataset.len() as f64,
        exact_match,
        counts,
    })
}
