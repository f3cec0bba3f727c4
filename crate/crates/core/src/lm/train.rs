use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::softmax;
use super::{Gradients, ModelState, NextTokenLoss, Objective, Params, TrainMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Learning rate at the final step as a fraction of `lr`, reached by
    /// linear decay; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl TrainHyper {
    /// Settings used to pretrain the testbed.
    pub fn pretrain() -> Self {
        TrainHyper {
            epochs: 4,
            batch_size: 32,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 11,
            clip_norm: Some(1.0),
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Adam over the groups enabled in the gradient mask; other tensors are
/// never written.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    pub fn new(model: &ModelState, hyper: &TrainHyper) -> Self {
        Adam {
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mask = grads.mask();
        let g_all = grads.params().tensors();
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&g_all)
            .zip(m_all.iter_mut())
            .zip(v_all.iter_mut())
        {
            if !mask.enabled(p.group) {
                continue;
            }
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn grad_norm(grads: &Gradients) -> f64 {
    grads
        .groups()
        .into_iter()
        .flat_map(|g| grads.get(g).unwrap_or_default())
        .flat_map(|t| t.data.iter().copied())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Mini-batch Adam on `objective` over `seqs`, updating only `mask`.
/// Works on a copy: the input model is returned untouched on error.
pub fn fit(
    model: &ModelState,
    seqs: &[Vec<u32>],
    objective: &dyn Objective,
    mask: &TrainMask,
    hyper: &TrainHyper,
) -> Result<(ModelState, TrainLog)> {
    if hyper.batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let mut out = model.clone();
    out.mask = mask.clone();
    let mut log = TrainLog::default();
    if hyper.epochs == 0 || seqs.is_empty() || mask.is_frozen() {
        return Ok((out, log));
    }
    let mut adam = Adam::new(model, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let total_steps = hyper.epochs * seqs.len().div_ceil(hyper.batch_size);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, grads) = out.param_gradients(&batch, objective, mask)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: log.step_losses.len(),
                    loss,
                });
            }
            let scale = match hyper.clip_norm {
                Some(c) => {
                    let n = grad_norm(&grads);
                    if n > c {
                        c / n
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            let progress = log.step_losses.len() as f64 / (total_steps - 1).max(1) as f64;
            adam.lr = hyper.lr * (1.0 - (1.0 - hyper.final_lr_fraction) * progress);
            adam.step(&mut out.params, &grads, scale);
            log.step_losses.push(loss);
            epoch_sum += loss * batch.len() as f64;
            epoch_n += batch.len();
        }
        log.epoch_losses.push(epoch_sum / epoch_n as f64);
    }
    Ok((out, log))
}

/// Standard next-token pretraining of every parameter.
pub fn train_lm(
    model: &ModelState,
    lines: &[String],
    hyper: &TrainHyper,
) -> Result<(ModelState, TrainLog)> {
    let seqs = lines
        .iter()
        .map(|l| model.encode(l))
        .collect::<Result<Vec<_>>>()?;
    let mask = TrainMask::all(model.config.n_blocks);
    let (mut trained, log) = fit(model, &seqs, &NextTokenLoss, &mask, hyper)?;
    trained.mask = TrainMask::frozen(model.config.n_blocks);
    Ok((trained, log))
}

/// `exp` of the mean next-token negative log-likelihood.
pub fn perplexity(model: &ModelState, lines: &[String]) -> Result<f64> {
    let seqs = lines
        .iter()
        .map(|l| model.encode(l))
        .collect::<Result<Vec<_>>>()?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let pass = model.forward_batch(chunk)?;
        for &(st, len) in &pass.packed.spans {
            for p in 0..len.saturating_sub(1) {
                let row = st + p;
                let target = pass.packed.tokens[row + 1] as usize;
                let probs = softmax(pass.logits.row(row).as_slice().expect("row"));
                nll -= probs[target].ln();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation(
            "perplexity needs at least one predicted token".into(),
        ));
    }
    Ok((nll / count as f64).exp())
}
