//! Optimisation loop shared by every task.

use m2rnn_core::ParamSet;

use crate::error::{Result, TrainError};
use crate::metrics::MetricRow;
use crate::model::{softmax_cross_entropy, SequenceModel, SKIP_DECAY};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::schedule::lr_schedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub floor_fraction: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    /// per-step bound on the carried state gradient of the matrix recurrence
    pub state_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            peak_lr: 3e-3,
            warmup_steps: 50,
            floor_fraction: 0.1,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            state_clip: Some(1.0),
        }
    }
}

/// One supervised batch: `batch` rows of `steps` tokens, one label per token.
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
}

/// Loss, gradients and per-position correctness for one batch.
pub fn loss_and_grads(
    model: &SequenceModel,
    b: &Batch,
    state_clip: Option<f64>,
) -> Result<(f64, SequenceModel, Vec<bool>)> {
    let (logits, cache) = model.forward(&b.tokens, b.batch, b.steps)?;
    let (loss, dlogits, correct) = softmax_cross_entropy(&logits, &b.labels);
    let grads = model.backward(&cache, &dlogits, state_clip)?;
    Ok((loss, grads, correct))
}

/// Runs `cfg.steps` AdamW steps on batches from `next_batch(step)`; one train row per step.
pub fn train_loop(
    model: &mut SequenceModel,
    cfg: &OptimConfig,
    mut next_batch: impl FnMut(usize) -> Batch,
) -> Result<(AdamState, Vec<MetricRow>)> {
    let mut state = AdamState::new(model);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = next_batch(step);
        let (loss, mut grads, correct) = loss_and_grads(model, &b, cfg.state_clip)?;
        if !loss.is_finite() || !grads.sum_sq().is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr, cfg.floor_fraction);
        adam_step(model, &grads, &mut state, lr, &cfg.adam, &SKIP_DECAY);
        model.project();
        rows.push(MetricRow {
            step,
            split: "train",
            loss,
            accuracy: fraction(&correct),
            lr,
            grad_norm,
        });
    }
    Ok((state, rows))
}

pub fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&c| c).count() as f64 / flags.len().max(1) as f64
}
