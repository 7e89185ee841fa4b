//! Word problems on `S_k`: training with per-position supervision and
//! final-position accuracy at unseen lengths.

use m2rnn_core::SeededRng;

use crate::error::{Result, TrainError};
use crate::groups::{gen_sk_sequences, sk_group_table, GroupTable};
use crate::metrics::MetricRow;
use crate::model::{softmax_cross_entropy, ModelSpec, SequenceModel};
use crate::optim::AdamState;
use crate::trainer::{train_loop, Batch, OptimConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateTrackingConfig {
    pub model: ModelSpec,
    pub k: usize,
    pub train_len: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

pub struct TrainRun {
    pub model: SequenceModel,
    pub optimizer: AdamState,
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthAccuracy {
    pub length: usize,
    pub final_accuracy: f64,
    pub position_accuracy: f64,
    pub loss: f64,
}

pub fn batch_from_samples(g: &GroupTable, length: usize, count: usize, seed: u64) -> Batch {
    let samples = gen_sk_sequences(g, length, count, seed);
    Batch {
        tokens: samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
        labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
        batch: count,
        steps: length,
    }
}

/// Model whose vocabulary and classes are the `k!` group elements.
pub fn group_model(spec: ModelSpec, k: usize, seed: u64) -> Result<SequenceModel> {
    let order = sk_group_table(k)?.order();
    SequenceModel::init(
        ModelSpec {
            vocab: order,
            classes: order,
            ..spec
        },
        seed,
    )
}

pub fn train_state_tracking(cfg: &StateTrackingConfig) -> Result<TrainRun> {
    if cfg.train_len == 0 || cfg.batch == 0 {
        return Err(TrainError::Config("train_len and batch must be positive".into()));
    }
    let g = sk_group_table(cfg.k)?;
    let mut model = group_model(cfg.model, cfg.k, cfg.seed)?;
    let mut data = SeededRng::new(cfg.seed ^ 0x5eed_da7a);
    let (optimizer, metrics) = train_loop(&mut model, &cfg.optim, |_| {
        batch_from_samples(&g, cfg.train_len, cfg.batch, data.next_seed())
    })?;
    Ok(TrainRun {
        model,
        optimizer,
        metrics,
    })
}

/// Accuracy on `count` fresh sequences of one length, in chunks of at most 256.
pub fn evaluate_length(
    model: &SequenceModel,
    g: &GroupTable,
    length: usize,
    count: usize,
    seed: u64,
) -> Result<LengthAccuracy> {
    let mut rng = SeededRng::new(seed);
    let (mut final_hits, mut pos_hits, mut loss) = (0usize, 0usize, 0.0);
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(256);
        let b = batch_from_samples(g, length, n, rng.next_seed());
        let (logits, _) = model.forward(&b.tokens, n, length)?;
        let (l, _, correct) = softmax_cross_entropy(&logits, &b.labels);
        loss += l * n as f64;
        pos_hits += correct.iter().filter(|&&c| c).count();
        final_hits += (0..n).filter(|&i| correct[i * length + length - 1]).count();
        remaining -= n;
    }
    Ok(LengthAccuracy {
        length,
        final_accuracy: final_hits as f64 / count as f64,
        position_accuracy: pos_hits as f64 / (count * length) as f64,
        loss: loss / count as f64,
    })
}

pub fn evaluate_length_generalization(
    model: &SequenceModel,
    k: usize,
    lengths: &[usize],
    count: usize,
    seed: u64,
) -> Result<Vec<LengthAccuracy>> {
    if lengths.contains(&0) || count == 0 {
        return Err(TrainError::Config(
            "evaluation lengths and count must be positive".into(),
        ));
    }
    let g = sk_group_table(k)?;
    let mut rng = SeededRng::new(seed);
    lengths
        .iter()
        .map(|&len| evaluate_length(model, &g, len, count, rng.next_seed()))
        .collect()
}

/// Mean per-position accuracy of the last `window` training rows.
pub fn recent_train_accuracy(metrics: &[MetricRow], window: usize) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(window)..];
    tail.iter().map(|r| r.accuracy).sum::<f64>() / tail.len().max(1) as f64
}

pub const LENGTH_CSV_HEADER: &str = "length,final_accuracy,position_accuracy,loss";

pub fn write_length_csv(mut w: impl std::io::Write, rows: &[LengthAccuracy]) -> std::io::Result<()> {
    writeln!(w, "{LENGTH_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.length, r.final_accuracy, r.position_accuracy, r.loss
        )?;
    }
    Ok(())
}
