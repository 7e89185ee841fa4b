//! Next-byte prediction on a raw byte corpus.

use m2rnn_core::SeededRng;

use crate::error::{Result, TrainError};
use crate::metrics::MetricRow;
use crate::model::{softmax_cross_entropy, ModelSpec, SequenceModel};
use crate::trainer::{train_loop, Batch, OptimConfig};

/// Byte values present in a corpus, mapped to dense indices in ascending byte order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteVocab {
    pub bytes: Vec<u8>,
    index: [Option<u16>; 256],
}

impl ByteVocab {
    pub fn from_corpus(corpus: &[u8]) -> Self {
        let mut present = [false; 256];
        corpus.iter().for_each(|&b| present[b as usize] = true);
        let bytes: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        let mut index = [None; 256];
        for (i, &b) in bytes.iter().enumerate() {
            index[b as usize] = Some(i as u16);
        }
        Self { bytes, index }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn encode(&self, corpus: &[u8]) -> Vec<usize> {
        corpus
            .iter()
            .map(|&b| self.index[b as usize].expect("byte in vocabulary") as usize)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharLmConfig {
    pub model: ModelSpec,
    pub batch: usize,
    pub seq_len: usize,
    pub optim: OptimConfig,
    pub eval_windows: usize,
    pub seed: u64,
}

pub struct CharLmRun {
    pub model: SequenceModel,
    pub vocab: ByteVocab,
    pub metrics: Vec<MetricRow>,
    /// mean next-byte loss on the held-out windows after training
    pub final_loss: f64,
}

/// Training and held-out token streams: the last tenth is held out when the
/// corpus is long enough to give it at least one full window.
fn split(ids: &[usize], seq_len: usize) -> (&[usize], &[usize]) {
    let cut = ids.len() - ids.len() / 10;
    if ids.len() - cut > seq_len && cut > seq_len {
        (&ids[..cut], &ids[cut..])
    } else {
        (ids, ids)
    }
}

fn window_batch(ids: &[usize], starts: &[usize], seq_len: usize) -> Batch {
    let mut tokens = Vec::with_capacity(starts.len() * seq_len);
    let mut labels = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        tokens.extend_from_slice(&ids[s..s + seq_len]);
        labels.extend_from_slice(&ids[s + 1..s + seq_len + 1]);
    }
    Batch {
        tokens,
        labels,
        batch: starts.len(),
        steps: seq_len,
    }
}

/// Mean loss over `windows` evenly spaced windows of `ids`.
pub fn evaluate_windows(model: &SequenceModel, ids: &[usize], seq_len: usize, windows: usize) -> Result<f64> {
    let span = ids.len() - seq_len - 1;
    let starts: Vec<usize> = (0..windows).map(|i| i * span / windows.max(1)).collect();
    let b = window_batch(ids, &starts, seq_len);
    let (logits, _) = model.forward(&b.tokens, b.batch, b.steps)?;
    Ok(softmax_cross_entropy(&logits, &b.labels).0)
}

pub fn train_char_lm(corpus: &[u8], cfg: &CharLmConfig) -> Result<CharLmRun> {
    if corpus.len() < cfg.seq_len + 2 {
        return Err(TrainError::Config(format!(
            "corpus of {} bytes is shorter than one window of {}",
            corpus.len(),
            cfg.seq_len + 1
        )));
    }
    if cfg.batch == 0 || cfg.seq_len == 0 || cfg.eval_windows == 0 {
        return Err(TrainError::Config(
            "batch, seq_len and eval_windows must be positive".into(),
        ));
    }
    let vocab = ByteVocab::from_corpus(corpus);
    let ids = vocab.encode(corpus);
    let (train, held_out) = split(&ids, cfg.seq_len);
    let spec = ModelSpec {
        vocab: vocab.len(),
        classes: vocab.len(),
        ..cfg.model
    };
    let mut model = SequenceModel::init(spec, cfg.seed)?;
    let mut rng = SeededRng::new(cfg.seed ^ 0xc0de_b17e);
    let span = train.len() - cfg.seq_len;
    let (_, mut metrics) = train_loop(&mut model, &cfg.optim, |_| {
        let starts: Vec<usize> = (0..cfg.batch).map(|_| rng.index(span)).collect();
        window_batch(train, &starts, cfg.seq_len)
    })?;
    let final_loss = evaluate_windows(&model, held_out, cfg.seq_len, cfg.eval_windows)?;
    metrics.push(MetricRow {
        step: cfg.optim.steps,
        split: "eval",
        loss: final_loss,
        accuracy: f64::NAN,
        lr: 0.0,
        grad_norm: 0.0,
    });
    Ok(CharLmRun {
        model,
        vocab,
        metrics,
        final_loss,
    })
}

const SUBJECTS: [&str; 8] = [
    "the cat",
    "a dog",
    "my aunt",
    "the robot",
    "our king",
    "a sailor",
    "the baker",
    "his twin",
];
const VERBS: [&str; 6] = ["saw", "found", "painted", "followed", "called", "fed"];
const OBJECTS: [&str; 7] = [
    "a fish",
    "the moon",
    "two birds",
    "an apple",
    "the river",
    "her boat",
    "a lamp",
];

/// Deterministic English-like text of at least `len` bytes.
///
/// Each line names a subject and later repeats it, so predicting the second
/// mention rewards carrying information across a few dozen bytes.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = SeededRng::new(seed);
    let mut out = String::with_capacity(len + 128);
    while out.len() < len {
        let s = SUBJECTS[rng.index(SUBJECTS.len())];
        let v = VERBS[rng.index(VERBS.len())];
        let o = OBJECTS[rng.index(OBJECTS.len())];
        let v2 = VERBS[rng.index(VERBS.len())];
        out.push_str(&format!("{s} {v} {o}, then {s} {v2} it again.\n"));
    }
    out.into_bytes()
}
