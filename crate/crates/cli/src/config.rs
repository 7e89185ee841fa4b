//! Flat TOML run configuration with `KEY=VALUE` overrides.

use std::path::{Path, PathBuf};

use m2rnn_core::{ConvInit, NormMode, TransitionInit};
use m2rnn_tp::{Schedule, Scheme};
use m2rnn_train::{AdamConfig, ModelKind, ModelSpec, OptimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// word problems on `S_k`
    GroupWords,
    /// next-byte prediction on a raw corpus
    CharLm,
}

impl std::str::FromStr for Task {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s_k" => Ok(Self::GroupWords),
            "char-lm" => Ok(Self::CharLm),
            _ => Err(CliError::Config(format!(
                "unknown task {s:?} (expected s_k or char-lm)"
            ))),
        }
    }
}

/// Every key any command reads. Keys a command does not use are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub model: String,
    pub d_model: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub hidden: usize,
    pub norm: String,
    pub transition_init: String,
    pub conv_init: String,
    pub init_std: f64,
    pub decay_bias: f64,

    pub task: String,
    pub group_k: usize,
    pub train_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub floor_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// `0` disables state-gradient clipping
    pub state_clip: f64,

    pub eval_lengths: Vec<usize>,
    pub eval_count: usize,
    /// empty means `<out>/checkpoint.m2rn`
    pub checkpoint: String,

    /// empty means the built-in synthetic corpus of `corpus_bytes` bytes
    pub corpus: String,
    pub corpus_bytes: usize,
    pub seq_len: usize,
    pub eval_windows: usize,

    pub tp_scheme: String,
    pub tp_worlds: Vec<usize>,
    pub tp_schedule: String,
    pub tp_batch: usize,
    pub tp_steps: usize,

    pub gradcheck_seeds: usize,
    /// negative control: perturbs one analytic gradient before comparing
    pub corrupt_backward: bool,

    pub pc_heads: Vec<usize>,
    pub pc_key_dims: Vec<usize>,
    pub pc_value_dims: Vec<usize>,
    pub pc_d_models: Vec<usize>,

    pub bench_batches: Vec<usize>,
    pub bench_heads: Vec<usize>,
    pub bench_key_dims: Vec<usize>,
    pub bench_value_dims: Vec<usize>,
    pub bench_steps: usize,
    pub bench_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optim = OptimConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: "m2rnn".into(),
            d_model: 32,
            heads: 4,
            key_dim: 8,
            value_dim: 8,
            hidden: 64,
            norm: "concatenated".into(),
            transition_init: "identity".into(),
            conv_init: "uniform".into(),
            init_std: 0.02,
            decay_bias: 2.0,
            task: "s_k".into(),
            group_k: 3,
            train_len: 32,
            batch: 32,
            steps: optim.steps,
            peak_lr: optim.peak_lr,
            warmup_steps: optim.warmup_steps,
            floor_fraction: optim.floor_fraction,
            weight_decay: adam.weight_decay,
            beta1: adam.betas.0,
            beta2: adam.betas.1,
            adam_eps: adam.eps,
            grad_clip: optim.grad_clip,
            state_clip: optim.state_clip.unwrap_or(0.0),
            eval_lengths: vec![32, 64, 96, 128],
            eval_count: 512,
            checkpoint: String::new(),
            corpus: String::new(),
            corpus_bytes: 200_000,
            seq_len: 64,
            eval_windows: 256,
            tp_scheme: "topology-independent".into(),
            tp_worlds: vec![2, 4],
            tp_schedule: "threaded".into(),
            tp_batch: 2,
            tp_steps: 8,
            gradcheck_seeds: 20,
            corrupt_backward: false,
            pc_heads: vec![1, 2, 4, 8, 16],
            pc_key_dims: vec![64],
            pc_value_dims: vec![16],
            pc_d_models: vec![256, 512, 1024, 2048],
            bench_batches: vec![1, 8],
            bench_heads: vec![1, 4],
            bench_key_dims: vec![16, 64],
            bench_value_dims: vec![16],
            bench_steps: 128,
            bench_runs: 5,
        }
    }
}

/// Parses the right-hand side of `KEY=VALUE` as a TOML value, falling back to
/// a bare string so `model=gru` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// File (if any), then overrides in order, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not KEY=VALUE")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("hidden", self.hidden),
            ("train_len", self.train_len),
            ("batch", self.batch),
            ("steps", self.steps),
            ("eval_count", self.eval_count),
            ("corpus_bytes", self.corpus_bytes),
            ("seq_len", self.seq_len),
            ("eval_windows", self.eval_windows),
            ("tp_batch", self.tp_batch),
            ("tp_steps", self.tp_steps),
            ("gradcheck_seeds", self.gradcheck_seeds),
            ("bench_steps", self.bench_steps),
            ("bench_runs", self.bench_runs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("{name} must be positive")));
        }
        let lists = [
            ("eval_lengths", &self.eval_lengths),
            ("tp_worlds", &self.tp_worlds),
            ("pc_heads", &self.pc_heads),
            ("pc_key_dims", &self.pc_key_dims),
            ("pc_value_dims", &self.pc_value_dims),
            ("pc_d_models", &self.pc_d_models),
            ("bench_batches", &self.bench_batches),
            ("bench_heads", &self.bench_heads),
            ("bench_key_dims", &self.bench_key_dims),
            ("bench_value_dims", &self.bench_value_dims),
        ];
        for (name, list) in lists {
            if list.is_empty() || list.contains(&0) {
                return Err(CliError::Config(format!(
                    "{name} must be a non-empty list of positive integers"
                )));
            }
        }
        if let Some(w) = self.tp_worlds.iter().find(|&&w| !self.heads.is_multiple_of(w)) {
            return Err(CliError::Config(format!(
                "{} value heads are not divisible by tensor-parallel world {w}",
                self.heads
            )));
        }
        if !(2..=5).contains(&self.group_k) {
            return Err(CliError::Config(format!(
                "group_k must be in 2..=5, got {}",
                self.group_k
            )));
        }
        let finite = [
            ("init_std", self.init_std),
            ("decay_bias", self.decay_bias),
            ("peak_lr", self.peak_lr),
            ("floor_fraction", self.floor_fraction),
            ("weight_decay", self.weight_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
            ("grad_clip", self.grad_clip),
            ("state_clip", self.state_clip),
        ];
        if let Some((name, v)) = finite.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(CliError::Config(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        self.model_spec(1, 1)?;
        self.task()?;
        self.scheme()?;
        self.schedule()?;
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        self.task.parse()
    }

    pub fn scheme(&self) -> Result<Scheme> {
        Ok(self.tp_scheme.parse()?)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.tp_schedule.as_str() {
            "threaded" => Ok(Schedule::Threaded),
            "sequential" => Ok(Schedule::Sequential),
            s => Err(CliError::Config(format!("unknown tp_schedule {s:?}"))),
        }
    }

    pub fn norm_mode(&self) -> Result<NormMode> {
        Ok(self.norm.parse()?)
    }

    pub fn model_spec(&self, vocab: usize, classes: usize) -> Result<ModelSpec> {
        let kind: ModelKind = self.model.parse()?;
        let mut spec = ModelSpec::new(kind, vocab, classes);
        spec.d_model = self.d_model;
        spec.heads = self.heads;
        spec.key_dim = self.key_dim;
        spec.value_dim = self.value_dim;
        spec.hidden = self.hidden;
        spec.norm = self.norm_mode()?;
        spec.transition_init = self.transition_init.parse::<TransitionInit>()?;
        spec.conv_init = self.conv_init.parse::<ConvInit>()?;
        spec.init_std = self.init_std;
        spec.decay_bias = self.decay_bias;
        Ok(spec)
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            steps: self.steps,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            floor_fraction: self.floor_fraction,
            adam: AdamConfig {
                betas: (self.beta1, self.beta2),
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            grad_clip: self.grad_clip,
            state_clip: (self.state_clip > 0.0).then_some(self.state_clip),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out.join("checkpoint.m2rn")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_then_string() {
        let cfg = RunConfig::load(
            None,
            &[
                "heads=8".into(),
                "model=gru".into(),
                "eval_lengths=[16, 48]".into(),
                "peak_lr=0.01".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.model, "gru");
        assert_eq!(cfg.eval_lengths, vec![16, 48]);
        assert_eq!(cfg.peak_lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["hedas=4".into()]).unwrap_err();
        assert!(err.to_string().contains("hedas"), "{err}");
    }

    #[test]
    fn dimensions_must_be_positive() {
        assert!(RunConfig::load(None, &["key_dim=0".into()]).is_err());
        assert!(RunConfig::load(None, &["tp_worlds=[]".into()]).is_err());
    }

    #[test]
    fn heads_must_divide_over_the_tp_world() {
        let err = RunConfig::load(None, &["heads=6".into(), "tp_worlds=[4]".into()]).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        RunConfig::load(None, &["heads=6".into(), "tp_worlds=[2, 3]".into()]).unwrap();
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_names_are_config_errors() {
        for o in [
            "model=lstm",
            "norm=layer",
            "task=copy",
            "tp_scheme=ring",
            "transition_init=zeros",
            "conv_init=xavier",
        ] {
            let err = RunConfig::load(None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}");
        }
    }
}
