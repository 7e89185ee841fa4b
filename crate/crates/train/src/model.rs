//! Embedding → one recurrent core → linear head, with full backward.

use m2rnn_core::baselines::{DiagLinearRnnCache, GruCache, VectorRnnCache};
use m2rnn_core::layer::{LayerCache, NO_DECAY};
use m2rnn_core::params::{prefixed, prefixed_mut};
use m2rnn_core::tensor::{matmul_nt, matmul_tn};
use m2rnn_core::{
    diag_linear_rnn_backward, diag_linear_rnn_forward_cached, gru_backward, gru_forward_cached, layer_backward,
    layer_forward_cached, matmul, vector_rnn_backward, vector_rnn_forward_cached, ConvInit, DiagLinearRnnParams,
    GruParams, LayerConfig, LayerParams, NormMode, ParamSet, SeededRng, Tensor, TransitionInit, VectorRnnParams,
};

use crate::error::{Result, TrainError};

/// Lower bound kept on every forget-gate exponent after an optimizer step.
pub const ALPHA_MIN: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    M2rnn,
    Gru,
    VectorRnn,
    DiagLinear,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::M2rnn => "m2rnn",
            ModelKind::Gru => "gru",
            ModelKind::VectorRnn => "vector-rnn",
            ModelKind::DiagLinear => "diag-linear",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2rnn" => Ok(Self::M2rnn),
            "gru" => Ok(Self::Gru),
            "vector-rnn" => Ok(Self::VectorRnn),
            "diag-linear" => Ok(Self::DiagLinear),
            _ => Err(TrainError::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab: usize,
    pub classes: usize,
    /// embedding width, and the layer width for `m2rnn`
    pub d_model: usize,
    pub heads: usize,
    /// also the diagonal model's key width
    pub key_dim: usize,
    /// also the diagonal model's value width
    pub value_dim: usize,
    /// width of the `gru` / `vector-rnn` hidden state
    pub hidden: usize,
    pub norm: NormMode,
    pub transition_init: TransitionInit,
    pub conv_init: ConvInit,
    /// initial `σ` pre-activation of the diagonal decays
    pub decay_bias: f64,
    /// std of the matrix layer's projection weights
    pub init_std: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, vocab: usize, classes: usize) -> Self {
        Self {
            kind,
            vocab,
            classes,
            d_model: 32,
            heads: 4,
            key_dim: 8,
            value_dim: 8,
            hidden: 64,
            norm: NormMode::Concatenated,
            transition_init: TransitionInit::Identity,
            conv_init: ConvInit::Uniform,
            decay_bias: 2.0,
            init_std: 0.02,
        }
    }

    pub fn layer_config(&self) -> LayerConfig {
        let mut cfg = LayerConfig::new(self.d_model, self.heads, self.key_dim, self.value_dim);
        cfg.norm = self.norm;
        cfg.transition_init = self.transition_init;
        cfg.conv_init = self.conv_init;
        cfg.init_std = self.init_std;
        cfg
    }

    /// Entries in the recurrent state of one sequence.
    pub fn state_size(&self) -> usize {
        match self.kind {
            ModelKind::M2rnn => self.heads * self.key_dim * self.value_dim,
            ModelKind::Gru | ModelKind::VectorRnn => self.hidden,
            ModelKind::DiagLinear => self.key_dim * self.value_dim,
        }
    }

    fn core_width(&self) -> usize {
        match self.kind {
            ModelKind::M2rnn => self.d_model,
            ModelKind::Gru | ModelKind::VectorRnn => self.hidden,
            ModelKind::DiagLinear => self.value_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab,
            self.classes,
            self.d_model,
            self.heads,
            self.key_dim,
            self.value_dim,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(TrainError::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Core {
    M2rnn(LayerParams<f64>),
    Gru(GruParams<f64>),
    VectorRnn(VectorRnnParams<f64>),
    DiagLinear(DiagLinearRnnParams<f64>),
}

impl Core {
    fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        match self {
            Core::M2rnn(p) => p.named(),
            Core::Gru(p) => p.named(),
            Core::VectorRnn(p) => p.named(),
            Core::DiagLinear(p) => p.named(),
        }
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        match self {
            Core::M2rnn(p) => p.named_mut(),
            Core::Gru(p) => p.named_mut(),
            Core::VectorRnn(p) => p.named_mut(),
            Core::DiagLinear(p) => p.named_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub spec: ModelSpec,
    /// `[vocab, d_model]`
    pub embed: Tensor<f64>,
    pub core: Core,
    /// `[core width, classes]`
    pub head_w: Tensor<f64>,
    pub head_b: Tensor<f64>,
}

impl ParamSet<f64> for SequenceModel {
    fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        out.extend(prefixed("core", self.core.named()));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        out.extend(prefixed_mut("core", self.core.named_mut()));
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }
}

pub enum CoreCache {
    M2rnn(LayerCache<f64>),
    Gru(GruCache<f64>),
    VectorRnn(VectorRnnCache<f64>),
    DiagLinear(DiagLinearRnnCache<f64>),
}

pub struct ModelCache {
    tokens: Vec<usize>,
    batch: usize,
    steps: usize,
    core: CoreCache,
    /// `[B·T, core width]`
    features: Tensor<f64>,
}

/// Parameter names exempt from weight decay.
pub const SKIP_DECAY: [&str; 4] = NO_DECAY;

impl SequenceModel {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let embed = rng.normal_tensor(&[spec.vocab, spec.d_model], 1.0);
        let core_seed = rng.next_seed();
        let core = match spec.kind {
            ModelKind::M2rnn => Core::M2rnn(LayerParams::init(spec.layer_config(), core_seed)?),
            ModelKind::Gru => Core::Gru(GruParams::init(spec.d_model, spec.hidden, core_seed)),
            ModelKind::VectorRnn => Core::VectorRnn(VectorRnnParams::init(spec.d_model, spec.hidden, core_seed)),
            ModelKind::DiagLinear => Core::DiagLinear(DiagLinearRnnParams::init(
                spec.d_model,
                spec.key_dim,
                spec.value_dim,
                spec.decay_bias,
                core_seed,
            )),
        };
        let width = spec.core_width();
        let head_w = rng.normal_tensor(&[width, spec.classes], 1.0 / (width as f64).sqrt());
        Ok(Self {
            spec,
            embed,
            core,
            head_w,
            head_b: Tensor::zeros(&[spec.classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Keeps parameters inside their valid domain after an update.
    pub fn project(&mut self) {
        if let Core::M2rnn(p) = &mut self.core {
            p.alpha.data_mut().iter_mut().for_each(|a| *a = a.max(ALPHA_MIN));
        }
    }

    fn embed_tokens(&self, tokens: &[usize], batch: usize, steps: usize) -> Result<Tensor<f64>> {
        let d = self.spec.d_model;
        let mut x = Tensor::zeros(&[batch, steps, d]);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.spec.vocab {
                return Err(TrainError::Config(format!(
                    "token {t} outside vocabulary {}",
                    self.spec.vocab
                )));
            }
            x.data_mut()[i * d..(i + 1) * d].copy_from_slice(&self.embed.data()[t * d..(t + 1) * d]);
        }
        Ok(x)
    }

    /// Logits `[B·T, classes]` for `batch` sequences of `steps` tokens stored row-major.
    pub fn forward(&self, tokens: &[usize], batch: usize, steps: usize) -> Result<(Tensor<f64>, ModelCache)> {
        if tokens.len() != batch * steps {
            return Err(TrainError::Config(format!(
                "{} tokens for a batch of {batch}×{steps}",
                tokens.len()
            )));
        }
        let x = self.embed_tokens(tokens, batch, steps)?;
        let (h, core) = match &self.core {
            Core::M2rnn(p) => {
                let (o, c) = layer_forward_cached(p, &x)?;
                (o, CoreCache::M2rnn(c))
            }
            Core::Gru(p) => {
                let (h, c) = gru_forward_cached(p, &x)?;
                (h, CoreCache::Gru(c))
            }
            Core::VectorRnn(p) => {
                let (h, c) = vector_rnn_forward_cached(p, &x)?;
                (h, CoreCache::VectorRnn(c))
            }
            Core::DiagLinear(p) => {
                let (h, c) = diag_linear_rnn_forward_cached(p, &x)?;
                (h, CoreCache::DiagLinear(c))
            }
        };
        let features = h.into_shape(&[batch * steps, self.spec.core_width()])?;
        let logits = matmul(&features, &self.head_w)?.add_row_vector(&self.head_b)?;
        let cache = ModelCache {
            tokens: tokens.to_vec(),
            batch,
            steps,
            core,
            features,
        };
        Ok((logits, cache))
    }

    /// Gradients of every parameter from `dlogits: [B·T, classes]`.
    pub fn backward(&self, cache: &ModelCache, dlogits: &Tensor<f64>, state_clip: Option<f64>) -> Result<Self> {
        let mut g = self.zeros_like();
        g.head_w = matmul_tn(&cache.features, dlogits)?;
        g.head_b = dlogits.sum_rows();
        let dh = matmul_nt(dlogits, &self.head_w)?.into_shape(&[cache.batch, cache.steps, self.spec.core_width()])?;
        let dx = match (&self.core, &cache.core) {
            (Core::M2rnn(p), CoreCache::M2rnn(c)) => {
                let (gp, dx) = layer_backward(p, c, &dh, state_clip)?;
                g.core = Core::M2rnn(gp);
                dx
            }
            (Core::Gru(p), CoreCache::Gru(c)) => {
                let (gp, dx) = gru_backward(p, c, &dh)?;
                g.core = Core::Gru(gp);
                dx
            }
            (Core::VectorRnn(p), CoreCache::VectorRnn(c)) => {
                let (gp, dx) = vector_rnn_backward(p, c, &dh)?;
                g.core = Core::VectorRnn(gp);
                dx
            }
            (Core::DiagLinear(p), CoreCache::DiagLinear(c)) => {
                let (gp, dx) = diag_linear_rnn_backward(p, c, &dh)?;
                g.core = Core::DiagLinear(gp);
                dx
            }
            _ => return Err(TrainError::Config("cache from a different model kind".into())),
        };
        let d = self.spec.d_model;
        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = &dx.data()[i * d..(i + 1) * d];
            for (acc, v) in g.embed.data_mut()[t * d..(t + 1) * d].iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok(g)
    }
}

/// Mean softmax cross-entropy over rows, its gradient, and per-row correctness.
pub fn softmax_cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> (f64, Tensor<f64>, Vec<bool>) {
    let (rows, c) = (logits.rows(), logits.cols());
    assert_eq!(rows, labels.len(), "one label per row");
    let mut grad = Tensor::zeros(&[rows, c]);
    let mut loss = 0.0;
    let mut correct = Vec::with_capacity(rows);
    let scale = 1.0 / rows as f64;
    for r in 0..rows {
        let z = &logits.data()[r * c..(r + 1) * c];
        let (arg, &max) = z.iter().enumerate().fold(
            (0, &f64::NEG_INFINITY),
            |best, (i, v)| if *v > *best.1 { (i, v) } else { best },
        );
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - z[labels[r]];
        correct.push(arg == labels[r]);
        for (j, g) in grad.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            let p = (z[j] - log_sum).exp();
            *g = scale * (p - f64::from(u8::from(j == labels[r])));
        }
    }
    (loss * scale, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2rnn_core::{finite_difference_grad, rel_error};

    fn spec(kind: ModelKind) -> ModelSpec {
        let mut s = ModelSpec::new(kind, 5, 4);
        s.d_model = 8;
        s.heads = 2;
        s.key_dim = 4;
        s.value_dim = 4;
        s.hidden = 6;
        s
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = SeededRng::new(1).normal_tensor(&[3, 4], 2.0);
        let labels = [0, 3, 1];
        let (_, g, _) = softmax_cross_entropy(&logits, &labels);
        let fd = finite_difference_grad(|z| softmax_cross_entropy(z, &labels).0, &logits, 1e-6);
        assert!(rel_error(&g, &fd) < 1e-8);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let tokens = [0, 4, 2, 1, 3, 3, 0, 2];
        let labels = [1, 0, 3, 2, 2, 1, 0, 3];
        for kind in [
            ModelKind::M2rnn,
            ModelKind::Gru,
            ModelKind::VectorRnn,
            ModelKind::DiagLinear,
        ] {
            let model = SequenceModel::init(spec(kind), 7).unwrap();
            let (logits, cache) = model.forward(&tokens, 2, 4).unwrap();
            let (_, dlogits, _) = softmax_cross_entropy(&logits, &labels);
            let grads = model.backward(&cache, &dlogits, None).unwrap();
            let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
            for (i, name) in names.iter().enumerate() {
                let fd = finite_difference_grad(
                    |t| {
                        let mut m = model.clone();
                        *m.named_mut()[i].1 = t.clone();
                        let (z, _) = m.forward(&tokens, 2, 4).unwrap();
                        softmax_cross_entropy(&z, &labels).0
                    },
                    model.named()[i].1,
                    1e-5,
                );
                // Forget-gate weights start with gradients near 1e-8, where
                // central differences only resolve about 1e-11 absolute.
                let g = grads.named()[i].1;
                let abs = g.sub(&fd).unwrap().max_abs();
                let err = rel_error(g, &fd);
                assert!(
                    err < 1e-4 || abs < 1e-10,
                    "{} {name}: {err} ({abs:e} absolute)",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn alpha_projection() {
        let mut m = SequenceModel::init(spec(ModelKind::M2rnn), 1).unwrap();
        if let Core::M2rnn(p) = &mut m.core {
            p.alpha.fill(-3.0);
        }
        m.project();
        if let Core::M2rnn(p) = &m.core {
            assert!(p.alpha.data().iter().all(|&a| a == ALPHA_MIN));
        }
    }

    #[test]
    fn state_sizes() {
        assert_eq!(spec(ModelKind::M2rnn).state_size(), 32);
        assert_eq!(spec(ModelKind::VectorRnn).state_size(), 6);
        assert_eq!(spec(ModelKind::DiagLinear).state_size(), 16);
    }
}
