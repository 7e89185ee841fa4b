//! The full recurrent block around the matrix-state recurrence.
//!
//! ```text
//! q = SiLU(conv(x W_q + b_q))      k = SiLU(conv(x W_k + b_k))      v = SiLU(conv(x W_v + b_v))
//! f = ψ(x W_f)                     g = SiLU(x W_g)
//! Y = recurrence(q, k, v, f, W)    y = Y + w_r ⊙ v
//! o = RMSNorm(y ⊙ g) W_o
//! ```
//!
//! One query/key head is shared by `N` value heads. Activations are handled as
//! `[B·T, C]` matrices; the causal convolution runs per batch row.

use crate::error::{dim_err, CoreError, Result};
use crate::impl_param_set;
use crate::kernels::{
    causal_depthwise_conv1d, causal_depthwise_conv1d_backward, rmsnorm_rows_backward, rmsnorm_rows_forward,
    silu_backward, silu_t, CONV_WIDTH, RMS_EPS,
};
use crate::params::ParamSet;
use crate::random::SeededRng;
use crate::recurrence::{
    forget_gate_init, forget_gate_partials, forget_gate_scalar, m2rnn_backward, m2rnn_forward_cached,
    readout_from_states, RecurrenceGrads, RecurrenceInputs,
};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// One RMS statistic over all `N·V` features of a token.
    #[default]
    Concatenated,
    /// A separate RMS statistic per value head.
    PerHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransitionInit {
    #[default]
    Identity,
    Orthogonal,
    Normal,
}

/// Initial causal-conv kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvInit {
    /// every tap `U(±1/√width)`
    #[default]
    Uniform,
    /// the current-step tap is one, earlier taps zero
    Delta,
}

impl std::str::FromStr for ConvInit {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "delta" => Ok(Self::Delta),
            _ => Err(CoreError::Config(format!("unknown conv init {s:?}"))),
        }
    }
}

impl std::str::FromStr for TransitionInit {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "orthogonal" => Ok(Self::Orthogonal),
            "normal" => Ok(Self::Normal),
            _ => Err(CoreError::Config(format!("unknown transition init {s:?}"))),
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concatenated" => Ok(Self::Concatenated),
            "per-head" => Ok(Self::PerHead),
            _ => Err(CoreError::Config(format!("unknown norm mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub norm: NormMode,
    pub transition_init: TransitionInit,
    pub conv_init: ConvInit,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub init_std: f64,
    pub norm_eps: f64,
}

impl LayerConfig {
    pub fn new(d_model: usize, heads: usize, key_dim: usize, value_dim: usize) -> Self {
        Self {
            d_model,
            heads,
            key_dim,
            value_dim,
            norm: NormMode::Concatenated,
            transition_init: TransitionInit::Identity,
            conv_init: ConvInit::Uniform,
            alpha_range: (1.0, 8.0),
            beta_range: (1.0, 8.0),
            init_std: 0.02,
            norm_eps: RMS_EPS,
        }
    }

    pub fn value_width(&self) -> usize {
        self.heads * self.value_dim
    }

    pub fn norm_groups(&self) -> usize {
        match self.norm {
            NormMode::Concatenated => 1,
            NormMode::PerHead => self.heads,
        }
    }

    pub fn state_size(&self) -> usize {
        self.heads * self.key_dim * self.value_dim
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.heads, self.key_dim, self.value_dim].contains(&0) {
            return Err(CoreError::Config(format!(
                "layer dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of one block. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub cfg: LayerConfig,
    /// `[d, K]`
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    /// `[d, N·V]`
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    /// `[CONV_WIDTH, C]`
    pub conv_q: Tensor<T>,
    pub conv_k: Tensor<T>,
    pub conv_v: Tensor<T>,
    /// `[d, N]`
    pub w_f: Tensor<T>,
    /// `[d, N·V]`
    pub w_g: Tensor<T>,
    /// `[N, V, V]`
    pub transition: Tensor<T>,
    /// `[N, V]`
    pub w_r: Tensor<T>,
    /// `[N·V]`
    pub norm_weight: Tensor<T>,
    /// `[N·V, d]`
    pub w_o: Tensor<T>,
    /// `[N]`
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_param_set!(LayerParams {
    w_q,
    b_q,
    w_k,
    b_k,
    w_v,
    b_v,
    conv_q,
    conv_k,
    conv_v,
    w_f,
    w_g,
    transition,
    w_r,
    norm_weight,
    w_o,
    alpha,
    beta,
});

/// Parameters excluded from weight decay.
pub const NO_DECAY: [&str; 4] = ["norm_weight", "alpha", "beta", "w_r"];

/// Per-head transition matrices `[N, V, V]`.
pub fn init_transition<T: Scalar>(mode: TransitionInit, heads: usize, v: usize, seed: u64) -> Tensor<T> {
    let mut rng = SeededRng::new(seed);
    let mut out = Tensor::zeros(&[heads, v, v]);
    for n in 0..heads {
        let w: Tensor<f64> = match mode {
            TransitionInit::Identity => Tensor::eye(v),
            TransitionInit::Normal => rng.normal_tensor(&[v, v], 1.0 / (v as f64).sqrt()),
            TransitionInit::Orthogonal => orthonormal_rows(&rng.normal_tensor(&[v, v], 1.0)),
        };
        out.write_block(n * v * v, &w.map_to(T::lit));
    }
    out
}

/// Modified Gram-Schmidt over the rows, run twice for accuracy.
fn orthonormal_rows(a: &Tensor<f64>) -> Tensor<f64> {
    let n = a.rows();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| a.data()[i * n..(i + 1) * n].to_vec()).collect();
    for _ in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let (done, rest) = rows.split_at_mut(i);
                let dot: f64 = done[j].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                rest[0].iter_mut().zip(&done[j]).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            rows[i].iter_mut().for_each(|x| *x /= norm);
        }
    }
    Tensor::new(&[n, n], rows.concat()).expect("square")
}

impl<T: Scalar> LayerParams<T> {
    pub fn init(cfg: LayerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, n, k, nv) = (cfg.d_model, cfg.heads, cfg.key_dim, cfg.value_width());
        let mut rng = SeededRng::new(seed);
        let std = T::lit(cfg.init_std);
        let mut proj = |rows: usize, cols: usize| rng.fork().truncated_normal_tensor(&[rows, cols], std);
        let (w_q, w_k, w_v, w_f, w_g, w_o) = (
            proj(d, k),
            proj(d, k),
            proj(d, nv),
            proj(d, n),
            proj(d, nv),
            proj(nv, d),
        );
        let bound = T::lit(1.0 / (CONV_WIDTH as f64).sqrt());
        let mut conv = |c: usize| {
            let uniform = rng.fork().uniform_tensor(&[CONV_WIDTH, c], -bound, bound);
            match cfg.conv_init {
                ConvInit::Uniform => uniform,
                ConvInit::Delta => {
                    let mut t = Tensor::zeros(&[CONV_WIDTH, c]);
                    t.data_mut()[(CONV_WIDTH - 1) * c..].fill(T::one());
                    t
                }
            }
        };
        let (conv_q, conv_k, conv_v) = (conv(k), conv(k), conv(nv));
        let transition = init_transition(cfg.transition_init, n, cfg.value_dim, rng.next_seed());
        let gate = forget_gate_init(n, cfg.alpha_range, cfg.beta_range, rng.next_seed())?;
        Ok(Self {
            cfg,
            w_q,
            b_q: Tensor::zeros(&[k]),
            w_k,
            b_k: Tensor::zeros(&[k]),
            w_v,
            b_v: Tensor::zeros(&[nv]),
            conv_q,
            conv_k,
            conv_v,
            w_f,
            w_g,
            transition,
            w_r: Tensor::ones(&[n, cfg.value_dim]),
            norm_weight: Tensor::ones(&[nv]),
            w_o,
            alpha: gate.alpha,
            beta: gate.beta,
        })
    }

    /// Same shapes and config, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Parameters in the six projection matrices only.
    pub fn projection_param_count(&self) -> usize {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_g, &self.w_f, &self.w_o]
            .iter()
            .map(|t| t.len())
            .sum()
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        c.validate()?;
        let (d, n, k, v, nv) = (c.d_model, c.heads, c.key_dim, c.value_dim, c.value_width());
        let expect: [(&str, &Tensor<T>, Vec<usize>); 17] = [
            ("w_q", &self.w_q, vec![d, k]),
            ("b_q", &self.b_q, vec![k]),
            ("w_k", &self.w_k, vec![d, k]),
            ("b_k", &self.b_k, vec![k]),
            ("w_v", &self.w_v, vec![d, nv]),
            ("b_v", &self.b_v, vec![nv]),
            ("conv_q", &self.conv_q, vec![CONV_WIDTH, k]),
            ("conv_k", &self.conv_k, vec![CONV_WIDTH, k]),
            ("conv_v", &self.conv_v, vec![CONV_WIDTH, nv]),
            ("w_f", &self.w_f, vec![d, n]),
            ("w_g", &self.w_g, vec![d, nv]),
            ("transition", &self.transition, vec![n, v, v]),
            ("w_r", &self.w_r, vec![n, v]),
            ("norm_weight", &self.norm_weight, vec![nv]),
            ("w_o", &self.w_o, vec![nv, d]),
            ("alpha", &self.alpha, vec![n]),
            ("beta", &self.beta, vec![n]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(CoreError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Activations of one `x W (+ b) → [conv] → SiLU` branch, all `[B·T, C]`.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub pre: Tensor<T>,
    pub conv: Option<Tensor<T>>,
    pub out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BranchGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
    pub dkernel: Option<Tensor<T>>,
}

fn conv_rows<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let (rows, c) = (x.rows(), x.cols());
    let steps = rows / batch;
    let mut out = Tensor::zeros(&[rows, c]);
    for b in 0..batch {
        let xb = x.block(b * steps * c, &[steps, c]);
        out.write_block(b * steps * c, &causal_depthwise_conv1d(&xb, kernel, None)?);
    }
    Ok(out)
}

/// Forward of one input branch on `x: [B·T, d]`.
pub fn branch_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kernel: Option<&Tensor<T>>,
    batch: usize,
) -> Result<Branch<T>> {
    let mut pre = matmul(x, w)?;
    if let Some(b) = b {
        pre = pre.add_row_vector(b)?;
    }
    let conv = kernel.map(|k| conv_rows(&pre, k, batch)).transpose()?;
    let out = silu_t(conv.as_ref().unwrap_or(&pre));
    Ok(Branch { pre, conv, out })
}

/// Backward of [`branch_forward`] given `dout = ∂L/∂out`.
pub fn branch_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    kernel: Option<&Tensor<T>>,
    br: &Branch<T>,
    dout: &Tensor<T>,
    batch: usize,
) -> Result<BranchGrads<T>> {
    let dact = silu_backward(br.conv.as_ref().unwrap_or(&br.pre), dout)?;
    let (dpre, dkernel) = match kernel {
        None => (dact, None),
        Some(kern) => {
            let (rows, c) = (dact.rows(), dact.cols());
            let steps = rows / batch;
            let mut dpre = Tensor::zeros(&[rows, c]);
            let mut dk = kern.zeros_like();
            for b in 0..batch {
                let off = b * steps * c;
                let (dxb, dkb, _) = causal_depthwise_conv1d_backward(
                    &br.pre.block(off, &[steps, c]),
                    kern,
                    &dact.block(off, &[steps, c]),
                )?;
                dpre.write_block(off, &dxb);
                dk.add_assign(&dkb)?;
            }
            (dpre, Some(dk))
        }
    };
    Ok(BranchGrads {
        dx: matmul_nt(&dpre, w)?,
        dw: matmul_tn(x, &dpre)?,
        db: dpre.sum_rows(),
        dkernel,
    })
}

/// `xf = x W_f` and `f = ψ(xf)` with per-head `α`, `β`; both `[B·T, N]`.
pub fn forget_forward<T: Scalar>(
    x: &Tensor<T>,
    w_f: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xf = matmul(x, w_f)?;
    let n = xf.cols();
    if alpha.len() != n || beta.len() != n {
        return Err(dim_err("forget_forward", xf.shape(), alpha.shape()));
    }
    let f = Tensor::from_fn(xf.shape(), |i| {
        forget_gate_scalar(xf.data()[i], alpha.data()[i % n], beta.data()[i % n])
    });
    Ok((xf, f))
}

pub struct ForgetGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub dalpha: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn forget_backward<T: Scalar>(
    x: &Tensor<T>,
    w_f: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    xf: &Tensor<T>,
    f: &Tensor<T>,
    df: &Tensor<T>,
) -> Result<ForgetGrads<T>> {
    let n = xf.cols();
    let mut dxf = xf.zeros_like();
    let mut dalpha = alpha.zeros_like();
    let mut dbeta = beta.zeros_like();
    for i in 0..xf.len() {
        let h = i % n;
        let (gx, ga, gb) = forget_gate_partials(xf.data()[i], alpha.data()[h], beta.data()[h], f.data()[i]);
        let g = df.data()[i];
        dxf.data_mut()[i] = g * gx;
        dalpha.data_mut()[h] += g * ga;
        dbeta.data_mut()[h] += g * gb;
    }
    Ok(ForgetGrads {
        dx: matmul_nt(&dxf, w_f)?,
        dw: matmul_tn(x, &dxf)?,
        dalpha,
        dbeta,
    })
}

/// `a ⊙ row` with `row` broadcast over the rows of `a`.
pub fn mul_row_vector<T: Scalar>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let c = a.cols();
    if row.len() != c {
        return Err(dim_err("mul_row_vector", a.shape(), row.shape()));
    }
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] * row.data()[i % c]))
}

/// Column sums of `a ⊙ b`, accumulated over rows in ascending order.
pub fn column_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(a.mul(b)?.sum_rows())
}

/// Activations up to the gated readout `y ⊙ g`, before normalisation.
#[derive(Clone, Debug)]
pub struct PreNorm<T> {
    pub batch: usize,
    pub steps: usize,
    /// `[B·T, d]`
    pub x: Tensor<T>,
    pub q: Branch<T>,
    pub k: Branch<T>,
    pub v: Branch<T>,
    pub g: Branch<T>,
    pub xf: Tensor<T>,
    pub f: Tensor<T>,
    pub rec: RecurrenceInputs<T>,
    pub h_full: Tensor<T>,
    /// readout plus residual, `[B·T, N·V]`
    pub y: Tensor<T>,
    pub yg: Tensor<T>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub pre: PreNorm<T>,
    /// `[B·T, groups]`
    pub inv_rms: Tensor<T>,
    pub normed: Tensor<T>,
}

impl<T: Scalar> PreNorm<T> {
    /// Final recurrent state `[B, N, K, V]`.
    pub fn final_state(&self) -> Tensor<T> {
        let d = self.rec.dims().expect("cached dims");
        let sl = d.key_dim * d.value_dim;
        let mut h = Tensor::zeros(&d.state_shape());
        for b in 0..d.batch {
            for n in 0..d.heads {
                let src = ((b * d.steps + d.steps - 1) * d.heads + n) * sl;
                h.write_block((b * d.heads + n) * sl, &self.h_full.block(src, &[sl]));
            }
        }
        h
    }

    pub fn rows(&self) -> usize {
        self.batch * self.steps
    }
}

fn check_input<T: Scalar>(cfg: &LayerConfig, x: &Tensor<T>) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.d_model {
        return Err(dim_err("layer input", s, &[0, 0, cfg.d_model]));
    }
    Ok((s[0], s[1]))
}

/// Assembles the recurrence inputs from branch outputs (zero initial state).
pub fn recurrence_inputs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    f: &Tensor<T>,
    transition: &Tensor<T>,
    batch: usize,
    steps: usize,
) -> Result<RecurrenceInputs<T>> {
    let (heads, vd) = (transition.shape()[0], transition.shape()[1]);
    let kd = q.cols();
    Ok(RecurrenceInputs {
        queries: q.reshape(&[batch, steps, kd])?,
        keys: k.reshape(&[batch, steps, kd])?,
        values: v.reshape(&[batch, steps, heads, vd])?,
        forget: f.reshape(&[batch, steps, heads])?,
        h0: Tensor::zeros(&[batch, heads, kd, vd]),
        transition: transition.clone(),
    })
}

/// Forward up to `y ⊙ g` for the heads held in `p`. `x: [B, T, d]`.
pub fn layer_pre_norm<T: Scalar>(p: &LayerParams<T>, x: &Tensor<T>) -> Result<PreNorm<T>> {
    let (batch, steps) = check_input(&p.cfg, x)?;
    let x2 = x.reshape(&[batch * steps, p.cfg.d_model])?;
    let q = branch_forward(&x2, &p.w_q, Some(&p.b_q), Some(&p.conv_q), batch)?;
    let k = branch_forward(&x2, &p.w_k, Some(&p.b_k), Some(&p.conv_k), batch)?;
    let v = branch_forward(&x2, &p.w_v, Some(&p.b_v), Some(&p.conv_v), batch)?;
    let g = branch_forward(&x2, &p.w_g, None, None, batch)?;
    let (xf, f) = forget_forward(&x2, &p.w_f, &p.alpha, &p.beta)?;
    let rec = recurrence_inputs(&q.out, &k.out, &v.out, &f, &p.transition, batch, steps)?;
    let h_full = m2rnn_forward_cached(&rec)?;
    let nv = p.cfg.value_width();
    let readout = readout_from_states(&h_full, &rec.queries)?.into_shape(&[batch * steps, nv])?;
    let y = readout.add(&mul_row_vector(&v.out, &p.w_r.reshape(&[nv])?)?)?;
    let yg = y.mul(&g.out)?;
    Ok(PreNorm {
        batch,
        steps,
        x: x2,
        q,
        k,
        v,
        g,
        xf,
        f,
        rec,
        h_full,
        y,
        yg,
    })
}

/// Forward pass keeping the activations for [`layer_backward`]. `x: [B, T, d]`.
pub fn layer_forward_cached<T: Scalar>(p: &LayerParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    let pre = layer_pre_norm(p, x)?;
    let eps = T::lit(p.cfg.norm_eps);
    let (normed, inv_rms) = rmsnorm_rows_forward(&pre.yg, &p.norm_weight, p.cfg.norm_groups(), eps)?;
    let o = matmul(&normed, &p.w_o)?.into_shape(&[pre.batch, pre.steps, p.cfg.d_model])?;
    Ok((o, LayerCache { pre, inv_rms, normed }))
}

/// Forward pass: output `[B, T, d]` and final state `[B, N, K, V]`.
pub fn layer_forward<T: Scalar>(p: &LayerParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (o, cache) = layer_forward_cached(p, x)?;
    Ok((o, cache.pre.final_state()))
}

/// Gradients from `∂L/∂(y ⊙ g)` down to the recurrence inputs. Fills the
/// value-side parameter gradients of `grads`; the query/key gradients are left
/// to [`qk_backward`] since they are shared across value heads.
pub struct CoreBackward<T> {
    /// `[B·T, K]`, summed over the heads held in `p`
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    /// contribution of the value, forget and output-gate branches to `dx`
    pub dx: Tensor<T>,
}

pub fn core_backward<T: Scalar>(
    p: &LayerParams<T>,
    c: &PreNorm<T>,
    dyg: &Tensor<T>,
    state_clip: Option<T>,
    grads: &mut LayerParams<T>,
) -> Result<CoreBackward<T>> {
    let nv = p.cfg.value_width();
    let dy = dyg.mul(&c.g.out)?;
    let dg = dyg.mul(&c.y)?;
    grads.w_r = column_dot(&dy, &c.v.out)?.into_shape(&[p.cfg.heads, p.cfg.value_dim])?;
    let dv_res = mul_row_vector(&dy, &p.w_r.reshape(&[nv])?)?;
    let rg = m2rnn_backward(&c.rec, &c.h_full, &dy.reshape(&c.rec.dims()?.y_shape())?, state_clip)?;
    let (dq, dk, dv, df) = split_recurrence_grads(&rg, c.rows(), nv)?;
    grads.transition = rg.transition;
    let dv = dv.add(&dv_res)?;

    let gv = branch_backward(&c.x, &p.w_v, Some(&p.conv_v), &c.v, &dv, c.batch)?;
    let gf = forget_backward(&c.x, &p.w_f, &p.alpha, &p.beta, &c.xf, &c.f, &df)?;
    let gg = branch_backward(&c.x, &p.w_g, None, &c.g, &dg, c.batch)?;
    let mut dx = gv.dx;
    dx.add_assign(&gf.dx)?;
    dx.add_assign(&gg.dx)?;
    grads.w_v = gv.dw;
    grads.b_v = gv.db;
    grads.conv_v = gv.dkernel.expect("v conv");
    grads.w_f = gf.dw;
    grads.alpha = gf.dalpha;
    grads.beta = gf.dbeta;
    grads.w_g = gg.dw;
    Ok(CoreBackward { dq, dk, dx })
}

/// Query/key branch gradients from fully reduced `dq`, `dk`; returns their `dx` contribution.
pub fn qk_backward<T: Scalar>(
    p: &LayerParams<T>,
    c: &PreNorm<T>,
    dq: &Tensor<T>,
    dk: &Tensor<T>,
    grads: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    let gq = branch_backward(&c.x, &p.w_q, Some(&p.conv_q), &c.q, dq, c.batch)?;
    let gk = branch_backward(&c.x, &p.w_k, Some(&p.conv_k), &c.k, dk, c.batch)?;
    grads.w_q = gq.dw;
    grads.b_q = gq.db;
    grads.conv_q = gq.dkernel.expect("q conv");
    grads.w_k = gk.dw;
    grads.b_k = gk.db;
    grads.conv_k = gk.dkernel.expect("k conv");
    gq.dx.add(&gk.dx)
}

/// Backward pass from `d_out: [B, T, d]`. Returns parameter gradients and `dx: [B, T, d]`.
/// `state_clip` bounds the per-step carried state gradient (see [`m2rnn_backward`]).
pub fn layer_backward<T: Scalar>(
    p: &LayerParams<T>,
    c: &LayerCache<T>,
    d_out: &Tensor<T>,
    state_clip: Option<T>,
) -> Result<(LayerParams<T>, Tensor<T>)> {
    let pre = &c.pre;
    let (bt, dm) = (pre.rows(), p.cfg.d_model);
    if d_out.len() != bt * dm {
        return Err(dim_err("layer_backward", &[pre.batch, pre.steps, dm], d_out.shape()));
    }
    let do2 = d_out.reshape(&[bt, dm])?;
    let mut grads = p.zeros_like();
    grads.w_o = matmul_tn(&c.normed, &do2)?;
    let dnormed = matmul_nt(&do2, &p.w_o)?;
    let (dyg, dnw) = rmsnorm_rows_backward(&pre.yg, &p.norm_weight, &c.inv_rms, &dnormed)?;
    grads.norm_weight = dnw;
    let core = core_backward(p, pre, &dyg, state_clip, &mut grads)?;
    let mut dx = qk_backward(p, pre, &core.dq, &core.dk, &mut grads)?;
    dx.add_assign(&core.dx)?;
    Ok((grads, dx.into_shape(&[pre.batch, pre.steps, dm])?))
}

/// Recurrence gradients as `[B·T, C]` matrices: `(dq, dk, dv, df)`.
pub fn split_recurrence_grads<T: Scalar>(
    rg: &RecurrenceGrads<T>,
    bt: usize,
    nv: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let kd = rg.queries.len() / bt;
    let heads = rg.forget.len() / bt;
    Ok((
        rg.queries.reshape(&[bt, kd])?,
        rg.keys.reshape(&[bt, kd])?,
        rg.values.reshape(&[bt, nv])?,
        rg.forget.reshape(&[bt, heads])?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    MultiHead,
    MultiQuery,
    MultiKey,
    MultiValue,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::MultiHead,
        HeadKind::MultiQuery,
        HeadKind::MultiKey,
        HeadKind::MultiValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::MultiHead => "multi-head",
            HeadKind::MultiQuery => "multi-query",
            HeadKind::MultiKey => "multi-key",
            HeadKind::MultiValue => "multi-value",
        }
    }

    /// Number of distinct `(query, key, value)` heads for `n` recurrent heads.
    pub fn head_counts(self, n: usize) -> (usize, usize, usize) {
        match self {
            HeadKind::MultiHead => (n, n, n),
            HeadKind::MultiQuery => (n, 1, 1),
            HeadKind::MultiKey => (1, n, 1),
            HeadKind::MultiValue => (1, 1, n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadPattern {
    pub kind: HeadKind,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub d_model: usize,
}

/// Parameter counts of the six projection matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionCounts {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_g: usize,
    pub w_f: usize,
    pub w_o: usize,
}

impl ProjectionCounts {
    pub fn total(&self) -> usize {
        self.w_q + self.w_k + self.w_v + self.w_g + self.w_f + self.w_o
    }
}

pub fn projection_counts(p: &HeadPattern) -> ProjectionCounts {
    let (nq, nk, nv) = p.kind.head_counts(p.heads);
    let (n, k, v, d) = (p.heads, p.key_dim, p.value_dim, p.d_model);
    ProjectionCounts {
        w_q: nq * k * d,
        w_k: nk * k * d,
        w_v: nv * v * d,
        w_g: n * v * d,
        w_f: n * d,
        w_o: n * v * d,
    }
}

/// Projection parameters only; biases, conv kernels, gate and norm parameters are excluded.
pub fn param_count(p: &HeadPattern) -> usize {
    projection_counts(p).total()
}

/// `N·K·V` state entries per sequence.
pub fn state_size(p: &HeadPattern) -> usize {
    p.heads * p.key_dim * p.value_dim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;
    use crate::oracles::{layer_fd_grads, layer_tape_grads};

    fn small_cfg() -> LayerConfig {
        LayerConfig::new(16, 2, 8, 4)
    }

    fn rand_params(cfg: LayerConfig, seed: u64) -> LayerParams<f64> {
        let mut p = LayerParams::<f64>::init(cfg, seed).unwrap();
        // larger than the default init so every path carries signal
        let mut rng = SeededRng::new(seed + 1000);
        for (name, t) in p.named_mut() {
            if name.starts_with("w_") && name != "w_r" || name.starts_with("b_") {
                *t = rng.normal_tensor(t.shape(), 0.3);
            }
        }
        p.w_r = rng.uniform_tensor(p.w_r.shape(), 0.5, 1.5);
        p.norm_weight = rng.uniform_tensor(p.norm_weight.shape(), 0.5, 1.5);
        p
    }

    #[test]
    fn delta_conv_passes_the_current_step_through() {
        let mut cfg = small_cfg();
        cfg.conv_init = ConvInit::Delta;
        let p = LayerParams::<f64>::init(cfg, 4).unwrap();
        let x = SeededRng::new(5).normal_tensor(&[6, 8], 1.0);
        assert_eq!(conv_rows(&x, &p.conv_v, 2).unwrap(), x);
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let mut p = rand_params(small_cfg(), 1);
        p.w_o.fill(0.0);
        let x = SeededRng::new(2).normal_tensor(&[2, 5, 16], 1.0);
        let (o, _) = layer_forward(&p, &x).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_causal() {
        let p = rand_params(small_cfg(), 3);
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor(&[1, 8, 16], 1.0);
        let (o, c) = layer_forward_cached(&p, &x).unwrap();
        let c = c.pre;
        for t in 0..7 {
            let mut x2 = x.clone();
            for i in (t + 1) * 16..8 * 16 {
                x2.data_mut()[i] += rng.normal();
            }
            let (o2, c2) = layer_forward_cached(&p, &x2).unwrap();
            let c2 = c2.pre;
            assert_eq!(&o.data()[..(t + 1) * 16], &o2.data()[..(t + 1) * 16]);
            for (a, b) in [
                (&c.q.out, &c2.q.out),
                (&c.k.out, &c2.k.out),
                (&c.v.out, &c2.v.out),
                (&c.g.out, &c2.g.out),
            ] {
                let w = a.cols();
                assert_eq!(&a.data()[..(t + 1) * w], &b.data()[..(t + 1) * w]);
            }
            assert_eq!(&c.f.data()[..(t + 1) * 2], &c2.f.data()[..(t + 1) * 2]);
        }
    }

    #[test]
    fn output_stays_finite_on_large_inputs() {
        let mut cfg = small_cfg();
        cfg.transition_init = TransitionInit::Normal;
        let p = rand_params(cfg, 5);
        let mut rng = SeededRng::new(6);
        for _ in 0..1000 {
            let x = rng.normal_tensor(&[1, 3, 16], 50.0);
            let (o, h) = layer_forward(&p, &x).unwrap();
            assert!(o.all_finite() && h.all_finite());
        }
    }

    fn check_layer_grads(cfg: LayerConfig, seed: u64) {
        let p = rand_params(cfg, seed);
        let mut rng = SeededRng::new(seed + 7);
        let x = rng.normal_tensor(&[1, 4, cfg.d_model], 1.0);
        let d_out = rng.normal_tensor(&[1, 4, cfg.d_model], 1.0);
        let (_, cache) = layer_forward_cached(&p, &x).unwrap();
        let (g, dx) = layer_backward(&p, &cache, &d_out, None).unwrap();
        let (tg, tdx) = layer_tape_grads(&p, &x, &d_out).unwrap();
        let (fg, fdx) = layer_fd_grads(&p, &x, &d_out, 1e-5);
        assert!(rel_error(&dx, &tdx) <= 1e-10, "dx vs tape");
        assert!(rel_error(&dx, &fdx) <= 1e-4, "dx vs fd");
        for (((name, a), (_, t)), (_, f)) in g.named().into_iter().zip(tg.named()).zip(fg.named()) {
            assert!(rel_error(a, t) <= 1e-10, "{name} vs tape: {}", rel_error(a, t));
            assert!(rel_error(a, f) <= 1e-4, "{name} vs fd: {}", rel_error(a, f));
        }
    }

    #[test]
    fn layer_gradients_match_oracles_for_every_transition_init() {
        for (i, init) in [
            TransitionInit::Identity,
            TransitionInit::Orthogonal,
            TransitionInit::Normal,
        ]
        .into_iter()
        .enumerate()
        {
            let mut cfg = small_cfg();
            cfg.transition_init = init;
            check_layer_grads(cfg, 10 + i as u64);
        }
    }

    #[test]
    fn layer_gradients_match_oracles_with_per_head_norm() {
        let mut cfg = small_cfg();
        cfg.norm = NormMode::PerHead;
        check_layer_grads(cfg, 20);
    }

    #[test]
    fn batched_layer_matches_rows_run_separately() {
        let p = rand_params(small_cfg(), 30);
        let x = SeededRng::new(31).normal_tensor(&[3, 5, 16], 1.0);
        let (o, h) = layer_forward(&p, &x).unwrap();
        for b in 0..3 {
            let xb = x.block(b * 80, &[1, 5, 16]);
            let (ob, hb) = layer_forward(&p, &xb).unwrap();
            assert_eq!(&o.data()[b * 80..(b + 1) * 80], ob.data());
            assert_eq!(&h.data()[b * 64..(b + 1) * 64], hb.data());
        }
    }

    #[test]
    fn transition_inits() {
        let w = init_transition::<f64>(TransitionInit::Identity, 3, 5, 0);
        for n in 0..3 {
            assert_eq!(w.block(n * 25, &[5, 5]), Tensor::eye(5));
        }
        let w = init_transition::<f64>(TransitionInit::Orthogonal, 4, 16, 9);
        for n in 0..4 {
            let m = w.block(n * 256, &[16, 16]);
            let gram = matmul_nt(&m, &m).unwrap();
            assert!(gram.sub(&Tensor::eye(16)).unwrap().max_abs() <= 1e-10);
        }
        let v = 64;
        let w = init_transition::<f64>(TransitionInit::Normal, 2, v, 3);
        let var = w.sum_sq() / w.len() as f64;
        assert!((var * v as f64 - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(LayerConfig::new(4, 1, 1, 1).transition_init, TransitionInit::Identity);
    }

    #[test]
    fn init_respects_config() {
        let p = LayerParams::<f64>::init(small_cfg(), 4).unwrap();
        p.validate().unwrap();
        assert_eq!(p, LayerParams::init(small_cfg(), 4).unwrap());
        assert!(p.w_r.data().iter().all(|&x| x == 1.0));
        assert!(p.b_q.data().iter().all(|&x| x == 0.0));
        assert!(p.w_q.max_abs() <= 0.04);
        assert!(LayerParams::<f64>::init(LayerConfig::new(4, 0, 2, 2), 0).is_err());
    }

    #[test]
    fn multi_value_layer_matches_its_count_formula() {
        let cfg = LayerConfig::new(24, 3, 8, 4);
        let p = LayerParams::<f64>::init(cfg, 0).unwrap();
        let pattern = HeadPattern {
            kind: HeadKind::MultiValue,
            heads: 3,
            key_dim: 8,
            value_dim: 4,
            d_model: 24,
        };
        assert_eq!(p.projection_param_count(), param_count(&pattern));
        assert_eq!(cfg.state_size(), state_size(&pattern));
    }

    #[test]
    fn reference_configuration_counts() {
        let mv = HeadPattern {
            kind: HeadKind::MultiValue,
            heads: 4,
            key_dim: 64,
            value_dim: 16,
            d_model: 256,
        };
        let c = projection_counts(&mv);
        assert_eq!(
            (c.w_q, c.w_k, c.w_v, c.w_g, c.w_f, c.w_o),
            (16384, 16384, 16384, 16384, 1024, 16384)
        );
        assert_eq!(param_count(&mv), 82944);
        assert_eq!(state_size(&HeadPattern { heads: 42, ..mv }), 43008);
        assert_eq!(state_size(&HeadPattern { heads: 84, ..mv }), 86016);
        assert_eq!(
            state_size(&HeadPattern {
                heads: 1,
                key_dim: 1,
                value_dim: 1,
                ..mv
            }),
            1
        );
    }

    #[test]
    fn single_head_patterns_coincide() {
        for d in [8, 64, 256] {
            let counts: Vec<usize> = HeadKind::ALL
                .iter()
                .map(|&kind| {
                    param_count(&HeadPattern {
                        kind,
                        heads: 1,
                        key_dim: 64,
                        value_dim: 16,
                        d_model: d,
                    })
                })
                .collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
