//! The matrix-state recurrence in its multi-value form.
//!
//! For every batch row `b` and value head `n`, with a query/key head shared by
//! all value heads:
//!
//! ```text
//! Z_t = tanh(H_{t-1}·W_n + k_t v_tᵀ)
//! H_t = f_t·H_{t-1} + (1 - f_t)·Z_t
//! y_t = H_tᵀ q_t
//! ```
//!
//! `(b, n)` pairs are independent work items and run in parallel; the time loop
//! inside an item is sequential. Cross-item reductions (query/key gradients over
//! heads, transition gradients over the batch) happen afterwards in a fixed
//! ascending order, so results are bitwise reproducible.

use rayon::prelude::*;

use crate::error::{dim_err, CoreError, Result};
use crate::kernels::{sigmoid, softplus, tanh};
use crate::random::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{matmul, outer, Tensor};

/// Inputs of one recurrence call.
///
/// Shapes: `queries`, `keys`: `[B, T, K]`; `values`: `[B, T, N, V]`;
/// `forget`: `[B, T, N]` in `[0, 1]`; `h0`: `[B, N, K, V]`; `transition`: `[N, V, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceInputs<T> {
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub forget: Tensor<T>,
    pub h0: Tensor<T>,
    pub transition: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecurrenceDims {
    pub batch: usize,
    pub steps: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl RecurrenceDims {
    fn q_off(&self, b: usize, t: usize) -> usize {
        (b * self.steps + t) * self.key_dim
    }
    fn v_off(&self, b: usize, t: usize, n: usize) -> usize {
        ((b * self.steps + t) * self.heads + n) * self.value_dim
    }
    fn f_off(&self, b: usize, t: usize, n: usize) -> usize {
        (b * self.steps + t) * self.heads + n
    }
    fn h0_off(&self, b: usize, n: usize) -> usize {
        (b * self.heads + n) * self.key_dim * self.value_dim
    }
    fn hfull_off(&self, b: usize, t: usize, n: usize) -> usize {
        ((b * self.steps + t) * self.heads + n) * self.key_dim * self.value_dim
    }
    fn state_len(&self) -> usize {
        self.key_dim * self.value_dim
    }

    pub fn y_shape(&self) -> [usize; 4] {
        [self.batch, self.steps, self.heads, self.value_dim]
    }

    pub fn state_shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.key_dim, self.value_dim]
    }

    pub fn full_state_shape(&self) -> [usize; 5] {
        [self.batch, self.steps, self.heads, self.key_dim, self.value_dim]
    }
}

impl<T: Scalar> RecurrenceInputs<T> {
    /// Validates all shapes against each other and returns the dimensions.
    pub fn dims(&self) -> Result<RecurrenceDims> {
        let q = self.queries.shape();
        let v = self.values.shape();
        if q.len() != 3 {
            return Err(dim_err("recurrence queries", q, &[0, 0, 0]));
        }
        if v.len() != 4 || v[0] != q[0] || v[1] != q[1] {
            return Err(dim_err("recurrence values", q, v));
        }
        let d = RecurrenceDims {
            batch: q[0],
            steps: q[1],
            heads: v[2],
            key_dim: q[2],
            value_dim: v[3],
        };
        let expect = |name: &'static str, t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(dim_err(name, shape, t.shape()))
            }
        };
        expect("recurrence keys", &self.keys, q)?;
        expect("recurrence forget", &self.forget, &[d.batch, d.steps, d.heads])?;
        expect("recurrence h0", &self.h0, &d.state_shape())?;
        expect(
            "recurrence transition",
            &self.transition,
            &[d.heads, d.value_dim, d.value_dim],
        )?;
        Ok(d)
    }
}

/// Gradients of a scalar loss with respect to every [`RecurrenceInputs`] field.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceGrads<T> {
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub transition: Tensor<T>,
    pub forget: Tensor<T>,
    pub h0: Tensor<T>,
}

impl<T: Scalar> RecurrenceGrads<T> {
    /// `(name, gradient)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("dQ", &self.queries),
            ("dK", &self.keys),
            ("dV", &self.values),
            ("dW", &self.transition),
            ("dF", &self.forget),
            ("dH0", &self.h0),
        ]
    }
}

/// `ψ(x) = (1 + e^{x+β})^{-α}`, evaluated as `exp(-α·softplus(x + β))`.
#[inline]
pub fn forget_gate_scalar<T: Scalar>(x: T, alpha: T, beta: T) -> T {
    (-alpha * softplus(x + beta)).exp()
}

/// Elementwise forget gate with per-call `alpha > 0` and `beta`.
pub fn forget_gate<T: Scalar>(x: &Tensor<T>, alpha: T, beta: T) -> Tensor<T> {
    x.map(|v| forget_gate_scalar(v, alpha, beta))
}

/// Partial derivatives of `f = ψ(x; α, β)` given `f` itself:
/// `(∂f/∂x, ∂f/∂α, ∂f/∂β)`; `∂f/∂β` equals `∂f/∂x`.
#[inline]
pub fn forget_gate_partials<T: Scalar>(x: T, alpha: T, beta: T, f: T) -> (T, T, T) {
    let u = x + beta;
    let dx = -alpha * f * sigmoid(u);
    let dalpha = -softplus(u) * f;
    (dx, dalpha, dx)
}

/// Per-head forget-gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgetGateParams<T> {
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

/// `α_n ~ Uniform(α_min, α_max)`, `β_n ~ LogUniform(β_min, β_max)`.
pub fn forget_gate_init<T: Scalar>(
    num_heads: usize,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
    seed: u64,
) -> Result<ForgetGateParams<T>> {
    let valid = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
    if num_heads == 0 || !valid(alpha_range) || !valid(beta_range) {
        return Err(CoreError::Config(format!(
            "forget gate init needs 0 < min <= max, got alpha {alpha_range:?}, beta {beta_range:?} for {num_heads} heads"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let alpha = Tensor::from_fn(&[num_heads], |_| T::lit(rng.uniform(alpha_range.0, alpha_range.1)));
    let (lo, hi) = (beta_range.0.ln(), beta_range.1.ln());
    let beta = Tensor::from_fn(&[num_heads], |_| T::lit(rng.uniform(lo, hi).exp()));
    Ok(ForgetGateParams { alpha, beta })
}

/// Rescales `p` to Frobenius norm `clip` when it exceeds it.
pub fn clip_state_gradient<T: Scalar>(p: &Tensor<T>, clip: T) -> Tensor<T> {
    let mut out = p.clone();
    clip_in_place(out.data_mut(), clip);
    out
}

fn clip_in_place<T: Scalar>(p: &mut [T], clip: T) {
    let norm = p.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    if norm > clip {
        let scale = clip / norm;
        p.iter_mut().for_each(|x| *x *= scale);
    }
}

/// `z = tanh(h·w + k vᵀ)` for one `K×V` state. Each entry sums over `j` in
/// ascending order; the loops run row-wise so the inner one is contiguous.
#[inline]
fn candidate<T: Scalar>(h: &[T], w: &[T], k: &[T], v: &[T], z: &mut [T]) {
    let vd = v.len();
    for ((hrow, zrow), &ki) in h.chunks_exact(vd).zip(z.chunks_exact_mut(vd)).zip(k) {
        zrow.fill(T::zero());
        for (&hij, wrow) in hrow.iter().zip(w.chunks_exact(vd)) {
            for (acc, &wjc) in zrow.iter_mut().zip(wrow) {
                *acc += hij * wjc;
            }
        }
        for (zc, &vc) in zrow.iter_mut().zip(v) {
            *zc = (*zc + ki * vc).tanh();
        }
    }
}

#[inline]
fn gated_update<T: Scalar>(h: &mut [T], z: &[T], f: T) {
    let omf = T::one() - f;
    for (hi, &zi) in h.iter_mut().zip(z) {
        *hi = f * *hi + omf * zi;
    }
}

/// `y = hᵀ q`, summed over the key dimension in ascending order.
#[inline]
fn readout<T: Scalar>(h: &[T], q: &[T], y: &mut [T]) {
    let vd = y.len();
    y.fill(T::zero());
    for (hrow, &qi) in h.chunks_exact(vd).zip(q) {
        for (yc, &hic) in y.iter_mut().zip(hrow) {
            *yc += hic * qi;
        }
    }
}

struct ScanOut<T> {
    y: Vec<T>,
    states: Vec<T>,
}

/// Runs one `(b, n)` item. With `keep_all`, `states` holds every `H_t`;
/// otherwise only the final state, and `y` is filled only when `readout_y`.
fn scan_item<T: Scalar>(
    inp: &RecurrenceInputs<T>,
    d: &RecurrenceDims,
    b: usize,
    n: usize,
    keep_all: bool,
    readout_y: bool,
) -> ScanOut<T> {
    let (kd, vd, sl) = (d.key_dim, d.value_dim, d.state_len());
    let w = &inp.transition.data()[n * vd * vd..(n + 1) * vd * vd];
    let mut h = inp.h0.data()[d.h0_off(b, n)..d.h0_off(b, n) + sl].to_vec();
    let mut z = vec![T::zero(); sl];
    let mut y = if readout_y {
        vec![T::zero(); d.steps * vd]
    } else {
        Vec::new()
    };
    let mut states = Vec::with_capacity(if keep_all { d.steps * sl } else { sl });
    for t in 0..d.steps {
        let k = &inp.keys.data()[d.q_off(b, t)..d.q_off(b, t) + kd];
        let v = &inp.values.data()[d.v_off(b, t, n)..d.v_off(b, t, n) + vd];
        let f = inp.forget.data()[d.f_off(b, t, n)];
        candidate(&h, w, k, v, &mut z);
        gated_update(&mut h, &z, f);
        if readout_y {
            let q = &inp.queries.data()[d.q_off(b, t)..d.q_off(b, t) + kd];
            readout(&h, q, &mut y[t * vd..(t + 1) * vd]);
        }
        if keep_all {
            states.extend_from_slice(&h);
        }
    }
    if !keep_all {
        states = h;
    }
    ScanOut { y, states }
}

fn items(d: &RecurrenceDims) -> Vec<(usize, usize)> {
    (0..d.batch).flat_map(|b| (0..d.heads).map(move |n| (b, n))).collect()
}

/// Fused forward scan. Returns `Y: [B, T, N, V]` and the final state
/// `H_T: [B, N, K, V]`; intermediate states are not stored.
pub fn m2rnn_forward<T: Scalar>(inputs: &RecurrenceInputs<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = inputs.dims()?;
    let outs: Vec<ScanOut<T>> = items(&d)
        .into_par_iter()
        .map(|(b, n)| scan_item(inputs, &d, b, n, false, true))
        .collect();
    let mut y = Tensor::zeros(&d.y_shape());
    let mut h_last = Tensor::zeros(&d.state_shape());
    for ((b, n), out) in items(&d).into_iter().zip(outs) {
        for t in 0..d.steps {
            let o = d.v_off(b, t, n);
            y.data_mut()[o..o + d.value_dim].copy_from_slice(&out.y[t * d.value_dim..(t + 1) * d.value_dim]);
        }
        let o = d.h0_off(b, n);
        h_last.data_mut()[o..o + d.state_len()].copy_from_slice(&out.states);
    }
    Ok((y, h_last))
}

/// First pass of the backward algorithm: recompute the scan without the query
/// readout and keep every state. Returns `H_full: [B, T, N, K, V]`.
pub fn m2rnn_forward_cached<T: Scalar>(inputs: &RecurrenceInputs<T>) -> Result<Tensor<T>> {
    let d = inputs.dims()?;
    let outs: Vec<ScanOut<T>> = items(&d)
        .into_par_iter()
        .map(|(b, n)| scan_item(inputs, &d, b, n, true, false))
        .collect();
    let mut full = Tensor::zeros(&d.full_state_shape());
    let sl = d.state_len();
    for ((b, n), out) in items(&d).into_iter().zip(outs) {
        for t in 0..d.steps {
            let o = d.hfull_off(b, t, n);
            full.data_mut()[o..o + sl].copy_from_slice(&out.states[t * sl..(t + 1) * sl]);
        }
    }
    Ok(full)
}

/// `Y[b,t,n,:] = H_full[b,t,n]ᵀ q[b,t]`.
pub fn readout_from_states<T: Scalar>(h_full: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let s = h_full.shape();
    if s.len() != 5 || queries.shape() != [s[0], s[1], s[3]] {
        return Err(dim_err("readout_from_states", s, queries.shape()));
    }
    let (bsz, steps, heads, kd, vd) = (s[0], s[1], s[2], s[3], s[4]);
    let mut y = Tensor::zeros(&[bsz, steps, heads, vd]);
    for bt in 0..bsz * steps {
        let q = &queries.data()[bt * kd..(bt + 1) * kd];
        for n in 0..heads {
            let h = &h_full.data()[(bt * heads + n) * kd * vd..(bt * heads + n + 1) * kd * vd];
            readout(
                h,
                q,
                &mut y.data_mut()[(bt * heads + n) * vd..(bt * heads + n + 1) * vd],
            );
        }
    }
    Ok(y)
}

struct ItemGrads<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
    df: Vec<T>,
    dw: Vec<T>,
    dh0: Vec<T>,
}

fn backward_item<T: Scalar>(
    inp: &RecurrenceInputs<T>,
    d: &RecurrenceDims,
    h_full: &[T],
    dy_all: &[T],
    clip: Option<T>,
    b: usize,
    n: usize,
) -> ItemGrads<T> {
    let (kd, vd, sl) = (d.key_dim, d.value_dim, d.state_len());
    let w = &inp.transition.data()[n * vd * vd..(n + 1) * vd * vd];
    let h0 = &inp.h0.data()[d.h0_off(b, n)..d.h0_off(b, n) + sl];
    let mut out = ItemGrads {
        dq: vec![T::zero(); d.steps * kd],
        dk: vec![T::zero(); d.steps * kd],
        dv: vec![T::zero(); d.steps * vd],
        df: vec![T::zero(); d.steps],
        dw: vec![T::zero(); vd * vd],
        dh0: Vec::new(),
    };
    // gradient reaching H_t from steps after t
    let mut carry = vec![T::zero(); sl];
    let mut z = vec![T::zero(); sl];
    let mut g = vec![T::zero(); sl];
    let mut dx = vec![T::zero(); sl];
    let mut dw_t = vec![T::zero(); vd * vd];
    // wt[c][j] = w[j][c]
    let wt: Vec<T> = (0..vd * vd).map(|i| w[(i % vd) * vd + i / vd]).collect();
    for t in (0..d.steps).rev() {
        let h_prev = if t == 0 {
            h0
        } else {
            &h_full[d.hfull_off(b, t - 1, n)..d.hfull_off(b, t - 1, n) + sl]
        };
        let h_cur = &h_full[d.hfull_off(b, t, n)..d.hfull_off(b, t, n) + sl];
        let q = &inp.queries.data()[d.q_off(b, t)..d.q_off(b, t) + kd];
        let k = &inp.keys.data()[d.q_off(b, t)..d.q_off(b, t) + kd];
        let v = &inp.values.data()[d.v_off(b, t, n)..d.v_off(b, t, n) + vd];
        let dy = &dy_all[d.v_off(b, t, n)..d.v_off(b, t, n) + vd];
        let f = inp.forget.data()[d.f_off(b, t, n)];
        let omf = T::one() - f;

        candidate(h_prev, w, k, v, &mut z);

        for i in 0..kd {
            for c in 0..vd {
                g[i * vd + c] = q[i] * dy[c] + carry[i * vd + c];
            }
        }
        for i in 0..kd {
            let mut acc = T::zero();
            for c in 0..vd {
                acc += h_cur[i * vd + c] * dy[c];
            }
            out.dq[t * kd + i] = acc;
        }
        let mut df = T::zero();
        for idx in 0..sl {
            df += g[idx] * (h_prev[idx] - z[idx]);
            dx[idx] = g[idx] * omf * (T::one() - z[idx] * z[idx]);
        }
        out.df[t] = df;

        // carry ← f·G + dX·Wᵀ, summing over c ascending
        for ((crow, dxrow), grow) in carry
            .chunks_exact_mut(vd)
            .zip(dx.chunks_exact(vd))
            .zip(g.chunks_exact(vd))
        {
            crow.fill(T::zero());
            for (&dxc, wtrow) in dxrow.iter().zip(wt.chunks_exact(vd)) {
                for (acc, &wjc) in crow.iter_mut().zip(wtrow) {
                    *acc += dxc * wjc;
                }
            }
            for (cj, &gj) in crow.iter_mut().zip(grow) {
                *cj = f * gj + *cj;
            }
        }
        if let Some(c) = clip {
            clip_in_place(&mut carry, c);
        }

        // dW += H_prevᵀ dX, summing over i ascending before accumulating
        dw_t.fill(T::zero());
        for (hrow, dxrow) in h_prev.chunks_exact(vd).zip(dx.chunks_exact(vd)) {
            for (&hij, accrow) in hrow.iter().zip(dw_t.chunks_exact_mut(vd)) {
                for (acc, &dxc) in accrow.iter_mut().zip(dxrow) {
                    *acc += hij * dxc;
                }
            }
        }
        for (d, &x) in out.dw.iter_mut().zip(&dw_t) {
            *d += x;
        }
        for (i, dxrow) in dx.chunks_exact(vd).enumerate() {
            out.dk[t * kd + i] = dxrow.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
        let dv = &mut out.dv[t * vd..(t + 1) * vd];
        for (dxrow, &ki) in dx.chunks_exact(vd).zip(k) {
            for (acc, &dxc) in dv.iter_mut().zip(dxrow) {
                *acc += dxc * ki;
            }
        }
    }
    out.dh0 = carry;
    out
}

/// Second pass of the backward algorithm: reverse sweep over the cached states.
///
/// With `G_t = q_t dy_tᵀ + P_{t+1}` the total gradient reaching `H_t`:
/// `dX_t = (1 - f_t)·G_t ⊙ (1 - Z_t²)`, `P_t = f_t·G_t + dX_t Wᵀ` (norm-clipped to
/// `clip` per `(b, n)` when set), `df_t = Σ G_t ⊙ (H_{t-1} - Z_t)`,
/// `dW += H_{t-1}ᵀ dX_t`, `dk_t = dX_t v_t`, `dv_t = dX_tᵀ k_t`, `dq_t = H_t dy_t`,
/// and `dH_0 = P_0`.
pub fn m2rnn_backward<T: Scalar>(
    inputs: &RecurrenceInputs<T>,
    h_full: &Tensor<T>,
    dy: &Tensor<T>,
    clip: Option<T>,
) -> Result<RecurrenceGrads<T>> {
    let d = inputs.dims()?;
    if h_full.shape() != d.full_state_shape() {
        return Err(dim_err("m2rnn_backward H_full", &d.full_state_shape(), h_full.shape()));
    }
    if dy.shape() != d.y_shape() {
        return Err(dim_err("m2rnn_backward dY", &d.y_shape(), dy.shape()));
    }
    let per_item: Vec<ItemGrads<T>> = items(&d)
        .into_par_iter()
        .map(|(b, n)| backward_item(inputs, &d, h_full.data(), dy.data(), clip, b, n))
        .collect();

    let (kd, vd, sl) = (d.key_dim, d.value_dim, d.state_len());
    let mut grads = RecurrenceGrads {
        queries: inputs.queries.zeros_like(),
        keys: inputs.keys.zeros_like(),
        values: inputs.values.zeros_like(),
        transition: inputs.transition.zeros_like(),
        forget: inputs.forget.zeros_like(),
        h0: inputs.h0.zeros_like(),
    };
    // items are ordered (b ascending, n ascending): head sums for dQ/dK and
    // batch sums for dW both accumulate in ascending index order
    for ((b, n), it) in items(&d).into_iter().zip(&per_item) {
        for t in 0..d.steps {
            let qo = d.q_off(b, t);
            for i in 0..kd {
                grads.queries.data_mut()[qo + i] += it.dq[t * kd + i];
                grads.keys.data_mut()[qo + i] += it.dk[t * kd + i];
            }
            let vo = d.v_off(b, t, n);
            grads.values.data_mut()[vo..vo + vd].copy_from_slice(&it.dv[t * vd..(t + 1) * vd]);
            grads.forget.data_mut()[d.f_off(b, t, n)] = it.df[t];
        }
        let ho = d.h0_off(b, n);
        grads.h0.data_mut()[ho..ho + sl].copy_from_slice(&it.dh0);
    }
    for n in 0..d.heads {
        let dst = &mut grads.transition.data_mut()[n * vd * vd..(n + 1) * vd * vd];
        for b in 0..d.batch {
            for (acc, &x) in dst.iter_mut().zip(&per_item[b * d.heads + n].dw) {
                *acc += x;
            }
        }
    }
    Ok(grads)
}

/// Straight-line per-timestep evaluation composed from generic tensor kernels.
/// Shares the fused scan's summation order, so the two agree bitwise.
pub fn m2rnn_forward_reference<T: Scalar>(inputs: &RecurrenceInputs<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = inputs.dims()?;
    let (kd, vd) = (d.key_dim, d.value_dim);
    let mut y = Tensor::zeros(&d.y_shape());
    let mut h_last = Tensor::zeros(&d.state_shape());
    for b in 0..d.batch {
        for n in 0..d.heads {
            let w = inputs.transition.block(n * vd * vd, &[vd, vd]);
            let mut h = inputs.h0.block(d.h0_off(b, n), &[kd, vd]);
            for t in 0..d.steps {
                let q = inputs.queries.block(d.q_off(b, t), &[kd, 1]);
                let k = inputs.keys.block(d.q_off(b, t), &[kd]);
                let v = inputs.values.block(d.v_off(b, t, n), &[vd]);
                let f = inputs.forget.data()[d.f_off(b, t, n)];
                let z = tanh(&matmul(&h, &w)?.add(&outer(&k, &v))?);
                h = h.scale(f).add(&z.scale(T::one() - f))?;
                let yt = matmul(&h.transpose(), &q)?;
                y.write_block(d.v_off(b, t, n), &yt);
            }
            h_last.write_block(d.h0_off(b, n), &h);
        }
    }
    Ok((y, h_last))
}
