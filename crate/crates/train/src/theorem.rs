//! Embedding a vector RNN `h_t = tanh(W h_{t-1} + u_t)` into the matrix recurrence.
//!
//! With `f = 0`, `H_0 = 0`, `q = k = e_1` and `v_t = u_t`, only the first row
//! of `H_t` is ever non-zero and it evolves as `tanh(h_{t-1}ᵀ W_m + u_tᵀ)`.
//! Choosing the transition `W_m = Wᵀ` makes that row, and hence the readout
//! `y_t = H_tᵀ e_1`, equal to `h_t`.

use m2rnn_core::{m2rnn_forward, vector_rnn_scan, RecurrenceInputs, SeededRng, Tensor, VectorRnnParams};

use crate::error::{Result, TrainError};

/// Recurrence inputs reproducing `vector_rnn_scan(w, u)` for `u: [B, T, V]`, using key width `key_dim`.
pub fn embed_vector_rnn(w: &Tensor<f64>, u: &Tensor<f64>, key_dim: usize) -> Result<RecurrenceInputs<f64>> {
    let s = u.shape();
    let width = w.rows();
    if w.cols() != width || s.len() != 3 || s[2] != width || key_dim == 0 {
        return Err(TrainError::Config(format!(
            "vector RNN of width {width} (W {:?}) cannot drive inputs {s:?} with key width {key_dim}",
            w.shape()
        )));
    }
    let (batch, steps) = (s[0], s[1]);
    let e1 = Tensor::from_fn(&[batch, steps, key_dim], |i| if i % key_dim == 0 { 1.0 } else { 0.0 });
    Ok(RecurrenceInputs {
        queries: e1.clone(),
        keys: e1,
        values: u.reshape(&[batch, steps, 1, width])?,
        forget: Tensor::zeros(&[batch, steps, 1]),
        h0: Tensor::zeros(&[batch, 1, key_dim, width]),
        transition: w.transpose().into_shape(&[1, width, width])?,
    })
}

/// Max over all steps of `|y_t − h_t|` for the vector RNN's own inputs `u`.
pub fn reduction_deviation(w: &Tensor<f64>, u: &Tensor<f64>, key_dim: usize) -> Result<f64> {
    let inputs = embed_vector_rnn(w, u, key_dim)?;
    let (y, _) = m2rnn_forward(&inputs)?;
    let h = vector_rnn_scan(w, u)?;
    Ok(y.data()
        .iter()
        .zip(h.data())
        .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
}

/// Draws `T` standard-normal inputs from `seed` and measures the deviation for `p`.
pub fn theorem_reduction_check(p: &VectorRnnParams<f64>, steps: usize, seed: u64) -> Result<f64> {
    let u = SeededRng::new(seed).normal_tensor(&[1, steps, p.width()], 1.0);
    reduction_deviation(&p.w, &u, p.width())
}
