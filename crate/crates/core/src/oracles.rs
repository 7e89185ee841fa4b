//! Independent gradient oracles: every hand-written backward pass in this crate
//! is checked against a reverse-mode tape over the same computation and against
//! central finite differences of the forward pass.

use crate::baselines::{DiagLinearRnnParams, GruParams, VectorRnnParams};
use crate::error::Result;
use crate::gradcheck::finite_difference_grad;
use crate::layer::{layer_forward, LayerParams};
use crate::params::ParamSet;
use crate::random::SeededRng;
use crate::recurrence::{m2rnn_forward, RecurrenceDims, RecurrenceGrads, RecurrenceInputs};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Well-conditioned random inputs for gradient checks.
pub fn random_recurrence_inputs<T: Scalar>(d: &RecurrenceDims, seed: u64) -> RecurrenceInputs<T> {
    let mut rng = SeededRng::new(seed);
    let (b, t, n, k, v) = (d.batch, d.steps, d.heads, d.key_dim, d.value_dim);
    let qk_std = T::lit(1.0 / (k as f64).sqrt());
    RecurrenceInputs {
        queries: rng.normal_tensor(&[b, t, k], qk_std),
        keys: rng.normal_tensor(&[b, t, k], qk_std),
        values: rng.normal_tensor(&[b, t, n, v], T::lit(0.7)),
        forget: rng.uniform_tensor(&[b, t, n], T::lit(0.05), T::lit(0.95)),
        h0: rng.uniform_tensor(&[b, n, k, v], T::lit(-0.5), T::lit(0.5)),
        transition: rng.normal_tensor(&[n, v, v], T::lit(1.0 / (v as f64).sqrt())),
    }
}

/// Leaves of a recurrence graph on a tape.
pub struct RecurrenceVars {
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    pub forget: Var,
    pub h0: Var,
    pub transition: Var,
}

/// Builds the recurrence from elementary tape nodes. Returns `Y` as a
/// `[B, T, N, V]` node.
pub fn tape_recurrence<T: Scalar>(tape: &mut Tape<T>, d: &RecurrenceDims, vars: &RecurrenceVars) -> Var {
    let (kd, vd) = (d.key_dim, d.value_dim);
    let mut ys = Vec::with_capacity(d.batch * d.steps * d.heads);
    let mut per_item: Vec<Vec<Var>> = Vec::new();
    for b in 0..d.batch {
        for n in 0..d.heads {
            let w = tape.slice(vars.transition, n * vd * vd, &[vd, vd]);
            let mut h = tape.slice(vars.h0, (b * d.heads + n) * kd * vd, &[kd, vd]);
            let mut outs = Vec::with_capacity(d.steps);
            for t in 0..d.steps {
                let qo = (b * d.steps + t) * kd;
                let q = tape.slice(vars.queries, qo, &[kd, 1]);
                let k = tape.slice(vars.keys, qo, &[kd]);
                let v = tape.slice(vars.values, ((b * d.steps + t) * d.heads + n) * vd, &[vd]);
                let f = tape.slice(vars.forget, (b * d.steps + t) * d.heads + n, &[1]);
                let hw = tape.matmul(h, w);
                let kv = tape.outer(k, v);
                let pre = tape.add(hw, kv);
                let z = tape.tanh(pre);
                let keep = tape.scale_by(h, f);
                let omf = tape.affine(f, -T::one(), T::one());
                let upd = tape.scale_by(z, omf);
                h = tape.add(keep, upd);
                let ht = tape.transpose(h);
                outs.push(tape.matmul(ht, q));
            }
            per_item.push(outs);
        }
    }
    for b in 0..d.batch {
        for t in 0..d.steps {
            for n in 0..d.heads {
                ys.push(per_item[b * d.heads + n][t]);
            }
        }
    }
    tape.concat(&ys, &d.y_shape())
}

fn leaves<T: Scalar>(tape: &mut Tape<T>, inp: &RecurrenceInputs<T>) -> RecurrenceVars {
    RecurrenceVars {
        queries: tape.leaf(inp.queries.clone()),
        keys: tape.leaf(inp.keys.clone()),
        values: tape.leaf(inp.values.clone()),
        forget: tape.leaf(inp.forget.clone()),
        h0: tape.leaf(inp.h0.clone()),
        transition: tape.leaf(inp.transition.clone()),
    }
}

/// Gradients of `Σ Y ⊙ dY` by reverse-mode differentiation of the tape graph.
pub fn recurrence_tape_grads<T: Scalar>(inp: &RecurrenceInputs<T>, dy: &Tensor<T>) -> Result<RecurrenceGrads<T>> {
    let d = inp.dims()?;
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inp);
    let y = tape_recurrence(&mut tape, &d, &vars);
    let probe = tape.leaf(dy.clone());
    let loss = tape.dot(y, probe);
    let g = tape.backward(loss)?;
    Ok(RecurrenceGrads {
        queries: g.wrt(vars.queries),
        keys: g.wrt(vars.keys),
        values: g.wrt(vars.values),
        transition: g.wrt(vars.transition),
        forget: g.wrt(vars.forget),
        h0: g.wrt(vars.h0),
    })
}

fn probe_loss<T: Scalar>(inp: &RecurrenceInputs<T>, dy: &Tensor<T>) -> T {
    let (y, _) = m2rnn_forward(inp).expect("probe forward");
    y.data()
        .iter()
        .zip(dy.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

/// Gradients of `Σ Y ⊙ dY` by central differences of the fused forward.
pub fn recurrence_fd_grads<T: Scalar>(inp: &RecurrenceInputs<T>, dy: &Tensor<T>, eps: f64) -> RecurrenceGrads<T> {
    let eps = T::lit(eps);
    let field = |pick: fn(&mut RecurrenceInputs<T>) -> &mut Tensor<T>| {
        let mut base = inp.clone();
        let x = pick(&mut base).clone();
        finite_difference_grad(
            |p| {
                let mut cur = inp.clone();
                *pick(&mut cur) = p.clone();
                probe_loss(&cur, dy)
            },
            &x,
            eps,
        )
    };
    RecurrenceGrads {
        queries: field(|i| &mut i.queries),
        keys: field(|i| &mut i.keys),
        values: field(|i| &mut i.values),
        transition: field(|i| &mut i.transition),
        forget: field(|i| &mut i.forget),
        h0: field(|i| &mut i.h0),
    }
}

/// Builds the full block on the tape from elementary nodes, including the
/// recurrence. Returns the leaves in [`ParamSet::named`] order, the input leaf
/// and the output `[B·T, d]`.
pub fn tape_layer<T: Scalar>(tape: &mut Tape<T>, p: &LayerParams<T>, x: &Tensor<T>) -> (Vec<Var>, Var, Var) {
    let (batch, steps, dm) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let bt = batch * steps;
    let cfg = p.cfg;
    let (n, kd, vd, nv) = (cfg.heads, cfg.key_dim, cfg.value_dim, cfg.value_width());
    let leaves: Vec<Var> = p.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let by_name = |name: &str| {
        let i = p.named().iter().position(|(n, _)| n == name).expect("param name");
        leaves[i]
    };
    let x_leaf = tape.leaf(x.clone());
    let x2 = tape.reshape(x_leaf, &[bt, dm]);

    let branch = |tape: &mut Tape<T>, w: &str, b: Option<&str>, kernel: Option<&str>| {
        let pre = tape.linear(x2, by_name(w), b.map(&by_name));
        let act_in = match kernel {
            None => pre,
            Some(k) => {
                let c = tape.value(pre).cols();
                let parts: Vec<Var> = (0..batch)
                    .map(|b| {
                        let rows = tape.slice(pre, b * steps * c, &[steps, c]);
                        tape.conv1d(rows, by_name(k), None)
                    })
                    .collect();
                tape.concat(&parts, &[bt, c])
            }
        };
        tape.silu(act_in)
    };
    let q = branch(tape, "w_q", Some("b_q"), Some("conv_q"));
    let k = branch(tape, "w_k", Some("b_k"), Some("conv_k"));
    let v = branch(tape, "w_v", Some("b_v"), Some("conv_v"));
    let g = branch(tape, "w_g", None, None);

    let xf = tape.matmul(x2, by_name("w_f"));
    let shifted = tape.add_row(xf, by_name("beta"));
    let sp = tape.softplus(shifted);
    let scaled = tape.mul_row(sp, by_name("alpha"));
    let neg = tape.affine(scaled, -T::one(), T::zero());
    let f = tape.exp(neg);

    let d = RecurrenceDims {
        batch,
        steps,
        heads: n,
        key_dim: kd,
        value_dim: vd,
    };
    let vars = RecurrenceVars {
        queries: tape.reshape(q, &[batch, steps, kd]),
        keys: tape.reshape(k, &[batch, steps, kd]),
        values: tape.reshape(v, &[batch, steps, n, vd]),
        forget: tape.reshape(f, &[batch, steps, n]),
        h0: tape.leaf(Tensor::zeros(&d.state_shape())),
        transition: by_name("transition"),
    };
    let y_rec = tape_recurrence(tape, &d, &vars);
    let y_rec = tape.reshape(y_rec, &[bt, nv]);
    let w_r = tape.reshape(by_name("w_r"), &[nv]);
    let res = tape.mul_row(v, w_r);
    let y = tape.add(y_rec, res);
    let yg = tape.mul(y, g);
    let normed = tape.rmsnorm_rows(yg, by_name("norm_weight"), cfg.norm_groups(), T::lit(cfg.norm_eps));
    let o = tape.matmul(normed, by_name("w_o"));
    (leaves, x_leaf, o)
}

/// Parameter and input gradients of `Σ o ⊙ d_out` from the tape graph.
pub fn layer_tape_grads<T: Scalar>(
    p: &LayerParams<T>,
    x: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(LayerParams<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (leaves, x_leaf, o) = tape_layer(&mut tape, p, x);
    let probe = tape.leaf(d_out.reshape(tape.value(o).shape())?);
    let loss = tape.dot(o, probe);
    let g = tape.backward(loss)?;
    let mut grads = p.zeros_like();
    for ((_, t), v) in grads.named_mut().into_iter().zip(&leaves) {
        *t = g.wrt(*v);
    }
    Ok((grads, g.wrt(x_leaf)))
}

/// Parameter and input gradients of `Σ o ⊙ d_out` by central differences.
pub fn layer_fd_grads<T: Scalar>(
    p: &LayerParams<T>,
    x: &Tensor<T>,
    d_out: &Tensor<T>,
    eps: f64,
) -> (LayerParams<T>, Tensor<T>) {
    let eps = T::lit(eps);
    let loss = |p: &LayerParams<T>, x: &Tensor<T>| {
        let (o, _) = layer_forward(p, x).expect("probe forward");
        o.data()
            .iter()
            .zip(d_out.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    };
    let mut grads = p.zeros_like();
    let count = p.named().len();
    for i in 0..count {
        let base = p.named()[i].1.clone();
        let g = finite_difference_grad(
            |t| {
                let mut q = p.clone();
                *q.named_mut().swap_remove(i).1 = t.clone();
                loss(&q, x)
            },
            &base,
            eps,
        );
        *grads.named_mut().swap_remove(i).1 = g;
    }
    let dx = finite_difference_grad(|t| loss(p, t), x, eps);
    (grads, dx)
}

/// Central-difference gradients of `Σ forward(p, x) ⊙ dy` for any parameter set.
pub fn baseline_fd_grads<T: Scalar, P: ParamSet<T> + Clone>(
    p: &P,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    forward: impl Fn(&P, &Tensor<T>) -> Tensor<T>,
    eps: f64,
) -> (P, Tensor<T>) {
    let eps = T::lit(eps);
    let loss = |p: &P, x: &Tensor<T>| {
        let y = forward(p, x);
        y.data()
            .iter()
            .zip(dy.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    };
    let mut grads = p.clone();
    for i in 0..p.named().len() {
        let base = p.named()[i].1.clone();
        let g = finite_difference_grad(
            |t| {
                let mut q = p.clone();
                *q.named_mut().swap_remove(i).1 = t.clone();
                loss(&q, x)
            },
            &base,
            eps,
        );
        *grads.named_mut().swap_remove(i).1 = g;
    }
    let dx = finite_difference_grad(|t| loss(p, t), x, eps);
    (grads, dx)
}

/// Runs `step` once per batch row on a tape with every parameter as a leaf,
/// then differentiates `Σ y ⊙ dy`. `step(tape, leaves, x_row)` gets the row's
/// input as a `[T, d]` node and returns its output `[T, H]`.
fn baseline_tape<T: Scalar, P: ParamSet<T> + Clone>(
    p: &P,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    step: impl Fn(&mut Tape<T>, &[Var], Var) -> Var,
) -> Result<(P, Tensor<T>)> {
    let (batch, steps, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut tape = Tape::new();
    let leaves: Vec<Var> = p.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let x_leaf = tape.leaf(x.clone());
    let outs: Vec<Var> = (0..batch)
        .map(|b| {
            let xb = tape.slice(x_leaf, b * steps * d, &[steps, d]);
            step(&mut tape, &leaves, xb)
        })
        .collect();
    let y = tape.concat(&outs, dy.shape());
    let probe = tape.leaf(dy.clone());
    let loss = tape.dot(y, probe);
    let g = tape.backward(loss)?;
    let mut grads = p.clone();
    for ((_, t), v) in grads.named_mut().into_iter().zip(&leaves) {
        *t = g.wrt(*v);
    }
    Ok((grads, g.wrt(x_leaf)))
}

fn row<T: Scalar>(tape: &mut Tape<T>, m: Var, t: usize) -> Var {
    let c = tape.value(m).cols();
    tape.slice(m, t * c, &[1, c])
}

pub fn vector_rnn_tape_grads<T: Scalar>(
    p: &VectorRnnParams<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(VectorRnnParams<T>, Tensor<T>)> {
    let steps = x.shape()[1];
    let width = p.width();
    baseline_tape(p, x, dy, |tape, l, xb| {
        let u = tape.linear(xb, l[0], Some(l[1]));
        let wt = tape.transpose(l[2]);
        let mut h = tape.leaf(Tensor::zeros(&[1, width]));
        let mut hs = Vec::new();
        for t in 0..steps {
            let rec = tape.matmul(h, wt);
            let ut = row(tape, u, t);
            let pre = tape.add(rec, ut);
            h = tape.tanh(pre);
            hs.push(h);
        }
        tape.concat(&hs, &[steps, width])
    })
}

pub fn gru_tape_grads<T: Scalar>(p: &GruParams<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(GruParams<T>, Tensor<T>)> {
    let steps = x.shape()[1];
    let width = p.width();
    baseline_tape(p, x, dy, |tape, l, xb| {
        let xz = tape.linear(xb, l[0], Some(l[2]));
        let xr = tape.linear(xb, l[3], Some(l[5]));
        let xh = tape.linear(xb, l[6], Some(l[8]));
        let mut h = tape.leaf(Tensor::zeros(&[1, width]));
        let mut hs = Vec::new();
        for t in 0..steps {
            let hz = tape.matmul(h, l[1]);
            let xzt = row(tape, xz, t);
            let az = tape.add(xzt, hz);
            let z = tape.sigmoid(az);
            let hr = tape.matmul(h, l[4]);
            let xrt = row(tape, xr, t);
            let ar = tape.add(xrt, hr);
            let r = tape.sigmoid(ar);
            let rh = tape.mul(r, h);
            let hc = tape.matmul(rh, l[7]);
            let xht = row(tape, xh, t);
            let ac = tape.add(xht, hc);
            let c = tape.tanh(ac);
            let keep = tape.mul(z, h);
            let omz = tape.affine(z, -T::one(), T::one());
            let upd = tape.mul(omz, c);
            h = tape.add(keep, upd);
            hs.push(h);
        }
        tape.concat(&hs, &[steps, width])
    })
}

pub fn diag_tape_grads<T: Scalar>(
    p: &DiagLinearRnnParams<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(DiagLinearRnnParams<T>, Tensor<T>)> {
    let steps = x.shape()[1];
    let (kd, vd) = (p.key_dim(), p.value_dim());
    baseline_tape(p, x, dy, |tape, l, xb| {
        let pre = tape.linear(xb, l[0], Some(l[1]));
        let a = tape.sigmoid(pre);
        let k = tape.matmul(xb, l[2]);
        let q = tape.matmul(xb, l[3]);
        let v = tape.matmul(xb, l[4]);
        let mut h = tape.leaf(Tensor::zeros(&[kd, vd]));
        let mut ys = Vec::new();
        for t in 0..steps {
            let at = tape.slice(a, t * kd, &[kd]);
            let kt = tape.slice(k, t * kd, &[kd]);
            let vt = tape.slice(v, t * vd, &[vd]);
            let qt = tape.slice(q, t * kd, &[kd, 1]);
            let decayed = tape.mul_col(h, at);
            let write = tape.outer(kt, vt);
            h = tape.add(decayed, write);
            let ht = tape.transpose(h);
            ys.push(tape.matmul(ht, qt));
        }
        tape.concat(&ys, &[steps, vd])
    })
}
