//! Reverse-mode automatic differentiation over whole tensors.
//!
//! This is an oracle: hand-written backward passes elsewhere in the crate are
//! checked against gradients computed here. Its local adjoint rules are written
//! out independently of those backward passes.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and [`Tape::backward`] walks it in exact reverse. Graph-construction
//! methods panic on shape mismatches; the tape is only driven by test and
//! verification code with known-good shapes.

use crate::error::{CoreError, Result};
use crate::kernels::{sigmoid, silu, silu_grad, softplus};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, outer, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Outer(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Tensor times a one-element node.
    ScaleBy(Var, Var),
    /// `m·x + c` with constant `m`, `c`.
    Affine(Var, T, T),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Softplus(Var),
    Powf(Var, T),
    Sum(Var),
    /// `[R×C] -> [R]`.
    RowSum(Var),
    /// `[R×C] + [C]`.
    AddRow(Var, Var),
    /// `[R×C] ⊙ [C]`.
    MulRow(Var, Var),
    /// `[R×C] ⊙ [R]`, one scale per row.
    MulCol(Var, Var),
    Conv1d(Var, Var, Option<Var>),
    /// Contiguous block starting at a flat offset.
    Slice(Var, usize),
    /// Flat concatenation.
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b)).expect("tape matmul");
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn outer(&mut self, u: Var, w: Var) -> Var {
        let v = outer(self.value(u), self.value(w));
        self.push(Op::Outer(u, w), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("tape add");
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("tape sub");
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b)).expect("tape mul");
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a).scale(self.value(s).item());
        self.push(Op::ScaleBy(a, s), v)
    }

    pub fn affine(&mut self, a: Var, m: T, c: T) -> Var {
        let v = self.value(a).map(|x| m * x + c);
        self.push(Op::Affine(a, m, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(Op::Silu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let v = Tensor::from_vec(x.data().chunks(c).map(|r| r.iter().copied().sum()).collect());
        self.push(Op::RowSum(a), v)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add_row_vector(self.value(b)).expect("tape add_row");
        self.push(Op::AddRow(a, b), v)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, w) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(w.len(), c, "tape mul_row");
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * w.data()[i % c]);
        self.push(Op::MulRow(a, b), v)
    }

    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (x, sv) = (self.value(a), self.value(s));
        let c = x.cols();
        assert_eq!(sv.len(), x.rows(), "tape mul_col");
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * sv.data()[i / c]);
        self.push(Op::MulCol(a, s), v)
    }

    /// Causal depthwise convolution, `x: [T×C]`, `kernel: [W×C]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Var {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (steps, ch, width) = (xv.rows(), xv.cols(), kv.rows());
        assert_eq!(kv.cols(), ch, "tape conv1d channels");
        let mut out = Tensor::zeros(&[steps, ch]);
        for t in 0..steps {
            for c in 0..ch {
                let mut acc = bias.map_or(T::zero(), |b| self.value(b).data()[c]);
                for j in 0..width {
                    if let Some(src) = (t + j + 1).checked_sub(width) {
                        acc += kv.data()[j * ch + c] * xv.data()[src * ch + c];
                    }
                }
                out.data_mut()[t * ch + c] = acc;
            }
        }
        self.push(Op::Conv1d(x, kernel, bias), out)
    }

    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Var {
        let v = self.value(a).block(offset, shape);
        self.push(Op::Slice(a, offset), v)
    }

    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let data: Vec<T> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let v = Tensor::new(shape, data).expect("tape concat shape");
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("tape reshape");
        self.push(Op::Reshape(a), v)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Row-wise RMSNorm of `x: [R×d]` with weight `w: [d]`, each row split into
    /// `groups` equal chunks normalised separately. Built from elementary nodes.
    pub fn rmsnorm_rows(&mut self, x: Var, w: Var, groups: usize, eps: T) -> Var {
        let (rows, d) = (self.value(x).rows(), self.value(x).cols());
        let gw = d / groups;
        let xg = self.reshape(x, &[rows * groups, gw]);
        let sq = self.mul(xg, xg);
        let ss = self.row_sum(sq);
        let ms = self.affine(ss, T::one() / T::from_count(gw), eps);
        let s = self.powf(ms, T::lit(-0.5));
        let normed = self.mul_col(xg, s);
        let back = self.reshape(normed, &[rows, d]);
        self.mul_row(back, w)
    }

    /// `Σ (a ⊙ b)` as a scalar node, the usual probe loss for gradient checks.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::Internal(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            for (input, contrib) in self.local_grads(&node.op, &node.value, &g) {
                if input.0 >= id {
                    return Err(CoreError::Internal(format!(
                        "tape node {id} depends on later node {}",
                        input.0
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| self.value(v);
        let one = T::one();
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, matmul_nt(g, val(*b)).expect("matmul adjoint")),
                (*b, matmul_tn(val(*a), g).expect("matmul adjoint")),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Outer(u, w) => {
                let (uv, wv) = (val(*u), val(*w));
                let (m, n) = (uv.len(), wv.len());
                let du = Tensor::from_fn(uv.shape(), |i| {
                    (0..n).fold(T::zero(), |acc, j| acc + g.data()[i * n + j] * wv.data()[j])
                });
                let dw = Tensor::from_fn(wv.shape(), |j| {
                    (0..m).fold(T::zero(), |acc, i| acc + g.data()[i * n + j] * uv.data()[i])
                });
                vec![(*u, du), (*w, dw)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.mul(val(*b)).expect("mul adjoint")),
                (*b, g.mul(val(*a)).expect("mul adjoint")),
            ],
            Op::ScaleBy(a, s) => {
                let sv = val(*s);
                let ds = g.mul(val(*a)).expect("scale adjoint").sum();
                vec![(*a, g.scale(sv.item())), (*s, Tensor::full(sv.shape(), ds))]
            }
            Op::Affine(a, m, _) => vec![(*a, g.scale(*m))],
            Op::Tanh(a) => vec![(*a, g.zip_with(out, "tanh", |gi, y| gi * (one - y * y)).unwrap())],
            Op::Sigmoid(a) => vec![(*a, g.zip_with(out, "sigmoid", |gi, y| gi * y * (one - y)).unwrap())],
            Op::Silu(a) => vec![(*a, g.zip_with(val(*a), "silu", |gi, x| gi * silu_grad(x)).unwrap())],
            Op::Exp(a) => vec![(*a, g.mul(out).unwrap())],
            Op::Softplus(a) => vec![(*a, g.zip_with(val(*a), "softplus", |gi, x| gi * sigmoid(x)).unwrap())],
            Op::Powf(a, p) => {
                let p = *p;
                vec![(
                    *a,
                    g.zip_with(val(*a), "powf", |gi, x| gi * p * x.powf(p - one)).unwrap(),
                )]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::RowSum(a) => {
                let c = val(*a).cols();
                vec![(*a, Tensor::from_fn(val(*a).shape(), |i| g.data()[i / c]))]
            }
            Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, g.sum_rows())],
            Op::MulRow(a, b) => {
                let (x, w) = (val(*a), val(*b));
                let c = x.cols();
                let da = Tensor::from_fn(x.shape(), |i| g.data()[i] * w.data()[i % c]);
                let dw = g.mul(x).unwrap().sum_rows();
                vec![(*a, da), (*b, dw)]
            }
            Op::MulCol(a, s) => {
                let (x, sv) = (val(*a), val(*s));
                let c = x.cols();
                let da = Tensor::from_fn(x.shape(), |i| g.data()[i] * sv.data()[i / c]);
                let ds = Tensor::from_fn(sv.shape(), |r| {
                    (0..c).fold(T::zero(), |acc, j| acc + g.data()[r * c + j] * x.data()[r * c + j])
                });
                vec![(*a, da), (*s, ds)]
            }
            Op::Conv1d(x, k, b) => {
                let (xv, kv) = (val(*x), val(*k));
                let (steps, ch, width) = (xv.rows(), xv.cols(), kv.rows());
                let mut dx = xv.zeros_like();
                let mut dk = kv.zeros_like();
                for t in 0..steps {
                    for c in 0..ch {
                        let gt = g.data()[t * ch + c];
                        for j in 0..width {
                            if let Some(src) = (t + j + 1).checked_sub(width) {
                                dx.data_mut()[src * ch + c] += kv.data()[j * ch + c] * gt;
                                dk.data_mut()[j * ch + c] += xv.data()[src * ch + c] * gt;
                            }
                        }
                    }
                }
                let mut out = vec![(*x, dx), (*k, dk)];
                if let Some(b) = b {
                    out.push((*b, g.sum_rows()));
                }
                out
            }
            Op::Slice(a, offset) => {
                let mut da = val(*a).zeros_like();
                da.write_block(*offset, g);
                vec![(*a, da)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let shape = val(p).shape().to_vec();
                        let piece = g.block(offset, &shape);
                        offset += piece.len();
                        (p, piece)
                    })
                    .collect()
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, rel_error, FD_EPS};
    use crate::random::SeededRng;

    #[test]
    fn matmul_adjoints_are_the_textbook_ones() {
        let mut rng = SeededRng::new(1);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        let dc = rng.normal_tensor(&[3, 2], 1.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(av, bv);
        let g = tape.leaf(dc.clone());
        let l = tape.dot(c, g);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(av), matmul(&dc, &b.transpose()).unwrap());
        assert_eq!(grads.wrt(bv), matmul(&a.transpose(), &dc).unwrap());
    }

    #[test]
    fn three_op_chain_matches_finite_differences() {
        let mut rng = SeededRng::new(2);
        let x = rng.normal_tensor(&[4, 3], 1.0);
        let w = rng.normal_tensor(&[3, 5], 0.5);
        let f = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let h = t.matmul(xv, wv);
            let a = t.tanh(h);
            let s = t.silu(a);
            let l = t.sum(s);
            (t, xv, l)
        };
        let (tape, xv, l) = f(&x);
        let analytic = tape.backward(l).unwrap().wrt(xv);
        let numeric = finite_difference_grad(
            |x| {
                let (t, _, l) = f(x);
                t.value(l).item()
            },
            &x,
            FD_EPS,
        );
        assert!(rel_error(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn identical_graphs_give_bitwise_identical_gradients() {
        let build = || {
            let mut rng = SeededRng::new(9);
            let mut t = Tape::new();
            let a = t.leaf(rng.normal_tensor(&[3, 3], 1.0));
            let b = t.leaf(rng.normal_tensor(&[3, 3], 1.0));
            let c = t.matmul(a, b);
            let d = t.mul(c, a);
            let e = t.sigmoid(d);
            let l = t.sum(e);
            t.backward(l).unwrap().wrt(a)
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(50 + seed);
            let x = rng.normal_tensor(&[5, 4], 1.0);
            let k = rng.normal_tensor(&[4, 4], 1.0);
            let v = rng.normal_tensor(&[4], 1.0);
            let probe = rng.normal_tensor(&[5, 4], 1.0);
            let build = |x: &Tensor<f64>| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let kv = t.leaf(k.clone());
                let vv = t.leaf(v.clone());
                let c = t.conv1d(xv, kv, Some(vv));
                let s = t.sigmoid(c);
                let sp = t.softplus(s);
                let e = t.exp(sp);
                let r = t.mul_row(e, vv);
                let n = t.rmsnorm_rows(r, vv, 2, 1e-6);
                let row0 = t.slice(n, 0, &[4]);
                let o = t.outer(row0, vv);
                let tr = t.transpose(o);
                let m = t.matmul(xv, tr);
                let a = t.add_row(m, vv);
                let th = t.tanh(a);
                let pr = t.leaf(probe.clone());
                let l = t.dot(th, pr);
                (t, xv, l)
            };
            let (tape, xv, l) = build(&x);
            let analytic = tape.backward(l).unwrap().wrt(xv);
            let numeric = finite_difference_grad(
                |x| {
                    let (t, _, l) = build(x);
                    t.value(l).item()
                },
                &x,
                FD_EPS,
            );
            assert!(rel_error(&analytic, &numeric) <= 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(t.backward(a).is_err());
    }
}
