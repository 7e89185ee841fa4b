//! Recurrent baselines: a vector RNN, a GRU and a single-head diagonal linear
//! RNN with outer-product writes. Inputs are `[B, T, d]`, outputs `[B, T, H]`.

use crate::error::{dim_err, Result};
use crate::impl_param_set;
use crate::kernels::{sigmoid_t, tanh};
use crate::params::ParamSet;
use crate::random::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

fn flatten_input<T: Scalar>(x: &Tensor<T>, d_in: usize) -> Result<(Tensor<T>, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != d_in {
        return Err(dim_err("baseline input", s, &[0, 0, d_in]));
    }
    Ok((x.reshape(&[s[0] * s[1], d_in])?, s[0], s[1]))
}

/// Rows `b·T + t` for every `b`, as a `[B, C]` matrix.
fn time_rows<T: Scalar>(m: &Tensor<T>, batch: usize, steps: usize, t: usize) -> Tensor<T> {
    let c = m.cols();
    let mut out = Tensor::zeros(&[batch, c]);
    for b in 0..batch {
        let src = (b * steps + t) * c;
        out.data_mut()[b * c..(b + 1) * c].copy_from_slice(&m.data()[src..src + c]);
    }
    out
}

fn put_time_rows<T: Scalar>(m: &mut Tensor<T>, rows: &Tensor<T>, batch: usize, steps: usize, t: usize) {
    let c = m.cols();
    for b in 0..batch {
        let dst = (b * steps + t) * c;
        m.data_mut()[dst..dst + c].copy_from_slice(&rows.data()[b * c..(b + 1) * c]);
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    a.zip_with(b, "baseline elementwise", f).expect("same shape")
}

/// `h_t = tanh(W h_{t-1} + u_t)`, `u_t = x_t W_in + b_in`, with `h_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorRnnParams<T> {
    /// `[d, H]`
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// `[H, H]`, acting on column vectors
    pub w: Tensor<T>,
}

impl_param_set!(VectorRnnParams { w_in, b_in, w });

impl<T: Scalar> VectorRnnParams<T> {
    pub fn init(d_in: usize, width: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Self {
            w_in: rng.normal_tensor(&[d_in, width], T::lit(1.0 / (d_in as f64).sqrt())),
            b_in: Tensor::zeros(&[width]),
            w: rng.normal_tensor(&[width, width], T::lit(1.0 / (width as f64).sqrt())),
        }
    }

    pub fn width(&self) -> usize {
        self.w.rows()
    }
}

/// The recurrence alone on pre-activation inputs `u: [B, T, H]`.
pub fn vector_rnn_scan<T: Scalar>(w: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let s = u.shape();
    if s.len() != 3 || w.shape() != [s[2], s[2]] {
        return Err(dim_err("vector_rnn_scan", w.shape(), s));
    }
    let (batch, steps, width) = (s[0], s[1], s[2]);
    let u2 = u.reshape(&[batch * steps, width])?;
    let mut hs = Tensor::zeros(&[batch * steps, width]);
    let mut h = Tensor::zeros(&[batch, width]);
    for t in 0..steps {
        h = tanh(&matmul_nt(&h, w)?.add(&time_rows(&u2, batch, steps, t))?);
        put_time_rows(&mut hs, &h, batch, steps, t);
    }
    hs.into_shape(&[batch, steps, width])
}

#[derive(Clone, Debug)]
pub struct VectorRnnCache<T> {
    x: Tensor<T>,
    h: Tensor<T>,
    batch: usize,
    steps: usize,
}

pub fn vector_rnn_forward_cached<T: Scalar>(
    p: &VectorRnnParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, VectorRnnCache<T>)> {
    let (x2, batch, steps) = flatten_input(x, p.w_in.rows())?;
    let u = matmul(&x2, &p.w_in)?.add_row_vector(&p.b_in)?;
    let h = vector_rnn_scan(&p.w, &u.reshape(&[batch, steps, p.width()])?)?;
    let cache = VectorRnnCache {
        x: x2,
        h: h.reshape(&[batch * steps, p.width()])?,
        batch,
        steps,
    };
    Ok((h, cache))
}

pub fn vector_rnn_forward<T: Scalar>(p: &VectorRnnParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(vector_rnn_forward_cached(p, x)?.0)
}

/// Returns parameter gradients and `dx` for upstream `dh: [B, T, H]`.
pub fn vector_rnn_backward<T: Scalar>(
    p: &VectorRnnParams<T>,
    c: &VectorRnnCache<T>,
    dh: &Tensor<T>,
) -> Result<(VectorRnnParams<T>, Tensor<T>)> {
    let (batch, steps, width) = (c.batch, c.steps, p.width());
    let dh2 = dh.reshape(&[batch * steps, width])?;
    let mut du = Tensor::zeros(&[batch * steps, width]);
    let mut dw = p.w.zeros_like();
    let mut carry = Tensor::zeros(&[batch, width]);
    for t in (0..steps).rev() {
        let h = time_rows(&c.h, batch, steps, t);
        let g = time_rows(&dh2, batch, steps, t).add(&carry)?;
        let da = zip(&g, &h, |g, h| g * (T::one() - h * h));
        if t > 0 {
            dw.add_assign(&matmul_tn(&da, &time_rows(&c.h, batch, steps, t - 1))?)?;
        }
        carry = matmul(&da, &p.w)?;
        put_time_rows(&mut du, &da, batch, steps, t);
    }
    let grads = VectorRnnParams {
        w_in: matmul_tn(&c.x, &du)?,
        b_in: du.sum_rows(),
        w: dw,
    };
    let dx = matmul_nt(&du, &p.w_in)?.into_shape(&[batch, steps, p.w_in.rows()])?;
    Ok((grads, dx))
}

/// Standard three-gate GRU:
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `c = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = z ⊙ h + (1 - z) ⊙ c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl_param_set!(GruParams {
    w_z,
    u_z,
    b_z,
    w_r,
    u_r,
    b_r,
    w_h,
    u_h,
    b_h
});

impl<T: Scalar> GruParams<T> {
    /// Weights uniform in `±1/sqrt(H)`, biases zero.
    pub fn init(d_in: usize, width: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let bound = T::lit(1.0 / (width as f64).sqrt());
        let mut u = |r: usize, c: usize| rng.uniform_tensor(&[r, c], -bound, bound);
        Self {
            w_z: u(d_in, width),
            u_z: u(width, width),
            b_z: Tensor::zeros(&[width]),
            w_r: u(d_in, width),
            u_r: u(width, width),
            b_r: Tensor::zeros(&[width]),
            w_h: u(d_in, width),
            u_h: u(width, width),
            b_h: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.u_z.rows()
    }
}

#[derive(Clone, Debug)]
pub struct GruCache<T> {
    x: Tensor<T>,
    z: Tensor<T>,
    r: Tensor<T>,
    c: Tensor<T>,
    h: Tensor<T>,
    batch: usize,
    steps: usize,
}

pub fn gru_forward_cached<T: Scalar>(p: &GruParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
    let (x2, batch, steps) = flatten_input(x, p.w_z.rows())?;
    let width = p.width();
    let xz = matmul(&x2, &p.w_z)?.add_row_vector(&p.b_z)?;
    let xr = matmul(&x2, &p.w_r)?.add_row_vector(&p.b_r)?;
    let xh = matmul(&x2, &p.w_h)?.add_row_vector(&p.b_h)?;
    let bt = batch * steps;
    let (mut zs, mut rs, mut cs, mut hs) = (
        Tensor::zeros(&[bt, width]),
        Tensor::zeros(&[bt, width]),
        Tensor::zeros(&[bt, width]),
        Tensor::zeros(&[bt, width]),
    );
    let mut h = Tensor::zeros(&[batch, width]);
    for t in 0..steps {
        let z = sigmoid_t(&time_rows(&xz, batch, steps, t).add(&matmul(&h, &p.u_z)?)?);
        let r = sigmoid_t(&time_rows(&xr, batch, steps, t).add(&matmul(&h, &p.u_r)?)?);
        let rh = r.mul(&h)?;
        let c = tanh(&time_rows(&xh, batch, steps, t).add(&matmul(&rh, &p.u_h)?)?);
        let hn = Tensor::from_fn(h.shape(), |i| {
            let zi = z.data()[i];
            zi * h.data()[i] + (T::one() - zi) * c.data()[i]
        });
        put_time_rows(&mut zs, &z, batch, steps, t);
        put_time_rows(&mut rs, &r, batch, steps, t);
        put_time_rows(&mut cs, &c, batch, steps, t);
        put_time_rows(&mut hs, &hn, batch, steps, t);
        h = hn;
    }
    let out = hs.reshape(&[batch, steps, width])?;
    Ok((
        out,
        GruCache {
            x: x2,
            z: zs,
            r: rs,
            c: cs,
            h: hs,
            batch,
            steps,
        },
    ))
}

pub fn gru_forward<T: Scalar>(p: &GruParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gru_forward_cached(p, x)?.0)
}

pub fn gru_backward<T: Scalar>(
    p: &GruParams<T>,
    cache: &GruCache<T>,
    dh: &Tensor<T>,
) -> Result<(GruParams<T>, Tensor<T>)> {
    let (batch, steps, width) = (cache.batch, cache.steps, p.width());
    let bt = batch * steps;
    let dh2 = dh.reshape(&[bt, width])?;
    let mut grads = p.clone();
    grads.scale_all(T::zero());
    let (mut daz_all, mut dar_all, mut dac_all) = (
        Tensor::zeros(&[bt, width]),
        Tensor::zeros(&[bt, width]),
        Tensor::zeros(&[bt, width]),
    );
    let mut carry = Tensor::zeros(&[batch, width]);
    for t in (0..steps).rev() {
        let g = time_rows(&dh2, batch, steps, t).add(&carry)?;
        let z = time_rows(&cache.z, batch, steps, t);
        let r = time_rows(&cache.r, batch, steps, t);
        let c = time_rows(&cache.c, batch, steps, t);
        let h_prev = if t == 0 {
            Tensor::zeros(&[batch, width])
        } else {
            time_rows(&cache.h, batch, steps, t - 1)
        };
        let dz = Tensor::from_fn(g.shape(), |i| g.data()[i] * (h_prev.data()[i] - c.data()[i]));
        let dac = Tensor::from_fn(g.shape(), |i| {
            let ci = c.data()[i];
            g.data()[i] * (T::one() - z.data()[i]) * (T::one() - ci * ci)
        });
        let rh = r.mul(&h_prev)?;
        grads.u_h.add_assign(&matmul_tn(&rh, &dac)?)?;
        let drh = matmul_nt(&dac, &p.u_h)?;
        let dar = Tensor::from_fn(g.shape(), |i| {
            let ri = r.data()[i];
            drh.data()[i] * h_prev.data()[i] * ri * (T::one() - ri)
        });
        let daz = zip(&dz, &z, |d, zi| d * zi * (T::one() - zi));
        grads.u_z.add_assign(&matmul_tn(&h_prev, &daz)?)?;
        grads.u_r.add_assign(&matmul_tn(&h_prev, &dar)?)?;
        let mut next = Tensor::from_fn(g.shape(), |i| g.data()[i] * z.data()[i] + drh.data()[i] * r.data()[i]);
        next.add_assign(&matmul_nt(&daz, &p.u_z)?)?;
        next.add_assign(&matmul_nt(&dar, &p.u_r)?)?;
        carry = next;
        put_time_rows(&mut daz_all, &daz, batch, steps, t);
        put_time_rows(&mut dar_all, &dar, batch, steps, t);
        put_time_rows(&mut dac_all, &dac, batch, steps, t);
    }
    grads.w_z = matmul_tn(&cache.x, &daz_all)?;
    grads.w_r = matmul_tn(&cache.x, &dar_all)?;
    grads.w_h = matmul_tn(&cache.x, &dac_all)?;
    grads.b_z = daz_all.sum_rows();
    grads.b_r = dar_all.sum_rows();
    grads.b_h = dac_all.sum_rows();
    let mut dx = matmul_nt(&daz_all, &p.w_z)?;
    dx.add_assign(&matmul_nt(&dar_all, &p.w_r)?)?;
    dx.add_assign(&matmul_nt(&dac_all, &p.w_h)?)?;
    Ok((grads, dx.into_shape(&[batch, steps, p.w_z.rows()])?))
}

/// Single-head gated diagonal linear RNN:
/// `a = σ(x W_a + b_a)`, `H_t = diag(a_t) H_{t-1} + k_t v_tᵀ`, `y_t = H_tᵀ q_t`.
/// The decays lie in `(0, 1)`, so every eigenvalue of the transition is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagLinearRnnParams<T> {
    /// `[d, K]`
    pub w_a: Tensor<T>,
    pub b_a: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_q: Tensor<T>,
    /// `[d, V]`
    pub w_v: Tensor<T>,
}

impl_param_set!(DiagLinearRnnParams {
    w_a,
    b_a,
    w_k,
    w_q,
    w_v
});

impl<T: Scalar> DiagLinearRnnParams<T> {
    /// Projections `N(0, 1/d)`; decay bias `decay_bias` (so `a ≈ σ(decay_bias)`).
    pub fn init(d_in: usize, key_dim: usize, value_dim: usize, decay_bias: f64, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let std = T::lit(1.0 / (d_in as f64).sqrt());
        Self {
            w_a: rng.normal_tensor(&[d_in, key_dim], std),
            b_a: Tensor::full(&[key_dim], T::lit(decay_bias)),
            w_k: rng.normal_tensor(&[d_in, key_dim], std),
            w_q: rng.normal_tensor(&[d_in, key_dim], std),
            w_v: rng.normal_tensor(&[d_in, value_dim], std),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.cols()
    }
}

/// `diag(a) H + k vᵀ` for one `K×V` state.
pub fn diag_state_step<T: Scalar>(a: &[T], h: &[T], k: &[T], v: &[T]) -> Vec<T> {
    let vd = v.len();
    let mut out = vec![T::zero(); h.len()];
    for (i, (&ai, &ki)) in a.iter().zip(k).enumerate() {
        for (c, &vc) in v.iter().enumerate() {
            out[i * vd + c] = ai * h[i * vd + c] + ki * vc;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DiagLinearRnnCache<T> {
    x: Tensor<T>,
    a: Tensor<T>,
    k: Tensor<T>,
    q: Tensor<T>,
    v: Tensor<T>,
    /// `[B·T, K·V]`
    h: Tensor<T>,
    batch: usize,
    steps: usize,
}

pub fn diag_linear_rnn_forward_cached<T: Scalar>(
    p: &DiagLinearRnnParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, DiagLinearRnnCache<T>)> {
    let (x2, batch, steps) = flatten_input(x, p.w_a.rows())?;
    let (kd, vd) = (p.key_dim(), p.value_dim());
    let a = sigmoid_t(&matmul(&x2, &p.w_a)?.add_row_vector(&p.b_a)?);
    let k = matmul(&x2, &p.w_k)?;
    let q = matmul(&x2, &p.w_q)?;
    let v = matmul(&x2, &p.w_v)?;
    let bt = batch * steps;
    let mut hs = Tensor::zeros(&[bt, kd * vd]);
    let mut y = Tensor::zeros(&[bt, vd]);
    for b in 0..batch {
        let mut h = vec![T::zero(); kd * vd];
        for t in 0..steps {
            let r = b * steps + t;
            h = diag_state_step(
                &a.data()[r * kd..(r + 1) * kd],
                &h,
                &k.data()[r * kd..(r + 1) * kd],
                &v.data()[r * vd..(r + 1) * vd],
            );
            let qr = &q.data()[r * kd..(r + 1) * kd];
            for c in 0..vd {
                let mut acc = T::zero();
                for i in 0..kd {
                    acc += h[i * vd + c] * qr[i];
                }
                y.data_mut()[r * vd + c] = acc;
            }
            hs.data_mut()[r * kd * vd..(r + 1) * kd * vd].copy_from_slice(&h);
        }
    }
    let cache = DiagLinearRnnCache {
        x: x2,
        a,
        k,
        q,
        v,
        h: hs,
        batch,
        steps,
    };
    Ok((y.into_shape(&[batch, steps, vd])?, cache))
}

pub fn diag_linear_rnn_forward<T: Scalar>(p: &DiagLinearRnnParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(diag_linear_rnn_forward_cached(p, x)?.0)
}

pub fn diag_linear_rnn_backward<T: Scalar>(
    p: &DiagLinearRnnParams<T>,
    c: &DiagLinearRnnCache<T>,
    dy: &Tensor<T>,
) -> Result<(DiagLinearRnnParams<T>, Tensor<T>)> {
    let (kd, vd) = (p.key_dim(), p.value_dim());
    let (batch, steps) = (c.batch, c.steps);
    let bt = batch * steps;
    let dy2 = dy.reshape(&[bt, vd])?;
    let (mut da, mut dk, mut dq, mut dv) = (
        Tensor::zeros(&[bt, kd]),
        Tensor::zeros(&[bt, kd]),
        Tensor::zeros(&[bt, kd]),
        Tensor::zeros(&[bt, vd]),
    );
    let sl = kd * vd;
    for b in 0..batch {
        let mut carry = vec![T::zero(); sl];
        for t in (0..steps).rev() {
            let r = b * steps + t;
            let h = &c.h.data()[r * sl..(r + 1) * sl];
            let q = &c.q.data()[r * kd..(r + 1) * kd];
            let k = &c.k.data()[r * kd..(r + 1) * kd];
            let v = &c.v.data()[r * vd..(r + 1) * vd];
            let a = &c.a.data()[r * kd..(r + 1) * kd];
            let g_dy = &dy2.data()[r * vd..(r + 1) * vd];
            let g: Vec<T> = (0..sl).map(|idx| q[idx / vd] * g_dy[idx % vd] + carry[idx]).collect();
            for i in 0..kd {
                let (mut aq, mut aa, mut ak) = (T::zero(), T::zero(), T::zero());
                for cc in 0..vd {
                    let idx = i * vd + cc;
                    aq += h[idx] * g_dy[cc];
                    if t > 0 {
                        aa += g[idx] * c.h.data()[(r - 1) * sl + idx];
                    }
                    ak += g[idx] * v[cc];
                }
                dq.data_mut()[r * kd + i] = aq;
                // sigmoid'(pre) = a (1 - a)
                da.data_mut()[r * kd + i] = aa * a[i] * (T::one() - a[i]);
                dk.data_mut()[r * kd + i] = ak;
            }
            for cc in 0..vd {
                let mut acc = T::zero();
                for i in 0..kd {
                    acc += g[i * vd + cc] * k[i];
                }
                dv.data_mut()[r * vd + cc] = acc;
            }
            for idx in 0..sl {
                carry[idx] = a[idx / vd] * g[idx];
            }
        }
    }
    let grads = DiagLinearRnnParams {
        w_a: matmul_tn(&c.x, &da)?,
        b_a: da.sum_rows(),
        w_k: matmul_tn(&c.x, &dk)?,
        w_q: matmul_tn(&c.x, &dq)?,
        w_v: matmul_tn(&c.x, &dv)?,
    };
    let mut dx = matmul_nt(&da, &p.w_a)?;
    for (d, w) in [(&dk, &p.w_k), (&dq, &p.w_q), (&dv, &p.w_v)] {
        dx.add_assign(&matmul_nt(d, w)?)?;
    }
    Ok((grads, dx.into_shape(&[batch, steps, p.w_a.rows()])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;
    use crate::oracles::{baseline_fd_grads, diag_tape_grads, gru_tape_grads, vector_rnn_tape_grads};

    fn check<P: ParamSet<f64> + Clone>(
        name: &str,
        (g, dx): (P, Tensor<f64>),
        (tg, tdx): (P, Tensor<f64>),
        (fg, fdx): (P, Tensor<f64>),
    ) {
        assert!(
            rel_error(&dx, &tdx) <= 1e-10,
            "{name} dx vs tape {}",
            rel_error(&dx, &tdx)
        );
        assert!(rel_error(&dx, &fdx) <= 1e-4, "{name} dx vs fd {}", rel_error(&dx, &fdx));
        for (((n, a), (_, t)), (_, f)) in g.named().into_iter().zip(tg.named()).zip(fg.named()) {
            assert!(rel_error(a, t) <= 1e-10, "{name}.{n} vs tape {}", rel_error(a, t));
            assert!(rel_error(a, f) <= 1e-4, "{name}.{n} vs fd {}", rel_error(a, f));
        }
    }

    #[test]
    fn vector_rnn_special_cases() {
        let mut rng = SeededRng::new(1);
        let u = rng.normal_tensor(&[2, 5, 4], 1.0);
        let h = vector_rnn_scan(&Tensor::zeros(&[4, 4]), &u).unwrap();
        assert_eq!(h, tanh(&u));
        let h = vector_rnn_scan(&rng.normal_tensor(&[4, 4], 1.0), &Tensor::zeros(&[2, 5, 4])).unwrap();
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vector_rnn_gradients() {
        for seed in 0..3 {
            let p = VectorRnnParams::<f64>::init(5, 4, seed);
            let mut rng = SeededRng::new(seed + 50);
            let x = rng.normal_tensor(&[2, 6, 5], 1.0);
            let dy = rng.normal_tensor(&[2, 6, 4], 1.0);
            let (_, c) = vector_rnn_forward_cached(&p, &x).unwrap();
            let got = vector_rnn_backward(&p, &c, &dy).unwrap();
            let fd = baseline_fd_grads(&p, &x, &dy, |p, x| vector_rnn_forward(p, x).unwrap(), 1e-5);
            check("vector", got, vector_rnn_tape_grads(&p, &x, &dy).unwrap(), fd);
        }
    }

    #[test]
    fn gru_frozen_by_saturated_update_gate() {
        let mut p = GruParams::<f64>::init(3, 4, 2);
        p.w_z.fill(0.0);
        p.u_z.fill(0.0);
        p.b_z.fill(1e3);
        let x = SeededRng::new(3).normal_tensor(&[2, 7, 3], 1.0);
        let h = gru_forward(&p, &x).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_gradients() {
        for seed in 0..3 {
            let p = GruParams::<f64>::init(5, 4, seed);
            let mut rng = SeededRng::new(seed + 60);
            let x = rng.normal_tensor(&[2, 6, 5], 1.0);
            let dy = rng.normal_tensor(&[2, 6, 4], 1.0);
            let (_, c) = gru_forward_cached(&p, &x).unwrap();
            let got = gru_backward(&p, &c, &dy).unwrap();
            let fd = baseline_fd_grads(&p, &x, &dy, |p, x| gru_forward(p, x).unwrap(), 1e-5);
            check("gru", got, gru_tape_grads(&p, &x, &dy).unwrap(), fd);
        }
    }

    #[test]
    fn gru_gates_stay_in_unit_interval() {
        let p = GruParams::<f64>::init(3, 6, 4);
        let x = SeededRng::new(5).normal_tensor(&[3, 20, 3], 10.0);
        let (_, c) = gru_forward_cached(&p, &x).unwrap();
        for t in [&c.z, &c.r] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn diag_rnn_without_memory_is_a_scaled_value() {
        let mut p = DiagLinearRnnParams::<f64>::init(4, 3, 2, 0.0, 7);
        p.w_a.fill(0.0);
        p.b_a.fill(-1e3);
        let x = SeededRng::new(8).normal_tensor(&[1, 5, 4], 1.0);
        let (y, c) = diag_linear_rnn_forward_cached(&p, &x).unwrap();
        for r in 0..5 {
            let k = &c.k.data()[r * 3..(r + 1) * 3];
            let q = &c.q.data()[r * 3..(r + 1) * 3];
            let kq: f64 = k.iter().zip(q).map(|(a, b)| a * b).sum();
            for cc in 0..2 {
                let expect = kq * c.v.data()[r * 2 + cc];
                assert!((y.data()[r * 2 + cc] - expect).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn diag_state_update_is_linear_in_the_state() {
        let mut rng = SeededRng::new(9);
        let a: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 1.0)).collect();
        let h1 = rng.normal_tensor::<f64>(&[6], 1.0);
        let h2 = rng.normal_tensor::<f64>(&[6], 1.0);
        let zero = [0.0; 3];
        let zv = [0.0; 2];
        let (al, be) = (0.7, -1.3);
        let mix = h1.scale(al).add(&h2.scale(be)).unwrap();
        let lhs = diag_state_step(&a, mix.data(), &zero, &zv);
        let s1 = diag_state_step(&a, h1.data(), &zero, &zv);
        let s2 = diag_state_step(&a, h2.data(), &zero, &zv);
        for i in 0..6 {
            assert!((lhs[i] - (al * s1[i] + be * s2[i])).abs() <= 1e-14);
        }
    }

    #[test]
    fn diag_rnn_gradients() {
        for seed in 0..3 {
            let p = DiagLinearRnnParams::<f64>::init(5, 3, 4, 1.0, seed);
            let mut rng = SeededRng::new(seed + 70);
            let x = rng.normal_tensor(&[2, 6, 5], 1.0);
            let dy = rng.normal_tensor(&[2, 6, 4], 1.0);
            let (_, c) = diag_linear_rnn_forward_cached(&p, &x).unwrap();
            let got = diag_linear_rnn_backward(&p, &c, &dy).unwrap();
            let fd = baseline_fd_grads(&p, &x, &dy, |p, x| diag_linear_rnn_forward(p, x).unwrap(), 1e-5);
            check("diag", got, diag_tape_grads(&p, &x, &dy).unwrap(), fd);
        }
    }
}
