//! RMSNorm with features split across shards.
//!
//! Forward all-reduces one partial sum of squares per row; backward all-reduces
//! one partial `Σ (w·dy)·x` per row. Everything else is shard-local.

use m2rnn_core::kernels::{inverse_rms, rms_dot, rms_grads};
use m2rnn_core::{Scalar, Tensor};

use crate::bus::CollectiveBus;
use crate::error::{Result, TpError};

pub const OP_RMS_S: &str = "rmsnorm_s";
pub const OP_RMS_R: &str = "rmsnorm_r";

/// Per-row `Σ x²` over this shard's features, `[R]`.
pub fn partial_sum_sq<T: Scalar>(x_local: &Tensor<T>) -> Tensor<T> {
    let c = x_local.cols();
    Tensor::from_fn(&[x_local.rows()], |r| {
        x_local.data()[r * c..(r + 1) * c]
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
    })
}

/// Normalises local features with the globally reduced sums; returns `(y_local, s)`.
pub fn finish_forward<T: Scalar>(
    x_local: &Tensor<T>,
    w_local: &Tensor<T>,
    sum_sq: &Tensor<T>,
    d_global: usize,
    eps: T,
) -> (Tensor<T>, Tensor<T>) {
    let c = x_local.cols();
    let s = sum_sq.map(|ss| inverse_rms(ss, d_global, eps));
    let y = Tensor::from_fn(x_local.shape(), |i| {
        w_local.data()[i % c] * x_local.data()[i] * s.data()[i / c]
    });
    (y, s)
}

/// Per-row `Σ (w·dy)·x` over this shard's features, `[R]`.
pub fn partial_r<T: Scalar>(x_local: &Tensor<T>, w_local: &Tensor<T>, dy_local: &Tensor<T>) -> Tensor<T> {
    let c = x_local.cols();
    Tensor::from_fn(&[x_local.rows()], |r| {
        let span = r * c..(r + 1) * c;
        rms_dot(&x_local.data()[span.clone()], w_local.data(), &dy_local.data()[span])
    })
}

/// Local gradients from the globally reduced `r`; `dw` sums rows in ascending order.
pub fn finish_backward<T: Scalar>(
    x_local: &Tensor<T>,
    w_local: &Tensor<T>,
    s: &Tensor<T>,
    r: &Tensor<T>,
    dy_local: &Tensor<T>,
    d_global: usize,
) -> (Tensor<T>, Tensor<T>) {
    let c = x_local.cols();
    let mut dx = x_local.zeros_like();
    let mut dw = w_local.zeros_like();
    for row in 0..x_local.rows() {
        let span = row * c..(row + 1) * c;
        let (gx, gw) = rms_grads(
            &x_local.data()[span.clone()],
            w_local.data(),
            &dy_local.data()[span.clone()],
            s.data()[row],
            r.data()[row],
            d_global,
        );
        dx.data_mut()[span].copy_from_slice(&gx);
        for (acc, g) in dw.data_mut().iter_mut().zip(gw) {
            *acc += g;
        }
    }
    (dx, dw)
}

/// Sharded forward over `x_local: [R, d_local]`; exactly one all-reduce of `R` scalars.
pub fn rmsnorm_tp_forward<T: Scalar>(
    bus: &CollectiveBus<T>,
    shard: usize,
    x_local: &Tensor<T>,
    w_local: &Tensor<T>,
    d_global: usize,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sums = bus.all_reduce_sum(shard, OP_RMS_S, partial_sum_sq(x_local))?;
    Ok(finish_forward(x_local, w_local, &sums, d_global, eps))
}

/// Sharded backward; exactly one all-reduce of `R` scalars, even for `dy = 0`.
pub fn rmsnorm_tp_backward<T: Scalar>(
    bus: &CollectiveBus<T>,
    shard: usize,
    x_local: &Tensor<T>,
    w_local: &Tensor<T>,
    s: &Tensor<T>,
    dy_local: &Tensor<T>,
    d_global: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let r = bus.all_reduce_sum(shard, OP_RMS_R, partial_r(x_local, w_local, dy_local))?;
    Ok(finish_backward(x_local, w_local, s, &r, dy_local, d_global))
}

/// Sharded forward and backward of an `R×d` RMSNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsTpRun<T> {
    pub y: Tensor<T>,
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    /// all-reduce rounds the bus recorded
    pub rounds: usize,
}

/// Splits the features of `x`, `w` and `dy` into `world` contiguous slices and
/// runs one thread per shard through forward and backward, then reassembles.
pub fn rmsnorm_tp_rows<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    world: usize,
    eps: T,
) -> Result<RmsTpRun<T>> {
    let d = x.cols();
    if world == 0 || !d.is_multiple_of(world) || w.len() != d || dy.shape() != x.shape() {
        return Err(TpError::Config(format!(
            "cannot shard RMSNorm of {:?} with weight {:?} over {world} shards",
            x.shape(),
            w.shape()
        )));
    }
    let per = d / world;
    let bus = CollectiveBus::new(world);
    let parts: Vec<Result<(Tensor<T>, Tensor<T>, Tensor<T>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..world)
            .map(|shard| {
                let bus = &bus;
                s.spawn(move || {
                    let xl = x.select_cols(shard * per, per);
                    let wl = w.select_rows(shard * per, per);
                    let dyl = dy.select_cols(shard * per, per);
                    let out = rmsnorm_tp_forward(bus, shard, &xl, &wl, d, eps).and_then(|(y, s)| {
                        let (dx, dw) = rmsnorm_tp_backward(bus, shard, &xl, &wl, &s, &dyl, d)?;
                        Ok((y, dx, dw))
                    });
                    bus.depart(shard);
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard thread panicked"))
            .collect()
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let cols = |i: usize| {
        parts
            .iter()
            .map(|p| if i == 0 { p.0.clone() } else { p.1.clone() })
            .collect::<Vec<_>>()
    };
    Ok(RmsTpRun {
        y: Tensor::concat_cols(&cols(0))?,
        dx: Tensor::concat_cols(&cols(1))?,
        dw: Tensor::concat_rows(&parts.iter().map(|p| p.2.clone()).collect::<Vec<_>>())?,
        rounds: bus.log().len(),
    })
}
