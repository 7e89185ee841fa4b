//! Splitting one layer's parameters across tensor-parallel shards.

use std::ops::Range;

use m2rnn_core::{LayerParams, Scalar, Tensor};

use crate::error::{Result, TpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Each shard owns a query/key head and a local norm; a different
    /// parameterisation from the single-device layer.
    TopologyAware,
    /// Query/key replicated, value heads and norm features split; numerically
    /// the single-device layer.
    TopologyIndependent,
}

impl std::str::FromStr for Scheme {
    type Err = TpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topology-aware" => Ok(Self::TopologyAware),
            "topology-independent" => Ok(Self::TopologyIndependent),
            _ => Err(TpError::Config(format!("unknown TP scheme {s:?}"))),
        }
    }
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TopologyAware => "topology-aware",
            Scheme::TopologyIndependent => "topology-independent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub world: usize,
    pub scheme: Scheme,
    pub head_ranges: Vec<Range<usize>>,
    /// Ranges into the `N·V` normalised features.
    pub feature_ranges: Vec<Range<usize>>,
}

impl ShardSpec {
    pub fn new(scheme: Scheme, heads: usize, value_dim: usize, world: usize) -> Result<Self> {
        if world == 0 || !heads.is_multiple_of(world) {
            return Err(TpError::Config(format!(
                "{heads} value heads cannot be split evenly across {world} shards"
            )));
        }
        let per = heads / world;
        let head_ranges: Vec<Range<usize>> = (0..world).map(|s| s * per..(s + 1) * per).collect();
        let feature_ranges = head_ranges
            .iter()
            .map(|r| r.start * value_dim..r.end * value_dim)
            .collect();
        Ok(Self {
            world,
            scheme,
            head_ranges,
            feature_ranges,
        })
    }
}

/// Per-shard parameters: query/key tensors copied, value-side tensors sliced
/// to the shard's heads. Under both schemes the shard is itself a valid
/// multi-value layer with `N / N_TP` heads.
pub fn shard_params<T: Scalar>(p: &LayerParams<T>, spec: &ShardSpec) -> Result<Vec<LayerParams<T>>> {
    p.validate()?;
    if spec.head_ranges.last().map(|r| r.end) != Some(p.cfg.heads) {
        return Err(TpError::Config(format!(
            "shard spec covers {:?} heads, layer has {}",
            spec.head_ranges.last().map(|r| r.end),
            p.cfg.heads
        )));
    }
    let v = p.cfg.value_dim;
    Ok(spec
        .head_ranges
        .iter()
        .map(|heads| {
            let n = heads.len();
            let (f0, fl) = (heads.start * v, n * v);
            let mut cfg = p.cfg;
            cfg.heads = n;
            LayerParams {
                cfg,
                w_q: p.w_q.clone(),
                b_q: p.b_q.clone(),
                w_k: p.w_k.clone(),
                b_k: p.b_k.clone(),
                w_v: p.w_v.select_cols(f0, fl),
                b_v: p.b_v.select_rows(f0, fl),
                conv_q: p.conv_q.clone(),
                conv_k: p.conv_k.clone(),
                conv_v: p.conv_v.select_cols(f0, fl),
                w_f: p.w_f.select_cols(heads.start, n),
                w_g: p.w_g.select_cols(f0, fl),
                transition: p.transition.select_rows(heads.start, n),
                w_r: p.w_r.select_rows(heads.start, n),
                norm_weight: p.norm_weight.select_rows(f0, fl),
                w_o: p.w_o.select_rows(f0, fl),
                alpha: p.alpha.select_rows(heads.start, n),
                beta: p.beta.select_rows(heads.start, n),
            }
        })
        .collect())
}

pub fn shard_topology_aware<T: Scalar>(p: &LayerParams<T>, world: usize) -> Result<Vec<LayerParams<T>>> {
    let spec = ShardSpec::new(Scheme::TopologyAware, p.cfg.heads, p.cfg.value_dim, world)?;
    shard_params(p, &spec)
}

pub fn shard_topology_independent<T: Scalar>(p: &LayerParams<T>, world: usize) -> Result<Vec<LayerParams<T>>> {
    let spec = ShardSpec::new(Scheme::TopologyIndependent, p.cfg.heads, p.cfg.value_dim, world)?;
    shard_params(p, &spec)
}

/// Reassembles per-shard tensors (parameters or gradients) into one layer.
/// Query/key tensors are taken from shard 0.
pub fn gather_params<T: Scalar>(shards: &[LayerParams<T>]) -> Result<LayerParams<T>> {
    let cat_cols = |f: fn(&LayerParams<T>) -> &Tensor<T>| {
        Tensor::concat_cols(&shards.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    let cat_rows = |f: fn(&LayerParams<T>) -> &Tensor<T>| {
        Tensor::concat_rows(&shards.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    let first = &shards[0];
    let mut cfg = first.cfg;
    cfg.heads = shards.iter().map(|s| s.cfg.heads).sum();
    Ok(LayerParams {
        cfg,
        w_q: first.w_q.clone(),
        b_q: first.b_q.clone(),
        w_k: first.w_k.clone(),
        b_k: first.b_k.clone(),
        w_v: cat_cols(|s| &s.w_v)?,
        b_v: cat_rows(|s| &s.b_v)?,
        conv_q: first.conv_q.clone(),
        conv_k: first.conv_k.clone(),
        conv_v: cat_cols(|s| &s.conv_v)?,
        w_f: cat_cols(|s| &s.w_f)?,
        w_g: cat_cols(|s| &s.w_g)?,
        transition: cat_rows(|s| &s.transition)?,
        w_r: cat_rows(|s| &s.w_r)?,
        norm_weight: cat_rows(|s| &s.norm_weight)?,
        w_o: cat_rows(|s| &s.w_o)?,
        alpha: cat_rows(|s| &s.alpha)?,
        beta: cat_rows(|s| &s.beta)?,
    })
}

/// Projection parameters as actually stored: replicated query/key tensors are
/// counted once under the topology-independent scheme and per shard otherwise.
pub fn projection_params<T: Scalar>(scheme: Scheme, shards: &[LayerParams<T>]) -> usize {
    let total: usize = shards.iter().map(|s| s.projection_param_count()).sum();
    match scheme {
        Scheme::TopologyAware => total,
        Scheme::TopologyIndependent => {
            let qk = shards[0].w_q.len() + shards[0].w_k.len();
            total - (shards.len() - 1) * qk
        }
    }
}

/// Normalisation weights stored across all shards.
pub fn norm_params<T: Scalar>(shards: &[LayerParams<T>]) -> usize {
    shards.iter().map(|s| s.norm_weight.len()).sum()
}
