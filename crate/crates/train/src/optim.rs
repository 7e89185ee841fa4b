//! AdamW with a per-name weight-decay exemption, and global gradient clipping.

use m2rnn_core::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet<f64>>(params: &P) -> Self {
        let zeros: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| t.zeros_like()).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// True when the last `.`-separated segment of `name` is in `skip`.
pub fn skips_decay(name: &str, skip: &[&str]) -> bool {
    skip.contains(&name.rsplit('.').next().unwrap_or(name))
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adam_step<P: ParamSet<f64>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    skip_decay: &[&str],
) {
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let grads = grads.named();
    for (i, (name, p)) in params.named_mut().into_iter().enumerate() {
        let decay = if skips_decay(&name, skip_decay) {
            0.0
        } else {
            cfg.weight_decay
        };
        let g = grads[i].1.data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * decay * *w;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<P: ParamSet<f64>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2rnn_core::impl_param_set;

    #[derive(Clone, Debug, PartialEq)]
    struct Pair<T> {
        w: Tensor<T>,
        norm_weight: Tensor<T>,
    }
    impl_param_set!(Pair { w, norm_weight });

    fn pair(w: f64, n: f64) -> Pair<f64> {
        Pair {
            w: Tensor::from_vec(vec![w]),
            norm_weight: Tensor::from_vec(vec![n]),
        }
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = pair(0.3, 1.2);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &pair(0.0, 0.0), &mut st, 0.1, &cfg, &[]);
        assert_eq!(p, pair(0.3, 1.2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = pair(0.0, 0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adam_step(&mut p, &pair(1.0, -1.0), &mut st, 0.1, &cfg, &[]);
        assert!((p.w.item() + 0.1).abs() < 1e-8);
        assert!((p.norm_weight.item() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn decay_skips_exempt_names() {
        let mut p = pair(2.0, 2.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut p, &pair(0.0, 0.0), &mut st, 0.1, &cfg, &["norm_weight"]);
        assert_eq!(p.norm_weight.item(), 2.0);
        assert!((p.w.item() - 1.9).abs() < 1e-15);
        assert!(skips_decay("core.norm_weight", &["norm_weight"]));
        assert!(!skips_decay("core.w_o", &["norm_weight"]));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = pair(3.0, 4.0);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.sum_sq().sqrt() - 1.0).abs() < 1e-15);
        let mut small = pair(0.3, 0.4);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, pair(0.3, 0.4));
    }
}
