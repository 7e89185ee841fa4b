use std::fmt::Write as _;
use std::io::Write as _;

use m2rnn_core::layer::projection_counts;
use m2rnn_core::{param_count, state_size, HeadKind, HeadPattern};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{create_file, Outcome};

pub const PARAMCOUNT_HEADER: &str = "pattern,heads,key_dim,value_dim,d_model,w_q,w_k,w_v,w_g,w_f,w_o,params,state_size";

pub fn grid(cfg: &RunConfig) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for &n in &cfg.pc_heads {
        for &k in &cfg.pc_key_dims {
            for &v in &cfg.pc_value_dims {
                for &d in &cfg.pc_d_models {
                    out.push((n, k, v, d));
                }
            }
        }
    }
    out
}

/// Grid points with `K > V` where some pattern stores more state per parameter
/// than multi-value. With `K <= V` sharing the keys saves nothing, so those
/// points are not compared.
pub fn multi_value_losses(cfg: &RunConfig) -> Vec<(HeadPattern, HeadKind)> {
    let mut losses = Vec::new();
    for (heads, key_dim, value_dim, d_model) in grid(cfg).into_iter().filter(|g| g.1 > g.2) {
        let at = |kind| HeadPattern {
            kind,
            heads,
            key_dim,
            value_dim,
            d_model,
        };
        let ratio = |p: &HeadPattern| state_size(p) as f64 / param_count(p) as f64;
        let mv = at(HeadKind::MultiValue);
        for kind in HeadKind::ALL {
            if ratio(&at(kind)) > ratio(&mv) {
                losses.push((mv, kind));
            }
        }
    }
    losses
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.out.join("paramcount.csv");
    let mut f = create_file(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(f, "{PARAMCOUNT_HEADER}").map_err(io)?;
    let mut report = String::new();
    let _ = writeln!(
        report,
        "{:<12} {:>5} {:>5} {:>5} {:>6} {:>10} {:>8} {:>12}",
        "pattern", "N", "K", "V", "d", "params", "state", "state/param"
    );
    for (heads, key_dim, value_dim, d_model) in grid(cfg) {
        for kind in HeadKind::ALL {
            let p = HeadPattern {
                kind,
                heads,
                key_dim,
                value_dim,
                d_model,
            };
            let c = projection_counts(&p);
            let (params, state) = (param_count(&p), state_size(&p));
            writeln!(
                f,
                "{},{heads},{key_dim},{value_dim},{d_model},{},{},{},{},{},{},{params},{state}",
                kind.name(),
                c.w_q,
                c.w_k,
                c.w_v,
                c.w_g,
                c.w_f,
                c.w_o
            )
            .map_err(io)?;
            let _ = writeln!(
                report,
                "{:<12} {heads:>5} {key_dim:>5} {value_dim:>5} {d_model:>6} {params:>10} {state:>8} {:>12.6}",
                kind.name(),
                state as f64 / params as f64
            );
        }
    }
    let losses = multi_value_losses(cfg);
    for (p, kind) in &losses {
        let _ = writeln!(
            report,
            "multi-value is beaten by {} at N={} K={} V={} d={}",
            kind.name(),
            p.heads,
            p.key_dim,
            p.value_dim,
            p.d_model
        );
    }
    if losses.is_empty() {
        let _ = writeln!(
            report,
            "multi-value has the highest state per parameter at every grid point with K > V"
        );
    }
    let _ = writeln!(report, "wrote {}", path.display());
    crate::write_report(cfg, "paramcount.txt", &report)?;
    Ok(Outcome {
        report,
        passed: losses.is_empty(),
    })
}
