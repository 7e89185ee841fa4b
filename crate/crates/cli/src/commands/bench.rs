//! Recurrence micro-benchmark: fused scan vs the per-step reference, and the
//! fused forward+backward, in tokens per second.

use std::fmt::Write as _;
use std::io::Write as _;
use std::time::Instant;

use m2rnn_core::oracles::random_recurrence_inputs;
use m2rnn_core::recurrence::m2rnn_forward_reference;
use m2rnn_core::{m2rnn_backward, m2rnn_forward, m2rnn_forward_cached, RecurrenceDims, SeededRng};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{create_file, Outcome};

pub const BENCH_HEADER: &str =
    "batch,heads,key_dim,value_dim,steps,fused_fwd_s,unfused_fwd_s,fwd_bwd_s,fused_tok_s,unfused_tok_s,fwd_bwd_tok_s";

fn median_secs(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.out.join("bench.csv");
    let mut f = create_file(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(f, "{BENCH_HEADER}").map_err(io)?;
    let mut report = String::new();
    let _ = writeln!(
        report,
        "{:>5} {:>4} {:>4} {:>4} {:>5} {:>14} {:>14} {:>14} {:>8}",
        "B", "N", "K", "V", "T", "fused tok/s", "unfused tok/s", "fwd+bwd tok/s", "speedup"
    );
    let mut passed = true;
    let mut seeds = SeededRng::new(cfg.seed);
    for &batch in &cfg.bench_batches {
        for &heads in &cfg.bench_heads {
            for &key_dim in &cfg.bench_key_dims {
                for &value_dim in &cfg.bench_value_dims {
                    let d = RecurrenceDims {
                        batch,
                        steps: cfg.bench_steps,
                        heads,
                        key_dim,
                        value_dim,
                    };
                    let seed = seeds.next_seed();
                    let inp = random_recurrence_inputs::<f64>(&d, seed);
                    let dy = SeededRng::new(seed ^ 1).normal_tensor(&d.y_shape(), 1.0);
                    // the two forwards share a summation order, so any difference is a bug
                    let fused_y = m2rnn_forward(&inp)?.0;
                    let unfused_y = m2rnn_forward_reference(&inp)?.0;
                    let agree = fused_y == unfused_y;
                    passed &= agree;
                    let fused = median_secs(cfg.bench_runs, || {
                        std::hint::black_box(m2rnn_forward(&inp)?);
                        Ok(())
                    })?;
                    let unfused = median_secs(cfg.bench_runs, || {
                        std::hint::black_box(m2rnn_forward_reference(&inp)?);
                        Ok(())
                    })?;
                    let train = median_secs(cfg.bench_runs, || {
                        let h = m2rnn_forward_cached(&inp)?;
                        std::hint::black_box(m2rnn_backward(&inp, &h, &dy, Some(1.0))?);
                        Ok(())
                    })?;
                    let tokens = (batch * cfg.bench_steps) as f64;
                    let tps = |s: f64| tokens / s;
                    writeln!(
                        f,
                        "{batch},{heads},{key_dim},{value_dim},{},{fused:.6e},{unfused:.6e},{train:.6e},{:.1},{:.1},{:.1}",
                        cfg.bench_steps,
                        tps(fused),
                        tps(unfused),
                        tps(train)
                    )
                    .map_err(io)?;
                    let _ = writeln!(
                        report,
                        "{batch:>5} {heads:>4} {key_dim:>4} {value_dim:>4} {:>5} {:>14.0} {:>14.0} {:>14.0} {:>7.2}x{}",
                        cfg.bench_steps,
                        tps(fused),
                        tps(unfused),
                        tps(train),
                        unfused / fused,
                        if agree { "" } else { "  OUTPUT MISMATCH" }
                    );
                }
            }
        }
    }
    let _ = writeln!(report, "median of {} runs; wrote {}", cfg.bench_runs, path.display());
    crate::write_report(cfg, "bench.txt", &report)?;
    Ok(Outcome { report, passed })
}
