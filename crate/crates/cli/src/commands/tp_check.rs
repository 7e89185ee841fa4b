//! Tensor-parallel equivalence: the sharded step against a single-device reference.

use std::fmt::Write as _;

use m2rnn_core::{layer_backward, layer_forward_cached, rel_error, LayerParams, NormMode, ParamSet, SeededRng, Tensor};
use m2rnn_tp::{shard_params, tp_layer_step, write_comm_csv, CommRecord, Scheme, ShardSpec, TpStep};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{create_file, Outcome};

pub const TP_TOL: f64 = 1e-10;

/// Result of one world size.
#[derive(Clone, Debug)]
pub struct WorldCheck {
    pub world: usize,
    pub output_err: f64,
    pub dx_err: f64,
    /// worst parameter gradient, with its name
    pub grad_err: (String, f64),
    pub extra_rounds: (usize, usize),
    pub expected_rounds: (usize, usize),
    pub step: TpStep<f64>,
}

impl WorldCheck {
    pub fn max_deviation(&self) -> f64 {
        [self.output_err, self.dx_err, self.grad_err.1]
            .into_iter()
            .fold(0.0, |m, e| if e > m || e.is_nan() { e } else { m })
    }

    pub fn passed(&self) -> bool {
        self.max_deviation() <= TP_TOL && self.extra_rounds == self.expected_rounds
    }
}

fn layer(cfg: &RunConfig) -> Result<LayerParams<f64>> {
    let mut lc = cfg.model_spec(1, 1)?.layer_config();
    lc.init_std = lc.init_std.max(0.3);
    let mut p = LayerParams::init(lc, cfg.seed)?;
    let mut rng = SeededRng::new(cfg.seed ^ 0x7e45);
    p.norm_weight = rng.uniform_tensor(p.norm_weight.shape(), 0.5, 1.5);
    p.w_r = rng.uniform_tensor(p.w_r.shape(), -1.0, 1.0);
    Ok(p)
}

fn worst_grad<P: ParamSet<f64>>(a: &P, b: &P) -> (String, f64) {
    a.named()
        .into_iter()
        .zip(b.named())
        .map(|((n, x), (_, y))| (n, rel_error(x, y)))
        .fold(
            (String::new(), 0.0),
            |m, c| if c.1 >= m.1 || c.1.is_nan() { c } else { m },
        )
}

/// Extra all-reduce rounds each scheme should log, independent of world size.
pub fn expected_rounds(scheme: Scheme, norm: NormMode) -> (usize, usize) {
    match (scheme, norm) {
        (Scheme::TopologyAware, _) => (0, 0),
        (Scheme::TopologyIndependent, NormMode::Concatenated) => (1, 3),
        (Scheme::TopologyIndependent, NormMode::PerHead) => (0, 2),
    }
}

pub fn check_world(cfg: &RunConfig, world: usize) -> Result<WorldCheck> {
    let scheme = cfg.scheme()?;
    let p = layer(cfg)?;
    let mut rng = SeededRng::new(cfg.seed ^ 0xda7a);
    let shape = [cfg.tp_batch, cfg.tp_steps, cfg.d_model];
    let x = rng.normal_tensor::<f64>(&shape, 1.0);
    let d_out = rng.normal_tensor::<f64>(&shape, 1.0);
    let spec = ShardSpec::new(scheme, cfg.heads, cfg.value_dim, world)?;
    let shards = shard_params(&p, &spec)?;
    let step = tp_layer_step(scheme, &shards, &x, &d_out, None, cfg.schedule()?)?;
    let (output_err, dx_err, grad_err) = match scheme {
        Scheme::TopologyIndependent => {
            let (o, cache) = layer_forward_cached(&p, &x)?;
            let (g, dx) = layer_backward(&p, &cache, &d_out, None)?;
            let gathered = step.gathered_grads()?;
            (
                rel_error(&step.output, &o),
                rel_error(&step.dx, &dx),
                worst_grad(&gathered, &g),
            )
        }
        // each shard is a complete smaller layer; the reference runs them
        // one at a time and sums what the bus would have reduced
        Scheme::TopologyAware => {
            let mut o = Tensor::zeros(&shape);
            let mut dx = Tensor::zeros(&shape);
            let mut worst = (String::new(), 0.0);
            for (s, g) in shards.iter().zip(&step.shard_grads) {
                let (os, cache) = layer_forward_cached(s, &x)?;
                let (gs, dxs) = layer_backward(s, &cache, &d_out, None)?;
                o.add_assign(&os)?;
                dx.add_assign(&dxs)?;
                let w = worst_grad(g, &gs);
                if w.1 > worst.1 || w.1.is_nan() {
                    worst = w;
                }
            }
            (rel_error(&step.output, &o), rel_error(&step.dx, &dx), worst)
        }
    };
    Ok(WorldCheck {
        world,
        output_err,
        dx_err,
        grad_err,
        extra_rounds: step.extra_rounds(),
        expected_rounds: expected_rounds(scheme, cfg.norm_mode()?),
        step,
    })
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let mut report = String::new();
    let mut records: Vec<CommRecord> = Vec::new();
    let mut passed = true;
    let _ = writeln!(
        report,
        "tp-check {} norm={} schedule={}",
        cfg.tp_scheme, cfg.norm, cfg.tp_schedule
    );
    for (i, &world) in cfg.tp_worlds.iter().enumerate() {
        let c = check_world(cfg, world)?;
        records.extend(c.step.comm_records(i));
        let ok = c.passed();
        passed &= ok;
        let _ = writeln!(
            report,
            "N_TP={world}: max deviation {:.3e} (output {:.3e}, dx {:.3e}, worst grad {} {:.3e}) {} {TP_TOL:.0e}",
            c.max_deviation(),
            c.output_err,
            c.dx_err,
            c.grad_err.0,
            c.grad_err.1,
            if c.max_deviation() <= TP_TOL { "<=" } else { ">" },
        );
        let ops: Vec<&str> = c.step.log.iter().map(|r| r.op.as_str()).collect();
        let _ = writeln!(
            report,
            "N_TP={world}: comm rounds forward=+{} backward=+{} (expected +{} / +{}) [{}] {}",
            c.extra_rounds.0,
            c.extra_rounds.1,
            c.expected_rounds.0,
            c.expected_rounds.1,
            ops.join(" "),
            if ok { "ok" } else { "FAIL" }
        );
    }
    let path = cfg.out.join("comm_log.csv");
    let mut f = create_file(&path)?;
    write_comm_csv(&mut f, &records).map_err(|e| CliError::io(&path, e))?;
    let _ = writeln!(report, "wrote {}", path.display());
    crate::write_report(cfg, "tp_check.txt", &report)?;
    Ok(Outcome { report, passed })
}
