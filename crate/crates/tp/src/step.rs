//! One forward/backward step of a sharded layer, written as per-shard programs
//! that yield at every all-reduce.

use std::io::Write;

use m2rnn_core::kernels::{rmsnorm_rows_backward, rmsnorm_rows_forward};
use m2rnn_core::layer::{core_backward, layer_pre_norm, qk_backward, CoreBackward, LayerCache, PreNorm};
use m2rnn_core::tensor::{matmul_nt, matmul_tn};
use m2rnn_core::{layer_backward, layer_forward_cached, matmul, LayerParams, NormMode, Scalar, Tensor};

use crate::bus::{CollectiveBus, ReduceRecord};
use crate::error::{Result, TpError};
use crate::rmsnorm_tp::{finish_backward, finish_forward, partial_r, partial_sum_sq, OP_RMS_R, OP_RMS_S};
use crate::shard::{gather_params, Scheme};

pub const OP_OUTPUT: &str = "output";
pub const OP_DQ: &str = "dq";
pub const OP_DK: &str = "dk";
pub const OP_DX: &str = "dx";

pub enum Action<T> {
    Reduce { op: &'static str, payload: Tensor<T> },
    Done,
}

/// What a shard holds after the step. `output` and `dx` are fully reduced.
#[derive(Clone, Debug)]
pub struct ShardResult<T> {
    pub output: Tensor<T>,
    pub dx: Tensor<T>,
    pub grads: LayerParams<T>,
}

/// A shard's side of one step. `advance` receives the result of the previous
/// reduction (`None` on the first call).
pub trait ShardProgram<T>: Send {
    fn advance(&mut self, incoming: Option<Tensor<T>>) -> Result<Action<T>>;
    fn finish(self: Box<Self>) -> Result<ShardResult<T>>;
}

struct Inputs<'a, T> {
    shard: usize,
    p: &'a LayerParams<T>,
    x: &'a Tensor<T>,
    d_out: &'a Tensor<T>,
    clip: Option<T>,
}

fn expect_incoming<T>(incoming: Option<Tensor<T>>, stage: usize) -> Result<Tensor<T>> {
    incoming.ok_or_else(|| TpError::Protocol {
        round: stage,
        msg: "program resumed without a reduction result".into(),
    })
}

/// Query/key replicated, value heads and normalised features split.
struct IndependentProgram<'a, T> {
    io: Inputs<'a, T>,
    d_global: usize,
    stage: usize,
    pre: Option<PreNorm<T>>,
    normed: Option<Tensor<T>>,
    inv_rms: Option<Tensor<T>>,
    dnormed: Option<Tensor<T>>,
    core: Option<CoreBackward<T>>,
    dq: Option<Tensor<T>>,
    grads: LayerParams<T>,
    output: Option<Tensor<T>>,
    dx: Option<Tensor<T>>,
}

impl<'a, T: Scalar> IndependentProgram<'a, T> {
    fn concatenated(&self) -> bool {
        self.io.p.cfg.norm == NormMode::Concatenated
    }

    fn pre(&self) -> &PreNorm<T> {
        self.pre.as_ref().expect("forward ran")
    }

    fn emit_output(&mut self) -> Result<Action<T>> {
        self.stage = 2;
        let payload = matmul(self.normed.as_ref().expect("normed"), &self.io.p.w_o)?;
        Ok(Action::Reduce { op: OP_OUTPUT, payload })
    }

    fn emit_core(&mut self, dyg: Tensor<T>) -> Result<Action<T>> {
        self.stage = 4;
        let pre = self.pre.as_ref().expect("forward ran");
        let core = core_backward(self.io.p, pre, &dyg, self.io.clip, &mut self.grads)?;
        let payload = core.dq.clone();
        self.core = Some(core);
        Ok(Action::Reduce { op: OP_DQ, payload })
    }
}

impl<'a, T: Scalar> ShardProgram<T> for IndependentProgram<'a, T> {
    fn advance(&mut self, incoming: Option<Tensor<T>>) -> Result<Action<T>> {
        let p = self.io.p;
        let eps = T::lit(p.cfg.norm_eps);
        match self.stage {
            0 => {
                let pre = layer_pre_norm(p, self.io.x)?;
                if self.concatenated() {
                    let payload = partial_sum_sq(&pre.yg);
                    self.pre = Some(pre);
                    self.stage = 1;
                    return Ok(Action::Reduce { op: OP_RMS_S, payload });
                }
                let (normed, inv_rms) = rmsnorm_rows_forward(&pre.yg, &p.norm_weight, p.cfg.norm_groups(), eps)?;
                self.pre = Some(pre);
                self.normed = Some(normed);
                self.inv_rms = Some(inv_rms);
                self.emit_output()
            }
            1 => {
                let sums = expect_incoming(incoming, 1)?;
                let (normed, s) = finish_forward(&self.pre().yg, &p.norm_weight, &sums, self.d_global, eps);
                self.normed = Some(normed);
                self.inv_rms = Some(s);
                self.emit_output()
            }
            2 => {
                let out = expect_incoming(incoming, 2)?;
                let pre = self.pre();
                let (bt, dm) = (pre.rows(), p.cfg.d_model);
                let do2 = self.io.d_out.reshape(&[bt, dm])?;
                self.output = Some(out.into_shape(&[pre.batch, pre.steps, dm])?);
                self.grads.w_o = matmul_tn(self.normed.as_ref().expect("normed"), &do2)?;
                let dnormed = matmul_nt(&do2, &p.w_o)?;
                if self.concatenated() {
                    let payload = partial_r(&self.pre().yg, &p.norm_weight, &dnormed);
                    self.dnormed = Some(dnormed);
                    self.stage = 3;
                    return Ok(Action::Reduce { op: OP_RMS_R, payload });
                }
                let inv_rms = self.inv_rms.as_ref().expect("inv_rms");
                let (dyg, dnw) = rmsnorm_rows_backward(&self.pre().yg, &p.norm_weight, inv_rms, &dnormed)?;
                self.grads.norm_weight = dnw;
                self.emit_core(dyg)
            }
            3 => {
                let r = expect_incoming(incoming, 3)?;
                let s = self.inv_rms.as_ref().expect("inv_rms");
                let dnormed = self.dnormed.take().expect("dnormed");
                let (dyg, dnw) = finish_backward(&self.pre().yg, &p.norm_weight, s, &r, &dnormed, self.d_global);
                self.grads.norm_weight = dnw;
                self.emit_core(dyg)
            }
            4 => {
                self.dq = Some(expect_incoming(incoming, 4)?);
                self.stage = 5;
                let payload = self.core.as_ref().expect("core").dk.clone();
                Ok(Action::Reduce { op: OP_DK, payload })
            }
            5 => {
                let dk = expect_incoming(incoming, 5)?;
                let dq = self.dq.take().expect("dq");
                let pre = self.pre.as_ref().expect("forward ran");
                // Every shard holds the reduced dq, dk, so the replicated
                // query/key gradients agree bitwise; only shard 0 adds to dx.
                let dx_qk = qk_backward(p, pre, &dq, &dk, &mut self.grads)?;
                let mut payload = self.core.take().expect("core").dx;
                if self.io.shard == 0 {
                    payload.add_assign(&dx_qk)?;
                }
                self.stage = 6;
                Ok(Action::Reduce { op: OP_DX, payload })
            }
            6 => {
                let dx = expect_incoming(incoming, 6)?;
                let pre = self.pre();
                self.dx = Some(dx.into_shape(&[pre.batch, pre.steps, p.cfg.d_model])?);
                self.stage = 7;
                Ok(Action::Done)
            }
            s => Err(TpError::Protocol {
                round: s,
                msg: "program advanced after completion".into(),
            }),
        }
    }

    fn finish(self: Box<Self>) -> Result<ShardResult<T>> {
        finished(self.output, self.dx, self.grads)
    }
}

fn finished<T>(output: Option<Tensor<T>>, dx: Option<Tensor<T>>, grads: LayerParams<T>) -> Result<ShardResult<T>> {
    match (output, dx) {
        (Some(output), Some(dx)) => Ok(ShardResult { output, dx, grads }),
        _ => Err(TpError::Protocol {
            round: 0,
            msg: "program finished before completing its step".into(),
        }),
    }
}

/// Each shard is a complete layer over its own heads; only the output
/// projection and the input gradient are reduced.
struct AwareProgram<'a, T> {
    io: Inputs<'a, T>,
    stage: usize,
    cache: Option<LayerCache<T>>,
    grads: Option<LayerParams<T>>,
    output: Option<Tensor<T>>,
    dx: Option<Tensor<T>>,
}

impl<'a, T: Scalar> ShardProgram<T> for AwareProgram<'a, T> {
    fn advance(&mut self, incoming: Option<Tensor<T>>) -> Result<Action<T>> {
        match self.stage {
            0 => {
                let (o, cache) = layer_forward_cached(self.io.p, self.io.x)?;
                self.cache = Some(cache);
                self.stage = 1;
                Ok(Action::Reduce {
                    op: OP_OUTPUT,
                    payload: o,
                })
            }
            1 => {
                self.output = Some(expect_incoming(incoming, 1)?);
                let cache = self.cache.take().expect("forward ran");
                let (grads, dx) = layer_backward(self.io.p, &cache, self.io.d_out, self.io.clip)?;
                self.grads = Some(grads);
                self.stage = 2;
                Ok(Action::Reduce { op: OP_DX, payload: dx })
            }
            2 => {
                self.dx = Some(expect_incoming(incoming, 2)?);
                self.stage = 3;
                Ok(Action::Done)
            }
            s => Err(TpError::Protocol {
                round: s,
                msg: "program advanced after completion".into(),
            }),
        }
    }

    fn finish(self: Box<Self>) -> Result<ShardResult<T>> {
        let grads = self.grads.ok_or_else(|| TpError::Protocol {
            round: 0,
            msg: "program finished before its backward pass".into(),
        })?;
        finished(self.output, self.dx, grads)
    }
}

/// Builds one program per shard.
pub fn shard_programs<'a, T: Scalar>(
    scheme: Scheme,
    shards: &'a [LayerParams<T>],
    x: &'a Tensor<T>,
    d_out: &'a Tensor<T>,
    clip: Option<T>,
) -> Vec<Box<dyn ShardProgram<T> + 'a>> {
    let d_global: usize = shards.iter().map(|s| s.cfg.value_width()).sum();
    shards
        .iter()
        .enumerate()
        .map(|(shard, p)| {
            let io = Inputs {
                shard,
                p,
                x,
                d_out,
                clip,
            };
            let prog: Box<dyn ShardProgram<T> + 'a> = match scheme {
                Scheme::TopologyIndependent => Box::new(IndependentProgram {
                    io,
                    d_global,
                    stage: 0,
                    pre: None,
                    normed: None,
                    inv_rms: None,
                    dnormed: None,
                    core: None,
                    dq: None,
                    grads: p.zeros_like(),
                    output: None,
                    dx: None,
                }),
                Scheme::TopologyAware => Box::new(AwareProgram {
                    io,
                    stage: 0,
                    cache: None,
                    grads: None,
                    output: None,
                    dx: None,
                }),
            };
            prog
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// One OS thread per shard; a shard leaves the bus when its program ends.
    Threaded,
    /// Single thread: every live shard advances and posts, then all wait.
    Sequential,
}

fn drive_one<T: Scalar>(
    bus: &CollectiveBus<T>,
    shard: usize,
    mut prog: Box<dyn ShardProgram<T> + '_>,
) -> Result<ShardResult<T>> {
    let mut incoming = None;
    let run = loop {
        match prog.advance(incoming.take()) {
            Ok(Action::Reduce { op, payload }) => {
                if let Err(e) = bus.post(shard, op, payload) {
                    break Err(e);
                }
                match bus.wait(shard) {
                    Ok(t) => incoming = Some(t),
                    Err(e) => break Err(e),
                }
            }
            Ok(Action::Done) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    bus.depart(shard);
    run?;
    prog.finish()
}

pub fn run_threaded<T: Scalar>(
    bus: &CollectiveBus<T>,
    programs: Vec<Box<dyn ShardProgram<T> + '_>>,
) -> Result<Vec<ShardResult<T>>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = programs
            .into_iter()
            .enumerate()
            .map(|(shard, prog)| s.spawn(move || drive_one(bus, shard, prog)))
            .collect();
        let results: Vec<Result<ShardResult<T>>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect();
        results.into_iter().collect()
    })
}

pub fn run_sequential<T: Scalar>(
    bus: &CollectiveBus<T>,
    mut programs: Vec<Box<dyn ShardProgram<T> + '_>>,
) -> Result<Vec<ShardResult<T>>> {
    let world = programs.len();
    let mut incoming: Vec<Option<Tensor<T>>> = vec![None; world];
    let mut done = vec![false; world];
    loop {
        let mut posted = Vec::new();
        for shard in 0..world {
            if done[shard] {
                continue;
            }
            match programs[shard].advance(incoming[shard].take())? {
                Action::Reduce { op, payload } => {
                    bus.post(shard, op, payload)?;
                    posted.push(shard);
                }
                Action::Done => {
                    done[shard] = true;
                    bus.depart(shard);
                }
            }
        }
        if posted.is_empty() {
            break;
        }
        for shard in posted {
            incoming[shard] = Some(bus.wait(shard)?);
        }
    }
    programs.into_iter().map(|p| p.finish()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn of(op: &str) -> Self {
        if op == OP_RMS_S || op == OP_OUTPUT {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommRecord {
    pub step: usize,
    pub direction: Direction,
    pub round: usize,
    pub op: String,
    pub elements: usize,
}

pub const COMM_CSV_HEADER: &str = "step,direction,round,op,elements";

pub fn write_comm_csv(mut w: impl Write, records: &[CommRecord]) -> std::io::Result<()> {
    writeln!(w, "{COMM_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step,
            r.direction.name(),
            r.round,
            r.op,
            r.elements
        )?;
    }
    Ok(())
}

/// Result of [`tp_layer_step`].
#[derive(Clone, Debug)]
pub struct TpStep<T> {
    pub scheme: Scheme,
    pub output: Tensor<T>,
    pub dx: Tensor<T>,
    pub shard_grads: Vec<LayerParams<T>>,
    pub log: Vec<ReduceRecord>,
}

impl<T: Scalar> TpStep<T> {
    pub fn comm_records(&self, step: usize) -> Vec<CommRecord> {
        self.log
            .iter()
            .map(|r| CommRecord {
                step,
                direction: Direction::of(&r.op),
                round: r.round,
                op: r.op.clone(),
                elements: r.elements,
            })
            .collect()
    }

    /// Rounds beyond the one output reduction (forward) and one input-gradient
    /// reduction (backward) of a standard tensor-parallel layer.
    pub fn extra_rounds(&self) -> (usize, usize) {
        let fwd = self
            .log
            .iter()
            .filter(|r| Direction::of(&r.op) == Direction::Forward)
            .count();
        let bwd = self.log.len() - fwd;
        (fwd.saturating_sub(1), bwd.saturating_sub(1))
    }

    /// Gradients in the single-device layout. Only meaningful for the
    /// topology-independent scheme, whose query/key gradients are replicated.
    pub fn gathered_grads(&self) -> Result<LayerParams<T>> {
        if self.scheme != Scheme::TopologyIndependent {
            return Err(TpError::Config(
                "only replicated query/key gradients can be gathered".into(),
            ));
        }
        gather_params(&self.shard_grads)
    }
}

/// Runs forward and backward on already-sharded parameters. `x`, `d_out: [B, T, d]`.
pub fn tp_layer_step<T: Scalar>(
    scheme: Scheme,
    shards: &[LayerParams<T>],
    x: &Tensor<T>,
    d_out: &Tensor<T>,
    clip: Option<T>,
    schedule: Schedule,
) -> Result<TpStep<T>> {
    if shards.is_empty() {
        return Err(TpError::Config("no shards".into()));
    }
    let bus = CollectiveBus::new(shards.len());
    let programs = shard_programs(scheme, shards, x, d_out, clip);
    let results = match schedule {
        Schedule::Threaded => run_threaded(&bus, programs)?,
        Schedule::Sequential => run_sequential(&bus, programs)?,
    };
    let mut results = results.into_iter();
    let first = results.next().expect("at least one shard");
    let mut shard_grads = vec![first.grads];
    for r in results {
        if r.output.data() != first.output.data() || r.dx.data() != first.dx.data() {
            return Err(TpError::Protocol {
                round: 0,
                msg: "shards disagree on a reduced tensor".into(),
            });
        }
        shard_grads.push(r.grads);
    }
    Ok(TpStep {
        scheme,
        output: first.output,
        dx: first.dx,
        shard_grads,
        log: bus.log(),
    })
}
