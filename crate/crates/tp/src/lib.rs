//! Tensor-parallel execution of the matrix-state layer, simulated with
//! in-process shards and an all-reduce bus.

pub mod bus;
pub mod error;
pub mod rmsnorm_tp;
pub mod shard;
pub mod step;

pub use bus::{CollectiveBus, ReduceRecord};
pub use error::{Result, TpError};
pub use rmsnorm_tp::{rmsnorm_tp_backward, rmsnorm_tp_forward, rmsnorm_tp_rows, RmsTpRun};
pub use shard::{
    gather_params, norm_params, projection_params, shard_params, shard_topology_aware, shard_topology_independent,
    Scheme, ShardSpec,
};
pub use step::{tp_layer_step, write_comm_csv, CommRecord, Direction, Schedule, TpStep};
