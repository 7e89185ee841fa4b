//! Matrix-to-matrix recurrent layers on a small dense tensor library.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom of this file fix the scalar for the common cases.

pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layer;
pub mod oracles;
pub mod params;
pub mod random;
pub mod recurrence;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use baselines::{
    diag_linear_rnn_backward, diag_linear_rnn_forward, diag_linear_rnn_forward_cached, gru_backward, gru_forward,
    gru_forward_cached, vector_rnn_backward, vector_rnn_forward, vector_rnn_forward_cached, vector_rnn_scan,
    DiagLinearRnnParams, GruParams, VectorRnnParams,
};
pub use error::{CoreError, Result};
pub use gradcheck::{finite_difference_grad, rel_error};
pub use layer::{
    layer_backward, layer_forward, layer_forward_cached, param_count, state_size, ConvInit, HeadKind, HeadPattern,
    LayerConfig, LayerParams, NormMode, TransitionInit,
};
pub use params::ParamSet;
pub use random::SeededRng;
pub use recurrence::{
    clip_state_gradient, forget_gate, forget_gate_init, m2rnn_backward, m2rnn_forward, m2rnn_forward_cached,
    ForgetGateParams, RecurrenceDims, RecurrenceGrads, RecurrenceInputs,
};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::{matmul, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type RecurrenceInputs64 = RecurrenceInputs<f64>;
pub type LayerParams64 = LayerParams<f64>;
pub type LayerParams32 = LayerParams<f32>;
