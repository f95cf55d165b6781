//! Numeric substrate: dense f64 tensors, a reverse-mode autodiff tape,
//! multi-layer perceptrons, parameter checkpoints, and a finite-difference
//! gradient checker.
//!
//! Design constraints honored here:
//! - all values are f64; no mixed precision anywhere;
//! - the tape is append-only and single-use per step: `backward` may run
//!   once, `reset` truncates back to the bound leaves;
//! - reductions over point rows are value-canonical so that permuting the
//!   rows of the inputs permutes the outputs bit-exactly (see `graph`).

mod checkpoint;
mod fdcheck;
mod graph;
mod mlp;
mod tensor;

pub use checkpoint::{
    collect_entries, load_checkpoint, restore_params, save_checkpoint, CheckpointEntry,
};
pub use fdcheck::{check_gradients, FdCheckReport};
pub use graph::{Graph, Var};
pub use mlp::{
    apply_graph_sgd, sgd_step, Activation, LayerParams, LayerVars, MlpParams, MlpVars, Norm,
    ParamGroup,
};
pub use tensor::Tensor;
