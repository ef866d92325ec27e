//! Dense tensors, a reverse-mode tape, Adam with decoupled weight decay,
//! finite-difference gradient checks and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod optim;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, FnObjective, GradCheckOptions, GradCheckReport, Objective};
pub use graph::{Graph, KeyPattern, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use scalar::Real;
pub use tensor::Tensor;

pub(crate) use graph::log_softmax_row;

/// Log-softmax of one row, outside any graph.
pub fn log_softmax_vec<T: Real>(row: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(row.len());
    log_softmax_row(row, &mut out);
    out
}
