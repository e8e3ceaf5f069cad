//! Minimal reverse-mode differentiable numerics.

mod adam;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_all_ops, finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, OpCheck, TensorCheck};
pub use params::{ParamId, ParamStore, Parameter, ParameterGroup};
pub use tape::{soft_activation, window_distances, Gradients, Tape, Var};
pub use tensor::Tensor;
