//! Minimal differentiable computation layer: operator kernels with
//! analytic backward passes, a gradient tape, layer stacks and a
//! finite-difference validator.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod tape;

pub use gradcheck::{finite_difference_check, CheckOptions, CheckReport};
pub use layers::{
    forward, Forward, LayerSpec, Mode, ParameterSet, RunningStats, Sequential, StatUpdate,
};
pub use ops::{instance_norm, BatchStats};
pub use tape::{Gradients, Tape, Var};
