//! Minimal reverse-mode differentiation over `f64` tensors with exactly the
//! layers the generator and discriminator need.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the inputs it needs for the backward pass. Parameters live outside the tape
//! in a [`ParamStore`] and are bound into a graph as leaves for each step.

mod checkpoint;
mod conv;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry, CheckpointWriter, Dtype};
pub use conv::{conv1d_backward_input, conv1d_backward_weight, conv1d_forward, conv_out_len};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{phase_shuffle_indices, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use params::{spectral_normalize, ParamId, ParamStore, Parameter, SpectralState};
pub use tensor::Tensor;
