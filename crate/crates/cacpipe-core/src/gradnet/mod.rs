//! Minimal differentiable-computation engine for the two pipeline networks.
//!
//! Supports exactly the layer set the pipeline needs: 3x3 / 3x3x3 same-pad
//! convolutions, 2x ceil-mode average and max pooling, an averaging
//! pre-pool, global average pooling, fully connected layers, batch
//! normalisation, ELU and tanh nonlinearities. Two losses (negative
//! normalised cross correlation and L1 on log-transformed scores), a
//! differentiable rigid 3-D warp, and Adam complete the training loop.
//!
//! Activations and parameters store in a caller-chosen float type (`f32` in
//! production); every dot product, statistic, and gradient accumulates in
//! f64. Analytic gradients for each layer, both losses, and the warp are
//! verified against central finite differences on an f64 replica in
//! [`check`].

mod backward;
mod check;
mod forward;
mod kernels;
mod loss;
mod spec;
mod state;
mod tensor;
mod warp;

pub use backward::backward_range;
pub use check::{grad_check, grad_check_suite, GradCheckReport};
pub use forward::{forward_infer, forward_train, Cache, LayerAux};
pub use loss::{l1_log_loss, ncc_loss};
pub use spec::{LayerSpec, NetSpec};
pub use state::{adam_step, AdamState, NetState};
pub use tensor::Tensor;
pub use warp::{spatial_transform_3d, spatial_transform_3d_backward};
