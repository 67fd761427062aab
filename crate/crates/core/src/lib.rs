//! Training residual networks as a discrete-time optimal control problem.
//!
//! The library treats a ResNet as a controlled dynamical system: layer-to-layer
//! propagation of the stacked dataset is the dynamics, the per-layer weights and
//! biases are the control inputs, and training minimizes a stage cost (soft
//! cross-entropy of the hidden states plus a quadratic input penalty) together
//! with a terminal classification loss. With the soft cross-entropy stage cost
//! the problem is strictly dissipative with respect to the per-class minimizer
//! lines, and trained networks exhibit a turnpike: after a few layers the states
//! settle near the minimizer set and the remaining layers act as near-identity
//! maps, which makes them safe to crop.
//!
//! Modules:
//! - [`softce`]: label smoothing, soft cross-entropy and its full geometry
//!   (gradient, Hessian, minimizer lines, distance, class-K lower bound).
//! - [`resnet`]: the two residual architectures as dynamical systems, ensemble
//!   forward propagation and exact reverse-mode parameter gradients.
//! - [`checkpoint`]: self-describing text checkpoints with bit-exact round-trips.
//! - [`train`]: objective assembly, Adam, the training loop.
//! - [`data`]: two-spirals generator, IDX loading, dataset stacking.
//! - [`turnpike`]: per-layer diagnostics, dissipation checks, turnpike entry
//!   detection and depth cropping.
//! - [`gradcheck`]: finite-difference verification of the analytic gradients.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod linalg;
pub mod resnet;
pub mod softce;
pub mod train;
pub mod turnpike;
