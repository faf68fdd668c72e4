//! Convolutional networks with windowed dense connectivity.
//!
//! Each layer of a dense block sees the concatenated feature maps of at most
//! `N` preceding layers instead of all of them. The crate provides a small
//! reverse-mode autodiff engine, the layer primitives, the connectivity
//! planner and exact parameter counter, an SGD training harness, a CIFAR-10
//! loader, and the feature-reuse and capacity-normalization analyses.

pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod nn;
pub mod run;
pub mod smoke;
pub mod tensor;
pub mod train;

pub use arch::{build_connectivity, build_network, count_parameters, ArchConfig, ConnectivityPlan, Network, ParamReport};
pub use graph::{Graph, Var};
pub use tensor::{Shape, Tensor, TensorError};
