//! Eulerian video motion magnification with texture/shape disentanglement,
//! top-k sparse cross-covariance attention and point-wise magnification.

pub mod cli;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{finite_diff_grad, Gradients, Graph, Var};
pub use tensor::{Init, Real, Tensor};
