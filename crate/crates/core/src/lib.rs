//! Feature visualization and its gradient-based inversion.
//!
//! The pipeline maps unconstrained parameters `v` through a
//! parametrization `P`, a network `N` and a spatial aggregation to a
//! feature response `y`. Feature visualization maximizes the significance
//! `S_x(y)` of `y` for an objective `x`; inversion recovers `x` from a
//! realization of that optimization.

pub mod critical;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod fv;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod optim;
pub mod parametrize;
pub mod pipeline;
pub mod sampling;
pub mod solver;
pub mod tensor;
pub mod toynet;

pub use error::{Error, Result};
pub use network::{Differentiable, JacobianMatrix, Layer, Network, Padding};
pub use objective::{Aggregation, FeatureObjective, FeatureResponse, SignificanceConfig};
pub use parametrize::{ParamKind, Parametrization};
pub use pipeline::FeaturePipeline;
pub use solver::{Prediction, SubspaceBasis};
pub use tensor::Tensor;
