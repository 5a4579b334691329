//! Disparity-map inpainting toolkit.
//!
//! Reconstructs occluded regions of disparity (inverse-depth) images with a
//! small two-stage generator trained under a WGAN-GP objective, extended
//! with three surface-aware ingredients:
//!
//! - surface normals computed from disparity gradients as a fixed
//!   convolution ([`normals`]), usable both as a plain function and inside
//!   differentiable losses;
//! - a vectorial loss penalising normal-map differences, alongside L1 and
//!   the adversarial term ([`losses`]);
//! - contextual attention over disparity+normal features, with propagation
//!   and patch transfer ([`attention`]), and a critic that judges disparity
//!   concatenated with its normals ([`model`]).
//!
//! Evaluation ([`metrics`]) covers pixel-wise MSE / vectorial error and
//! histogram distances (Jensen-Shannon, Kullback-Leibler, Wasserstein,
//! intersection, correlation) over depth and surface distributions.
//! Synthetic piecewise-planar scenes with exact analytic normals
//! ([`scene`]) provide oracles and training data at desk scale; [`io`]
//! reads and writes 16-bit PGM, PFM and the CityScapes disparity encoding.

pub mod attention;
pub mod error;
pub mod graph;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod normals;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{grad_check, grad_check_multi, Graph, PadMode, Padding, Var};
pub use image::{DisparityImage, HoleMask, NormalMap, Region};
pub use tensor::Tensor;
