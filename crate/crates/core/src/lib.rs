//! Multi-scale sampling and aggregation network for multi-exposure HDR fusion.
//!
//! Everything runs on a from-scratch CPU tensor engine with reverse-mode
//! differentiation: hand-written convolution, bilinear grid sampling, Haar
//! wavelet transforms, pooling, and the training tooling around them.
//!
//! The pipeline: three LDR exposures are linearized and stacked
//! ([`preprocess`]), encoded into shared-weight feature pyramids
//! ([`encoder`]), implicitly aligned to the middle exposure by sampling and
//! aggregating candidate features per pixel ([`sam`]) with mask-based
//! cross-scale fusion ([`iam`]), then merged by densely connected dilated
//! convolutions in the Haar wavelet domain ([`wavelet`]) into the HDR
//! estimate ([`model`]).
//!
//! The math is generic over the scalar type ([`scalar::Scalar`]); production
//! code runs f32, the finite-difference gradient checks run the same kernels
//! at f64.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod iam;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod preprocess;
pub mod sam;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod wavelet;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

/// Production tensor type.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient-check harness.
pub type Tensor64 = Tensor<f64>;
