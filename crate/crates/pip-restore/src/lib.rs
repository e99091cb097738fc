//! All-in-one image restoration driven by prompt-in-prompt modulation.
//!
//! The crate is built in layers:
//!
//! * [`tensor`] / [`graph`] — a small dense-tensor reverse-mode autodiff
//!   engine, generic over the scalar type ([`Scalar`]): `f32` for training,
//!   `f64` for wide-precision gradient checking.
//! * [`pip`] — the prompt machinery: a bank of degradation prompts, a basic
//!   restoration prompt, prompt-to-prompt fusion and selective
//!   prompt-to-feature modulation, plus the decorrelation loss that keeps
//!   the bank spread apart.
//! * [`backbone`] — a compact U-Net that applies prompt modulation on its
//!   skip connections.
//! * [`degrade`] / [`metrics`] — procedural clean/degraded pair synthesis
//!   and full-reference quality metrics (PSNR/SSIM).
//! * [`trainer`] / [`controller`] — the deterministic training loop with
//!   Adam + warmup/cosine schedule, and a tiny degradation classifier that
//!   can drive the prompt weights at inference time.
//! * [`io`] — PPM/PGM image files and the CRC-protected checkpoint format.

pub mod backbone;
pub mod controller;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod optim;
pub mod num;
pub mod params;
pub mod pip;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::Error;
pub use graph::{Graph, Var};
pub use num::Scalar;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Wide-precision tensor, used by the gradient-check suite.
pub type Tensor64 = Tensor<f64>;
/// Training-precision graph.
pub type Graph32 = Graph<f32>;
/// Wide-precision graph, used by the gradient-check suite.
pub type Graph64 = Graph<f64>;
