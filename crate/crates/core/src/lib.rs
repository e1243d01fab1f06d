//! Bio-inspired visual attention prediction.
//!
//! A VGG-style backbone feeds five feature levels into a contrast feature
//! block (low levels) and a densely connected fusion block built from
//! reduction-attention units. Five readouts and a learnable centre-bias
//! prior are fused into a final attention map trained with a
//! KL-divergence objective. The crate also carries the saliency metric
//! suite (CC, NSS, AUC-Judd/Borji/shuffled, EMD), a synthetic dataset
//! generator, and a binary checkpoint format.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod error;
pub mod gaussian;
pub mod params;
pub mod tensor;

pub use autodiff::{ConvSpec, Graph, Padding, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Dims, Tensor};

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod fusion;
pub mod gradsuite;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;
