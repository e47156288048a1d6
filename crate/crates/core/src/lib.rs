//! Dual-branch residual fusion for volumetric lesion segmentation from
//! pre- and post-contrast volumes.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine with 3D
//! convolution ([`graph`], [`kernels`]), the fusion modules ([`fusion`]), the
//! encoder-decoder ([`network`]), synthetic phantoms ([`phantom`]), and the
//! training and evaluation loop ([`train`]).

pub mod checkpoint;
pub mod compare;
pub mod dataset;
pub mod error;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod param;
pub mod phantom;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod volume;

mod codec;

pub use error::{Error, Result};
pub use fusion::{FusionInit, FusionVariant};
pub use graph::{Graph, Var};
pub use network::{DualBranchSegNet, ModelConfig};
pub use param::{ParamStore, Parameter};
pub use tensor::{Real, Tensor};
