//! Single-stage anchor-based object detector built from scratch: a small
//! reverse-mode autodiff engine, attention-generated stem convolutions,
//! a shifted-window attention block, dual-gate attention bridges, an
//! enhanced-fusion FPN/PAN neck, CIoU-based training losses, and
//! precision/recall/mAP evaluation.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod kernels;
pub mod geometry;
pub mod param;
pub mod tape;
pub mod gradcheck;
pub mod layers;
pub mod attention;
pub mod msconv;
pub mod swin;
pub mod cbam;
pub mod model;
pub mod loss;
pub mod eval;
pub mod data;
pub mod checkpoint;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
