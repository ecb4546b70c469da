//! Core library for benchmarking H&E to HER2 virtual-staining models.
//!
//! The crate covers the full desk-scale workflow: tile and manifest handling
//! ([`imaging`], [`dataset`]), training objectives for the adversarial models
//! ([`losses`]), diffusion machinery ([`diffusion`]), a small trainable U-Net
//! ([`backbone`]), image-quality metrics ([`metrics`]) and the mixed-effects
//! comparison model ([`lmm`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod imaging;
pub mod lmm;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use imaging::{load_image, save_image, Her2Score, ImageTensor, Manifest, Split, Status, TileRecord};
pub use tensor::{Shape, Tensor};
