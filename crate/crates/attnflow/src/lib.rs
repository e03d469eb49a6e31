//! Pose-guided person image synthesis combining attention-correlation warping
//! with flow-field warping, fused per pixel by a learned combination map.
//!
//! The crate is organized around six subsystems:
//!
//! - [`warp_ops`] — pure differentiable spatial-transformation kernels
//!   (correlation softmax, attention warp, bilinear flow warp, blending,
//!   resizing) and the `.flo` flow-field file format.
//! - [`deform_net`] — learnable estimators producing per-scale deformations:
//!   key/query encoders, the flow-field estimator, and the combination-map
//!   generator.
//! - [`synthesis_net`] — the image generator (reference feature extractor,
//!   warping block, decoder) and the patch discriminator.
//! - [`losses`] — the full training objective: deformation-constraining
//!   losses and image-realism losses with a weighted total.
//! - [`data_pipeline`] — keypoint ingestion, skeleton rasterization, paired
//!   sample loading, and a procedural articulated-sprite generator with
//!   ground-truth flow.
//! - [`train_eval`] — the staged trainer, parameter averaging, SSIM/EPE
//!   metrics, deformation visualizers, and checkpointing.
//!
//! Everything runs on the CPU in `f64` via the small reverse-mode autodiff
//! tape in [`autodiff`].

pub mod autodiff;
pub mod data_pipeline;
pub mod deform_net;
pub mod error;
pub mod losses;
pub mod nn;
pub mod synthesis_net;
pub mod train_eval;
pub mod warp_ops;

pub use error::{Error, Result};
