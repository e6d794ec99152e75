//! 3D MR image denoising toolkit built around a hybrid residual MLP-CNN model.
//!
//! The pipeline runs end to end on synthetic lesion phantoms: Rician noise
//! simulation, overlapping-patch extraction, a tape-based reverse-mode
//! differentiation core, Adam training on an MSE objective, and PSNR/SSIM
//! evaluation.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`tensor`]: minimal reverse-mode autodiff engine (linear, 3D conv /
//!   transposed conv, layer/batch norm, activations, MSE).
//! - [`model`]: the hybrid architecture (residual MLP encoder stack feeding
//!   a residual encoder-decoder CNN), its ablation variants, and the patch
//!   grid / reassembly machinery.
//! - [`noise`]: seeded Rician corruption of magnitude volumes.
//! - [`data`]: volumes, phantom generation, `.vol` file I/O, dataset splits.
//! - [`metrics`]: full-reference PSNR and SSIM.
//! - [`train`]: Adam loop, checkpointing, evaluation, ablation harness.

pub mod data;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod tensor;
pub mod train;
