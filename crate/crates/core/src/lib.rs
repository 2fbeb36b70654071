//! Joint optimization of a binary k-space under-sampling pattern and an
//! unrolled multi-coil MRI reconstruction network.
//!
//! The crate trains, at desk scale on synthetic multi-coil data, a sampling
//! pattern parameterized by per-location logits together with a shared-weight
//! unrolled reconstructor (denoiser + conjugate-gradient data consistency).
//! Binary sampling uses a straight-through estimator so gradients reach the
//! pattern logits while the forward mask stays exactly 0/1. Classical
//! baselines (zero-filled adjoint, TV-regularized reconstruction) and
//! variable-density patterns are included for comparison, with PSNR/SSIM
//! reporting.
//!
//! Module map:
//! - [`numerics`]: complex/real tensors, centered orthonormal 2-D FFT, seeded RNG
//! - [`autodiff`]: reverse-mode tape over real tensors + finite-difference gradcheck
//! - [`mri`]: multi-coil forward/adjoint operators, phantom simulation, dataset I/O
//! - [`sampling`]: probability maps, renormalization, binary/approximate/top-k/VD patterns
//! - [`recon`]: unrolled network and classical TV/zero-filled baselines
//! - [`metrics`]: PSNR and SSIM on magnitude images
//! - [`train`]: Adam, the joint training loop, checkpoints, and evaluation

/// Tape-based training allocates and frees many medium-sized tensors per
/// step; mimalloc keeps that out of mmap/munmap churn.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod mri;
pub mod numerics;
pub mod recon;
pub mod sampling;
pub mod suites;
pub mod train;

pub use error::{Error, Result};
