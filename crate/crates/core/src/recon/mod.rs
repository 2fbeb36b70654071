//! Reconstruction: the unrolled denoiser/data-consistency network and the
//! classical zero-filled and TV baselines.

pub mod classical;
pub mod unrolled;
