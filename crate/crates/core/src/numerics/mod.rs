//! Complex/real tensor storage, centered orthonormal 2-D FFT, and seeded RNG.

mod fft;
mod rng;
mod tensor;
mod tensor_io;

pub use fft::{fft2c, fft2c_planar_batched, ifft2c};
pub use rng::Rng;
pub use tensor::{CTensor, RTensor};
pub use tensor_io::{read_rtensor, write_rtensor};
