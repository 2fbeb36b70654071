//! Centered orthonormal 2-D FFT.
//!
//! Convention, fixed crate-wide: `fft2c(x) = fftshift(FFT(ifftshift(x))) / sqrt(H*W)`
//! and `ifft2c` its exact inverse (and adjoint). The transform is unitary and
//! places the DC component at index `(H/2, W/2)` (floor division).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{CTensor, RTensor};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
    static PAIR_BUF: RefCell<Vec<Complex64>> = const { RefCell::new(Vec::new()) };
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

thread_local! {
    static SCRATCH: RefCell<Vec<Complex64>> = const { RefCell::new(Vec::new()) };
}

/// In-place centered orthonormal transform of one `[H, W]` plane.
///
/// The ifftshift is fused into the initial gather and the fftshift into the
/// final scatter, so the whole transform is gather, row FFTs, transpose,
/// column FFTs, scatter - with one thread-local scratch buffer and no
/// per-call allocation.
pub(crate) fn fft2c_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    // reading with offset +floor(n/2) realizes a right-shift by ceil(n/2)
    let (sh_in, sw_in) = (h / 2, w / 2);
    // writing with offset +floor(n/2) realizes the final fftshift
    let (sh_out, sw_out) = (h / 2, w / 2);
    let scale = 1.0 / ((h * w) as f64).sqrt();

    SCRATCH.with(|cell| {
        let mut scratch = cell.borrow_mut();
        scratch.resize(h * w, Complex64::new(0.0, 0.0));

        // gather with ifftshift
        for r in 0..h {
            let src = &buf[((r + sh_in) % h) * w..((r + sh_in) % h) * w + w];
            let dst = &mut scratch[r * w..(r + 1) * w];
            let split = w - sw_in;
            dst[..split].copy_from_slice(&src[sw_in..]);
            dst[split..].copy_from_slice(&src[..sw_in]);
        }
        for r in 0..h {
            row_fft.process(&mut scratch[r * w..(r + 1) * w]);
        }
        // transpose into buf, column FFTs as contiguous runs
        for r in 0..h {
            for c in 0..w {
                buf[c * h + r] = scratch[r * w + c];
            }
        }
        for c in 0..w {
            col_fft.process(&mut buf[c * h..(c + 1) * h]);
        }
        // scatter back with fftshift and scaling
        for c in 0..w {
            let cc = (c + sw_out) % w;
            for r in 0..h {
                let rr = (r + sh_out) % h;
                scratch[rr * w + cc] = buf[c * h + r] * scale;
            }
        }
        buf.copy_from_slice(&scratch);
    });
}

fn check_2d(x: &CTensor, op: &'static str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Shape {
            op,
            detail: format!("expected nonempty [H, W], got {:?}", s),
        });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { ctx: op.to_string() });
    }
    Ok((s[0], s[1]))
}

/// Centered orthonormal 2-D FFT of an `[H, W]` image.
pub fn fft2c(img: &CTensor) -> Result<CTensor> {
    let (h, w) = check_2d(img, "fft2c")?;
    let mut out = img.clone();
    fft2c_inplace(out.data_mut(), h, w, false);
    Ok(out)
}

/// Exact inverse (and adjoint) of [`fft2c`].
pub fn ifft2c(ksp: &CTensor) -> Result<CTensor> {
    let (h, w) = check_2d(ksp, "ifft2c")?;
    let mut out = ksp.clone();
    fft2c_inplace(out.data_mut(), h, w, true);
    Ok(out)
}

/// Centered orthonormal transform applied to every `[2, H, W]` planar
/// (re, im) pair of a `[..., 2, H, W]` real tensor. Used by the autodiff tape.
pub fn fft2c_planar_batched(x: &RTensor, inverse: bool) -> Result<RTensor> {
    let s = x.shape();
    if s.len() < 3 || s[s.len() - 3] != 2 {
        return Err(Error::Shape {
            op: "fft2c_planar_batched",
            detail: format!("expected [..., 2, H, W], got {:?}", s),
        });
    }
    let h = s[s.len() - 2];
    let w = s[s.len() - 1];
    let plane = h * w;
    let mut out = x.clone();
    let transform = |blk: &mut [f64]| {
        PAIR_BUF.with(|cell| {
            let mut buf = cell.borrow_mut();
            buf.resize(plane, Complex64::new(0.0, 0.0));
            for i in 0..plane {
                buf[i] = Complex64::new(blk[i], blk[plane + i]);
            }
            fft2c_inplace(&mut buf, h, w, inverse);
            for i in 0..plane {
                blk[i] = buf[i].re;
                blk[plane + i] = buf[i].im;
            }
        });
    };
    // independent planes: parallel execution is bit-deterministic
    if x.len() > 2 * plane && plane >= 1024 {
        out.data_mut()
            .par_chunks_mut(2 * plane)
            .for_each(transform);
    } else {
        for blk in out.data_mut().chunks_mut(2 * plane) {
            transform(blk);
        }
    }
    Ok(out)
}
