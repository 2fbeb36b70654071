//! Multi-coil MRI forward model, synthetic data generation, and dataset I/O.
//!
//! The forward operator maps an image x to per-coil k-space:
//! `A: x -> mask * fft2c(S_j * x)` for each coil j, with the adjoint
//! `A^H: y -> sum_j conj(S_j) * ifft2c(mask * y_j)`. With the centered
//! orthonormal FFT and pixelwise-normalized sensitivities
//! (`sum_j |S_j|^2 = 1`), `A` is an isometry when the mask is all ones.

mod dataset;
mod phantom;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{fft2c, ifft2c, CTensor, RTensor};

pub use dataset::{
    build_dataset, read_sample, write_sample, DatasetManifest, GenConfig, ManifestEntry, Split,
};
pub use phantom::{simulate_coils, simulate_phantom};

/// Per-coil complex sensitivity maps `[N_c, H, W]`, pixelwise normalized so
/// that `sum_j |S_j|^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivities {
    maps: CTensor,
}

impl CoilSensitivities {
    pub fn new(maps: CTensor) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::Shape {
                op: "CoilSensitivities::new",
                detail: format!("expected [N_c, H, W], got {:?}", maps.shape()),
            });
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &CTensor {
        &self.maps
    }

    pub fn n_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

/// One fully sampled training/evaluation sample: multi-coil k-space, the
/// sensitivities it was formed with, and the coil-combined label image.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSample {
    pub kspace: CTensor,
    pub sens: CoilSensitivities,
    pub label: CTensor,
}

fn check_geometry(
    op: &'static str,
    x_shape: &[usize],
    sens: &CoilSensitivities,
    mask: &RTensor,
) -> Result<(usize, usize, usize)> {
    let (h, w) = sens.image_shape();
    let nc = sens.n_coils();
    if mask.shape() != [h, w] {
        return Err(Error::Shape {
            op,
            detail: format!("mask {:?} vs image [{h}, {w}]", mask.shape()),
        });
    }
    let ok = x_shape == [h, w] || x_shape == [nc, h, w];
    if !ok {
        return Err(Error::Shape {
            op,
            detail: format!("input {:?} vs sens {:?}", x_shape, sens.maps().shape()),
        });
    }
    Ok((nc, h, w))
}

/// Forward operator: per coil j, `mask * fft2c(S_j * x)`.
pub fn sense_forward(x: &CTensor, sens: &CoilSensitivities, mask: &RTensor) -> Result<CTensor> {
    let (nc, h, w) = check_geometry("sense_forward", x.shape(), sens, mask)?;
    if x.shape().len() != 2 {
        return Err(Error::Shape {
            op: "sense_forward",
            detail: format!("image must be [H, W], got {:?}", x.shape()),
        });
    }
    let mut out = CTensor::zeros(&[nc, h, w]);
    for j in 0..nc {
        let sj = sens.maps().block(j);
        let weighted = CTensor::from_vec(
            &[h, w],
            x.data().iter().zip(sj).map(|(xi, si)| xi * si).collect(),
        )?;
        let mut ksp = fft2c(&weighted)?;
        for (k, m) in ksp.data_mut().iter_mut().zip(mask.data()) {
            *k *= m;
        }
        out.block_mut(j).copy_from_slice(ksp.data());
    }
    Ok(out)
}

/// Adjoint operator: `sum_j conj(S_j) * ifft2c(mask * y_j)`.
pub fn sense_adjoint(y: &CTensor, sens: &CoilSensitivities, mask: &RTensor) -> Result<CTensor> {
    let (nc, h, w) = check_geometry("sense_adjoint", y.shape(), sens, mask)?;
    if y.shape().len() != 3 {
        return Err(Error::Shape {
            op: "sense_adjoint",
            detail: format!("k-space must be [N_c, H, W], got {:?}", y.shape()),
        });
    }
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    for j in 0..nc {
        let masked = CTensor::from_vec(
            &[h, w],
            y.block(j)
                .iter()
                .zip(mask.data())
                .map(|(yi, m)| yi * m)
                .collect(),
        )?;
        let img = ifft2c(&masked)?;
        let sj = sens.maps().block(j);
        for ((a, zi), si) in acc.iter_mut().zip(img.data()).zip(sj) {
            *a += si.conj() * zi;
        }
    }
    CTensor::from_vec(&[h, w], acc)
}
