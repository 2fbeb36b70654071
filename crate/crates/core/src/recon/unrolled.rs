//! K-block unrolled reconstruction: a shared-weight convolutional denoiser
//! alternating with conjugate-gradient data-consistency solves.
//!
//! Each block runs `z = denoise(x)` followed by `x = argmin_x
//! sum_j ||U F S_j x - U b_j||^2 + lambda ||x - z||^2`, solved by a fixed
//! number of CG iterations on the normal equations from x0 = 0. The mask
//! enters each operator application exactly once (no squaring), so binary
//! masks and fractional relaxations share one code path and the tape's mask
//! gradient flows through both the zero-filled input and every
//! data-consistency block. Gradients are exact derivatives of the computed
//! output: CG is backpropagated through its unrolled iterations.
//!
//! lambda is carried as exp(rho) with rho trainable, so positivity holds by
//! construction. The denoiser is five 3x3 convs (2 -> C -> C -> C -> C -> 2)
//! with instance norm + ReLU on the first four and a residual skip.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::mri::KSpaceSample;
use crate::numerics::{CTensor, RTensor, Rng};

/// Instance-norm variance epsilon.
pub const IN_EPS: f64 = 1e-5;

/// Unrolled network geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollConfig {
    /// Number of denoiser + data-consistency blocks.
    pub k_blocks: usize,
    /// CG iterations per data-consistency solve.
    pub n_cg: usize,
    /// Denoiser channel width.
    pub width: usize,
}

impl UnrollConfig {
    pub fn new(k_blocks: usize, n_cg: usize, width: usize) -> Result<Self> {
        if k_blocks < 1 || n_cg < 1 || width < 1 {
            return Err(Error::InvalidArg(format!(
                "unroll config needs K, n_cg, width >= 1 (got {k_blocks}, {n_cg}, {width})"
            )));
        }
        Ok(Self {
            k_blocks,
            n_cg,
            width,
        })
    }
}

/// Channel sizes of the five denoiser convs for width C.
fn conv_dims(width: usize) -> [(usize, usize); 5] {
    [
        (2, width),
        (width, width),
        (width, width),
        (width, width),
        (width, 2),
    ]
}

/// Inserts freshly initialized denoiser weights and the data-consistency
/// log-weight into `store`: conv weights Glorot-uniform, biases zero,
/// instance-norm gain 1 / bias 0, rho = 0 (lambda = 1).
pub fn init_model_params(store: &mut ParamStore, rng: &mut Rng, width: usize) {
    for (i, (cin, cout)) in conv_dims(width).iter().enumerate() {
        let bound = (6.0 / ((cin + cout) * 9) as f64).sqrt();
        let w = RTensor::from_vec(
            &[*cout, *cin, 3, 3],
            (0..cout * cin * 9)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect(),
        )
        .expect("shape/data agree");
        store.insert(format!("den.conv{i}.w"), w);
        store.insert(format!("den.conv{i}.b"), RTensor::zeros(&[*cout]));
        if i < 4 {
            store.insert(format!("den.in{i}.g"), RTensor::full(&[*cout], 1.0));
            store.insert(format!("den.in{i}.b"), RTensor::zeros(&[*cout]));
        }
    }
    store.insert("dc.rho", RTensor::scalar(0.0));
}

fn leaf(leaves: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    leaves
        .get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// Residual denoiser on a complex pair `[2, H, W]`.
pub fn denoise_tape(
    tape: &mut Tape,
    x: NodeId,
    leaves: &BTreeMap<String, NodeId>,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..5 {
        let w = leaf(leaves, &format!("den.conv{i}.w"))?;
        let b = leaf(leaves, &format!("den.conv{i}.b"))?;
        h = tape.conv2d(h, w, b)?;
        if i < 4 {
            let g = leaf(leaves, &format!("den.in{i}.g"))?;
            let beta = leaf(leaves, &format!("den.in{i}.b"))?;
            h = tape.instance_norm(h, g, beta, IN_EPS)?;
            h = tape.relu(h);
        }
    }
    tape.add(x, h)
}

/// One application of the regularized normal operator
/// `N(x) = A^H(mask * A(x)) + lambda x` with the mask applied once.
fn normal_op(
    tape: &mut Tape,
    x: NodeId,
    sens: NodeId,
    mask: NodeId,
    lambda: NodeId,
) -> Result<NodeId> {
    let coil_imgs = tape.cmul_bcast(x, sens)?;
    let ksp = tape.fft_pair(coil_imgs)?;
    let masked = tape.mask_mul(ksp, mask)?;
    let back = tape.ifft_pair(masked)?;
    let combined = tape.cconj_mul_sum(sens, back)?;
    let reg = tape.bcast_mul(x, lambda)?;
    tape.add(combined, reg)
}

/// Zero-filled adjoint input: `sum_j conj(S_j) ifft(mask * b_j)`.
pub fn zero_filled_tape(
    tape: &mut Tape,
    b: NodeId,
    sens: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let masked = tape.mask_mul(b, mask)?;
    let imgs = tape.ifft_pair(masked)?;
    tape.cconj_mul_sum(sens, imgs)
}

/// Data-consistency solve: n_cg unrolled CG iterations from x0 = 0 on
/// `(A^H A + lambda I) x = A^H b + lambda z`.
pub fn data_consistency_tape(
    tape: &mut Tape,
    z: NodeId,
    b: NodeId,
    sens: NodeId,
    mask: NodeId,
    lambda: NodeId,
    n_cg: usize,
) -> Result<NodeId> {
    if tape.value(lambda).item() <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "lambda must be > 0, got {}",
            tape.value(lambda).item()
        )));
    }
    let zf = zero_filled_tape(tape, b, sens, mask)?;
    let lz = tape.bcast_mul(z, lambda)?;
    let rhs = tape.add(zf, lz)?;

    let shape = tape.value(rhs).shape().to_vec();
    let mut x = tape.constant(RTensor::zeros(&shape));
    // x0 = 0, so r0 = rhs
    let mut r = rhs;
    let mut p = rhs;
    let mut rz = tape.dot(r, r)?;
    for _ in 0..n_cg {
        // stop once the residual has collapsed to (sub)normal machine zero;
        // dividing by a denormal would overflow to inf
        if tape.value(rz).item() <= f64::MIN_POSITIVE {
            break;
        }
        let ap = normal_op(tape, p, sens, mask, lambda)?;
        let pap = tape.dot(p, ap)?;
        if tape.value(pap).item() <= f64::MIN_POSITIVE {
            break;
        }
        let inv_pap = tape.recip(pap);
        let alpha = tape.mul(rz, inv_pap)?;
        let step = tape.bcast_mul(p, alpha)?;
        x = tape.add(x, step)?;
        let rstep = tape.bcast_mul(ap, alpha)?;
        r = tape.sub(r, rstep)?;
        let rz_new = tape.dot(r, r)?;
        let inv_rz = tape.recip(rz);
        let beta = tape.mul(rz_new, inv_rz)?;
        let pb = tape.bcast_mul(p, beta)?;
        p = tape.add(r, pb)?;
        rz = rz_new;
    }
    Ok(x)
}

/// Full unrolled forward pass. Returns the K intermediate reconstructions
/// `[x^1 ... x^K]` (data-consistency outputs; the zero-filled x^0 is not
/// part of the loss).
pub fn modl_forward_tape(
    tape: &mut Tape,
    b: NodeId,
    sens: NodeId,
    mask: NodeId,
    leaves: &BTreeMap<String, NodeId>,
    cfg: &UnrollConfig,
) -> Result<Vec<NodeId>> {
    let rho = leaf(leaves, "dc.rho")?;
    let lambda = tape.exp(rho);
    let mut x = zero_filled_tape(tape, b, sens, mask)?;
    let mut outs = Vec::with_capacity(cfg.k_blocks);
    for _ in 0..cfg.k_blocks {
        let z = denoise_tape(tape, x, leaves)?;
        x = data_consistency_tape(tape, z, b, sens, mask, lambda, cfg.n_cg)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Training loss: `sum_k || x^k - x* ||_1`, where the L1 norm sums the
/// absolute values of real and imaginary parts separately.
pub fn training_loss_tape(
    tape: &mut Tape,
    xs: &[NodeId],
    label: NodeId,
) -> Result<NodeId> {
    if xs.is_empty() {
        return Err(Error::InvalidArg("training loss needs at least one reconstruction".into()));
    }
    let mut total: Option<NodeId> = None;
    for &x in xs {
        let diff = tape.sub(x, label)?;
        let term = tape.abs_sum(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Off-tape reconstruction of one sample with fixed parameters: builds a
/// constant-leaf tape, runs the unrolled forward, returns x^K.
pub fn modl_reconstruct(
    sample: &KSpaceSample,
    mask: &RTensor,
    params: &ParamStore,
    cfg: &UnrollConfig,
) -> Result<CTensor> {
    let mut tape = Tape::new();
    let leaves: BTreeMap<String, NodeId> = params
        .iter()
        .map(|(name, value)| (name.clone(), tape.constant(value.clone())))
        .collect();
    let b = tape.constant(sample.kspace.to_pair());
    let sens = tape.constant(sample.sens.maps().to_pair());
    let m = tape.constant(mask.clone());
    let outs = modl_forward_tape(&mut tape, b, sens, m, &leaves, cfg)?;
    CTensor::from_pair(tape.value(*outs.last().expect("K >= 1")))
}
