//! Gradient verification suites shared by the `gradcheck` CLI subcommand
//! and the acceptance tests.
//!
//! Three levels: single ops at 1e-7, the denoiser composite at 1e-5, and the
//! full pipeline (pattern logits through renormalization and masking into
//! the unrolled reconstruction and loss) at 1e-4. Finite differences cannot
//! probe a hard threshold, so the pipeline check runs the mask in its
//! relaxed form (mask = P', the exact Jacobian the straight-through
//! estimator assigns to the binarization); a separate exactness check
//! verifies that the tape's gradient through the binary forward equals the
//! gradient of the identity path for a linear readout, which is the
//! straight-through property itself.


use crate::autodiff::{gradcheck, GradCheckConfig, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::numerics::{fft2c, CTensor, RTensor, Rng};
use crate::recon::unrolled::{
    denoise_tape, init_model_params, modl_forward_tape, training_loss_tape, UnrollConfig,
};
use crate::sampling::{
    center_calib_mask, probability_map_tape, renormalize_tape, sample_binary_tape,
};

/// Name, measured max relative error, threshold.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn away_from_kinks(rng: &mut Rng, shape: &[usize]) -> RTensor {
    RTensor::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| {
                let v = rng.uniform() + 0.1;
                if rng.uniform() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect(),
    )
    .expect("shape/data agree")
}

/// Per-op gradient checks on random inputs away from non-smooth points.
pub fn ops_suite() -> Result<SuiteResult> {
    let mut rng = Rng::new(101);
    let mut params = ParamStore::new();
    params.insert("x", away_from_kinks(&mut rng, &[2, 6, 6]));
    params.insert("y", away_from_kinks(&mut rng, &[2, 6, 6]));
    params.insert("m", rng.uniform_tensor(&[6, 6]));
    params.insert("s", RTensor::scalar(0.8));
    params.insert("coils", rng.uniform_tensor(&[3, 2, 6, 6]));
    params.insert("cw", away_from_kinks(&mut rng, &[3, 2, 3, 3]));
    params.insert("cb", away_from_kinks(&mut rng, &[3]));
    params.insert("ing", away_from_kinks(&mut rng, &[2]));
    params.insert("inb", away_from_kinks(&mut rng, &[2]));
    let probe2 = rng.uniform_tensor(&[2, 6, 6]);
    let probe_coils = rng.uniform_tensor(&[3, 2, 6, 6]);
    let probe_conv = rng.uniform_tensor(&[3, 6, 6]);

    type Build = Box<dyn Fn(&mut Tape, &std::collections::BTreeMap<String, crate::autodiff::NodeId>) -> Result<crate::autodiff::NodeId>>;
    let probe2c = probe2.clone();
    let cases: Vec<(&str, Build)> = vec![
        ("add", {
            let p = probe2.clone();
            Box::new(move |t, ids| {
                let o = t.add(ids["x"], ids["y"])?;
                let c = t.constant(p.clone());
                let m = t.mul(o, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("sub+mul", {
            let p = probe2.clone();
            Box::new(move |t, ids| {
                let d = t.sub(ids["x"], ids["y"])?;
                let o = t.mul(d, ids["x"])?;
                let c = t.constant(p.clone());
                let m = t.mul(o, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("affine+exp+recip", {
            Box::new(move |t, ids| {
                let a = t.affine(ids["x"], 0.3, 1.7);
                let e = t.exp(a);
                let r = t.recip(e);
                Ok(t.sum_reduce(r))
            })
        }),
        ("relu+sigmoid+abs", {
            Box::new(move |t, ids| {
                let r = t.relu(ids["x"]);
                let s = t.sigmoid(ids["y"]);
                let m = t.mul(r, s)?;
                Ok(t.abs_sum(m))
            })
        }),
        ("dot+bcast", {
            Box::new(move |t, ids| {
                let b = t.bcast_mul(ids["x"], ids["s"])?;
                t.dot(b, ids["y"])
            })
        }),
        ("mask_mul", {
            let p = probe2.clone();
            Box::new(move |t, ids| {
                let o = t.mask_mul(ids["x"], ids["m"])?;
                let c = t.constant(p.clone());
                let m = t.mul(o, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("fft+ifft", {
            let p = probe2c.clone();
            Box::new(move |t, ids| {
                let k = t.fft_pair(ids["x"])?;
                let b = t.ifft_pair(k)?;
                let k2 = t.fft_pair(b)?;
                let c = t.constant(p.clone());
                let m = t.mul(k2, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("complex mul/conj-sum", {
            let pc = probe_coils.clone();
            Box::new(move |t, ids| {
                let per_coil = t.cmul_bcast(ids["x"], ids["coils"])?;
                let c = t.constant(pc.clone());
                let probed = t.mul(per_coil, c)?;
                let s1 = t.sum_reduce(probed);
                let comb = t.cconj_mul_sum(ids["coils"], per_coil)?;
                let s2 = t.abs_sum(comb);
                t.add(s1, s2)
            })
        }),
        ("conv2d", {
            let p = probe_conv.clone();
            Box::new(move |t, ids| {
                let y = t.conv2d(ids["x"], ids["cw"], ids["cb"])?;
                let c = t.constant(p.clone());
                let m = t.mul(y, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("instance_norm", {
            let p = probe2.clone();
            Box::new(move |t, ids| {
                let y = t.instance_norm(ids["x"], ids["ing"], ids["inb"], 1e-5)?;
                let c = t.constant(p.clone());
                let m = t.mul(y, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
        ("concat+slice", {
            let p = probe2.clone();
            Box::new(move |t, ids| {
                let cat = t.concat_ch(ids["x"], ids["y"])?;
                let sl = t.slice_ch(cat, 1, 2)?;
                let c = t.constant(p.clone());
                let m = t.mul(sl, c)?;
                Ok(t.sum_reduce(m))
            })
        }),
    ];

    let mut worst = 0.0f64;
    for (name, build) in &cases {
        let err = gradcheck(build.as_ref(), &params, &GradCheckConfig::default())
            .map_err(|e| Error::InvalidArg(format!("ops suite {name}: {e}")))?;
        if err > worst {
            worst = err;
        }
    }
    Ok(SuiteResult {
        name: "per-op",
        max_rel_err: worst,
        threshold: 1e-7,
    })
}

/// Denoiser composite (5 convs + instance norm + ReLU + skip) through L1.
pub fn denoiser_suite() -> Result<SuiteResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(102);
    init_model_params(&mut store, &mut rng, 4);
    let input = rng.uniform_tensor(&[2, 8, 8]);
    let err = gradcheck(
        |tape, ids| {
            let x = tape.constant(input.clone());
            let y = denoise_tape(tape, x, ids)?;
            Ok(tape.abs_sum(y))
        },
        &store,
        &GradCheckConfig::default(),
    )?;
    Ok(SuiteResult {
        name: "denoiser",
        max_rel_err: err,
        threshold: 1e-5,
    })
}

fn pipeline_fixture() -> (ParamStore, RTensor, RTensor, RTensor, RTensor) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(103);
    init_model_params(&mut store, &mut rng, 4);
    store.insert("pattern.w", rng.uniform_tensor(&[16, 16]));

    let mut rng_data = Rng::new(104);
    let phantom = crate::mri::simulate_phantom(&mut rng_data, 16, 16).expect("phantom");
    let sens = crate::mri::simulate_coils(&mut rng_data, 16, 16, 2).expect("coils");
    let mut kspace = CTensor::zeros(&[2, 16, 16]);
    for j in 0..2 {
        let weighted = CTensor::from_vec(
            &[16, 16],
            phantom
                .data()
                .iter()
                .zip(sens.maps().block(j))
                .map(|(x, s)| x * s)
                .collect(),
        )
        .expect("shape");
        kspace
            .block_mut(j)
            .copy_from_slice(fft2c(&weighted).expect("fft").data());
    }
    let ones = RTensor::full(&[16, 16], 1.0);
    let label = crate::mri::sense_adjoint(&kspace, &sens, &ones).expect("label");
    let z = rng_data.uniform_tensor(&[16, 16]);
    (store, kspace.to_pair(), sens.maps().to_pair(), label.to_pair(), z)
}

/// Full pipeline at 16x16, two coils, K = 2, n_cg = 5, frozen z: finite
/// differences against the tape over denoiser weights, rho, and the pattern
/// logits, with the mask in its relaxed (identity-Jacobian) form.
pub fn pipeline_suite() -> Result<SuiteResult> {
    let (store, b_pair, sens_pair, label_pair, _z) = pipeline_fixture();
    let calib = center_calib_mask(16, 16, 2, 2)?;
    let unroll = UnrollConfig::new(2, 5, 4)?;
    let err = gradcheck(
        |tape, ids| {
            let b = tape.constant(b_pair.clone());
            let sens = tape.constant(sens_pair.clone());
            let label = tape.constant(label_pair.clone());
            let p = probability_map_tape(tape, ids["pattern.w"], 0.25);
            let pp = renormalize_tape(tape, p, 0.25, &calib)?;
            let outs = modl_forward_tape(tape, b, sens, pp, ids, &unroll)?;
            training_loss_tape(tape, &outs, label)
        },
        &store,
        &GradCheckConfig::default(),
    )?;
    Ok(SuiteResult {
        name: "pipeline",
        max_rel_err: err,
        threshold: 1e-4,
    })
}

/// Straight-through exactness: with frozen z and a linear readout, the tape
/// gradient through the binary forward equals the gradient of the identity
/// path, coordinate for coordinate. Returns the max absolute discrepancy
/// (exact equality expected).
pub fn st_exactness() -> Result<SuiteResult> {
    let (store, _, _, _, z) = pipeline_fixture();
    let calib = center_calib_mask(16, 16, 2, 2)?;
    let mut rng = Rng::new(105);
    let readout = rng.uniform_tensor(&[16, 16]);

    let grad_w = |binary: bool| -> Result<RTensor> {
        let mut tape = Tape::new();
        let ids = store.register_all(&mut tape);
        let p = probability_map_tape(&mut tape, ids["pattern.w"], 0.25);
        let pp = renormalize_tape(&mut tape, p, 0.25, &calib)?;
        let mask = if binary {
            let u = sample_binary_tape(&mut tape, pp, &z)?;
            if !tape.value(u).data().iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::InvalidArg("mask not binary".into()));
            }
            u
        } else {
            pp
        };
        let c = tape.constant(readout.clone());
        let probed = tape.mul(mask, c)?;
        let loss = tape.sum_reduce(probed);
        let grads = tape.backward(loss)?;
        Ok(grads
            .get(ids["pattern.w"])
            .cloned()
            .unwrap_or_else(|| RTensor::zeros(&[16, 16])))
    };

    let g_bin = grad_w(true)?;
    let g_rel = grad_w(false)?;
    let max_diff = g_bin
        .data()
        .iter()
        .zip(g_rel.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SuiteResult {
        name: "st-exactness",
        max_rel_err: max_diff,
        threshold: 1e-15,
    })
}

/// Runs every suite in order.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        ops_suite()?,
        denoiser_suite()?,
        pipeline_suite()?,
        st_exactness()?,
    ])
}
