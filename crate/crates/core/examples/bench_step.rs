//! Rough per-component timing of one training step at desk scale.
use std::collections::BTreeMap;
use std::time::Instant;

use kspace_loupe::autodiff::{ParamStore, Tape};
use kspace_loupe::mri::read_sample;
use kspace_loupe::numerics::{RTensor, Rng};
use kspace_loupe::recon::unrolled::*;
use kspace_loupe::sampling::*;

fn main() {
    let sample = read_sample(std::path::Path::new("/tmp/bench/data/train/0000.ksd")).unwrap();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    init_model_params(&mut store, &mut rng, 16);
    store.insert("pattern.w", init_logits(&mut rng, 64, 64));
    let calib = center_calib_mask(64, 64, 8, 8).unwrap();
    let unroll = UnrollConfig::new(5, 10, 16).unwrap();
    let z = rng.uniform_tensor(&[64, 64]);

    let t0 = Instant::now();
    let mut tape = Tape::new();
    let leaves: BTreeMap<_, _> = store.register_all(&mut tape);
    let b = tape.constant(sample.kspace.to_pair());
    let sens = tape.constant(sample.sens.maps().to_pair());
    let label = tape.constant(sample.label.to_pair());
    let p = probability_map_tape(&mut tape, leaves["pattern.w"], 0.25);
    let pp = renormalize_tape(&mut tape, p, 0.1, &calib).unwrap();
    let mask = sample_binary_tape(&mut tape, pp, &z).unwrap();
    let outs = modl_forward_tape(&mut tape, b, sens, mask, &leaves, &unroll).unwrap();
    let loss = training_loss_tape(&mut tape, &outs, label).unwrap();
    let t_fwd = t0.elapsed();
    println!("forward: {:?}  ({} nodes)", t_fwd, tape.len());

    let t1 = Instant::now();
    let grads = tape.backward(loss).unwrap();
    println!("backward: {:?}", t1.elapsed());
    let _ = grads.get(leaves["pattern.w"]);

    let t2 = Instant::now();
    let mut tape2 = Tape::new();
    let leaves2: BTreeMap<_, _> = store.register_all(&mut tape2);
    let x = tape2.constant(rng.uniform_tensor(&[2, 64, 64]));
    for _ in 0..5 {
        let _ = denoise_tape(&mut tape2, x, &leaves2).unwrap();
    }
    println!("5x denoiser fwd: {:?}", t2.elapsed());

    // micro: individual op timings on [4,2,64,64]
    {
        use kspace_loupe::numerics::fft2c_planar_batched;
        let big = rng.uniform_tensor(&[4, 2, 64, 64]);
        let t = Instant::now();
        for _ in 0..100 {
            let _ = fft2c_planar_batched(&big, false).unwrap();
        }
        println!("fft_planar [4,2,64,64] x100: {:?}", t.elapsed());

        let mut tape = Tape::new();
        let a = tape.constant(big.clone());
        let img = tape.constant(rng.uniform_tensor(&[2, 64, 64]));
        let m = tape.constant(rng.uniform_tensor(&[64, 64]));
        let t = Instant::now();
        for _ in 0..100 {
            let _ = tape.cmul_bcast(img, a).unwrap();
        }
        println!("cmul_bcast x100: {:?}", t.elapsed());
        let t = Instant::now();
        for _ in 0..100 {
            let _ = tape.mask_mul(a, m).unwrap();
        }
        println!("mask_mul x100: {:?}", t.elapsed());
        let t = Instant::now();
        for _ in 0..100 {
            let _ = tape.cconj_mul_sum(a, a).unwrap();
        }
        println!("cconj_mul_sum x100: {:?}", t.elapsed());
        let t = Instant::now();
        for _ in 0..100 {
            let _ = tape.dot(a, a).unwrap();
        }
        println!("dot x100: {:?}", t.elapsed());
        let t = Instant::now();
        for _ in 0..100 {
            let _ = tape.fft_pair(a).unwrap();
        }
        println!("tape fft_pair x100: {:?}", t.elapsed());
    }

    let t3 = Instant::now();
    let mut tape3 = Tape::new();
    let b3 = tape3.constant(sample.kspace.to_pair());
    let sens3 = tape3.constant(sample.sens.maps().to_pair());
    let m3 = tape3.constant(z.map(|v| (v < 0.1) as u8 as f64));
    let z3 = tape3.constant(rng.uniform_tensor(&[2, 64, 64]));
    let lam = tape3.constant(RTensor::scalar(1.0));
    for _ in 0..5 {
        let _ = data_consistency_tape(&mut tape3, z3, b3, sens3, m3, lam, 10).unwrap();
    }
    println!("5x dc fwd (10 cg): {:?}", t3.elapsed());
}

#[allow(dead_code)]
fn extra() {}
