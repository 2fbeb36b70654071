use std::collections::BTreeMap;

use super::*;
use crate::autodiff::gradcheck::GradCheckConfig;
use crate::numerics::Rng;

fn store_with(entries: &[(&str, RTensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(*name, t.clone());
    }
    s
}

/// Random tensor kept away from relu/abs kinks: |v| in (0.1, 1.1).
fn random_away_from_kinks(rng: &mut Rng, shape: &[usize]) -> RTensor {
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
    .unwrap()
}

fn check<F>(build: F, params: &ParamStore, tol: f64)
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> crate::Result<NodeId>,
{
    let err = gradcheck(build, params, &GradCheckConfig::default()).unwrap();
    assert!(err < tol, "gradcheck max rel err {err} >= {tol}");
}

#[test]
fn add_zero_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::from_vec(&[3], vec![1.0, -2.0, 3.5]).unwrap());
    let z = tape.constant(RTensor::zeros(&[3]));
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn relu_negative_clamps_and_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::scalar(-1.0));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).item(), 0.0);
    let loss = tape.sum_reduce(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.0);
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let loss = tape.sum_reduce(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn squared_sum_gradient_is_2x() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let xx = tape.mul(x, x).unwrap();
    let loss = tape.sum_reduce(xx);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(crate::Error::NotScalar(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut tape = Tape::new();
    let a = tape.leaf(RTensor::zeros(&[2]));
    let b = tape.leaf(RTensor::zeros(&[3]));
    let err = tape.add(a, b).unwrap_err();
    assert!(err.to_string().contains("add"), "{err}");
}

#[test]
fn abs_sum_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
    let loss = tape.abs_sum(x);
    assert_eq!(tape.value(loss).item(), 5.0);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(RTensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let unused = tape.leaf(RTensor::from_vec(&[4], vec![0.0; 4]).unwrap());
    let loss = tape.sum_reduce(x);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
}

#[test]
fn quadratic_form_gradcheck_tight() {
    // f(x) = sum(x * x) + sum(c * x): analytic gradient known, FD nearly exact
    let mut rng = Rng::new(21);
    let params = store_with(&[("x", rng.uniform_tensor(&[5, 5]))]);
    let c = rng.uniform_tensor(&[5, 5]);
    let err = gradcheck(
        |tape, ids| {
            let x = ids["x"];
            let cc = tape.constant(c.clone());
            let xx = tape.mul(x, x)?;
            let cx = tape.mul(cc, x)?;
            let s = tape.add(xx, cx)?;
            Ok(tape.sum_reduce(s))
        },
        &params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(err < 1e-8, "quadratic gradcheck err {err}");
}

#[test]
fn per_op_gradchecks_pass_tight_tolerance() {
    let mut rng = Rng::new(33);
    let x0 = random_away_from_kinks(&mut rng, &[2, 6, 6]);
    let y0 = random_away_from_kinks(&mut rng, &[2, 6, 6]);
    let probe = rng.uniform_tensor(&[2, 6, 6]);
    let params = store_with(&[("x", x0), ("y", y0)]);

    // linear probe after each op gives a nontrivial cotangent
    let with_probe = |tape: &mut Tape, out: NodeId, p: &RTensor| -> crate::Result<NodeId> {
        let c = tape.constant(p.clone());
        let m = tape.mul(out, c)?;
        Ok(tape.sum_reduce(m))
    };

    type BuildFn = Box<dyn Fn(&mut Tape, NodeId, NodeId) -> crate::Result<NodeId>>;
    let ops: Vec<(&str, BuildFn)> = vec![
        ("add", Box::new(|t: &mut Tape, x, y| t.add(x, y))),
        ("sub", Box::new(|t: &mut Tape, x, y| t.sub(x, y))),
        ("mul", Box::new(|t: &mut Tape, x, y| t.mul(x, y))),
        ("affine", Box::new(|t: &mut Tape, x, _| Ok(t.affine(x, -1.7, 0.3)))),
        ("exp", Box::new(|t: &mut Tape, x, _| Ok(t.exp(x)))),
        ("recip", Box::new(|t: &mut Tape, x, _| Ok(t.recip(x)))),
        ("relu", Box::new(|t: &mut Tape, x, _| Ok(t.relu(x)))),
        ("sigmoid", Box::new(|t: &mut Tape, x, _| Ok(t.sigmoid(x)))),
        ("cmul", Box::new(|t: &mut Tape, x, y| t.cmul(x, y))),
        ("fft", Box::new(|t: &mut Tape, x, _| t.fft_pair(x))),
        ("ifft", Box::new(|t: &mut Tape, x, _| t.ifft_pair(x))),
        ("concat+slice", Box::new(|t: &mut Tape, x, y| {
            let cat = t.concat_ch(x, y)?;
            t.slice_ch(cat, 1, 2)
        })),
    ];
    for (name, op) in &ops {
        let err = gradcheck(
            |tape, ids| {
                let out = op(tape, ids["x"], ids["y"])?;
                with_probe(tape, out, &probe)
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(err < 1e-7, "{name} gradcheck err {err}");
    }
}

#[test]
fn reduction_and_scalar_op_gradchecks() {
    let mut rng = Rng::new(35);
    let params = store_with(&[
        ("x", random_away_from_kinks(&mut rng, &[4, 4])),
        ("y", random_away_from_kinks(&mut rng, &[4, 4])),
        ("s", RTensor::scalar(0.7)),
    ]);
    check(
        |tape, ids| tape.dot(ids["x"], ids["y"]),
        &params,
        1e-7,
    );
    check(
        |tape, ids| Ok(tape.abs_sum(ids["x"])),
        &params,
        1e-7,
    );
    check(
        |tape, ids| {
            let b = tape.bcast_mul(ids["x"], ids["s"])?;
            tape.dot(b, ids["y"])
        },
        &params,
        1e-7,
    );
}

#[test]
fn mask_mul_gradcheck_both_sides() {
    let mut rng = Rng::new(36);
    let params = store_with(&[
        ("x", rng.uniform_tensor(&[3, 2, 5, 5])),
        ("m", rng.uniform_tensor(&[5, 5])),
    ]);
    let probe = rng.uniform_tensor(&[3, 2, 5, 5]);
    check(
        |tape, ids| {
            let y = tape.mask_mul(ids["x"], ids["m"])?;
            let c = tape.constant(probe.clone());
            let p = tape.mul(y, c)?;
            Ok(tape.sum_reduce(p))
        },
        &params,
        1e-7,
    );
}

#[test]
fn coil_op_gradchecks() {
    let mut rng = Rng::new(37);
    let params = store_with(&[
        ("img", rng.uniform_tensor(&[2, 4, 4])),
        ("coils", rng.uniform_tensor(&[3, 2, 4, 4])),
        ("y", rng.uniform_tensor(&[3, 2, 4, 4])),
    ]);
    let probe4 = rng.uniform_tensor(&[3, 2, 4, 4]);
    let probe3 = rng.uniform_tensor(&[2, 4, 4]);
    check(
        |tape, ids| {
            let out = tape.cmul_bcast(ids["img"], ids["coils"])?;
            let c = tape.constant(probe4.clone());
            let p = tape.mul(out, c)?;
            Ok(tape.sum_reduce(p))
        },
        &params,
        1e-7,
    );
    check(
        |tape, ids| {
            let out = tape.cconj_mul_sum(ids["coils"], ids["y"])?;
            let c = tape.constant(probe3.clone());
            let p = tape.mul(out, c)?;
            Ok(tape.sum_reduce(p))
        },
        &params,
        1e-7,
    );
}

#[test]
fn conv_and_instance_norm_gradchecks() {
    let mut rng = Rng::new(38);
    let params = store_with(&[
        ("x", random_away_from_kinks(&mut rng, &[2, 5, 5])),
        ("w", random_away_from_kinks(&mut rng, &[3, 2, 3, 3])),
        ("b", random_away_from_kinks(&mut rng, &[3])),
        ("g", random_away_from_kinks(&mut rng, &[2])),
        ("beta", random_away_from_kinks(&mut rng, &[2])),
    ]);
    let probe = rng.uniform_tensor(&[3, 5, 5]);
    check(
        |tape, ids| {
            let y = tape.conv2d(ids["x"], ids["w"], ids["b"])?;
            let c = tape.constant(probe.clone());
            let p = tape.mul(y, c)?;
            Ok(tape.sum_reduce(p))
        },
        &params,
        1e-7,
    );
    let probe_in = rng.uniform_tensor(&[2, 5, 5]);
    check(
        |tape, ids| {
            let y = tape.instance_norm(ids["x"], ids["g"], ids["beta"], 1e-5)?;
            let c = tape.constant(probe_in.clone());
            let p = tape.mul(y, c)?;
            Ok(tape.sum_reduce(p))
        },
        &params,
        1e-7,
    );
}

#[test]
fn st_binarize_gradient_equals_identity_path() {
    // With a linear readout, the tape gradient through the binary forward
    // must equal the gradient of the same readout applied to p directly.
    let mut rng = Rng::new(39);
    let p0 = rng.uniform_tensor(&[8, 8]);
    let z = rng.uniform_tensor(&[8, 8]);
    let c = rng.uniform_tensor(&[8, 8]);
    let params = store_with(&[("w", rng.uniform_tensor(&[8, 8]))]);

    let grad_of = |binary: bool| -> RTensor {
        let mut tape = Tape::new();
        let ids = params.register_all(&mut tape);
        let scaled = tape.affine(ids["w"], 0.5, 0.0);
        let p_base = tape.constant(p0.clone());
        let p = tape.add(scaled, p_base).unwrap();
        let p = tape.sigmoid(p);
        let u = if binary {
            tape.st_binarize(p, &z).unwrap()
        } else {
            p
        };
        let cc = tape.constant(c.clone());
        let m = tape.mul(u, cc).unwrap();
        let loss = tape.sum_reduce(m);
        if binary {
            // forward must be exactly {0,1}
            assert!(tape.value(u).data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let grads = tape.backward(loss).unwrap();
        grads.get(ids["w"]).unwrap().clone()
    };

    assert_eq!(grad_of(true), grad_of(false));
}

#[test]
fn fft_backward_is_inverse_on_cotangents() {
    // backward(fft) followed by forward(ifft) must return the original
    // cotangent: both are the same unitary map.
    let mut rng = Rng::new(40);
    let v = rng.uniform_tensor(&[2, 8, 8]);

    let mut tape = Tape::new();
    let x = tape.leaf(v.clone());
    let k = tape.fft_pair(x).unwrap();
    let c = rng.uniform_tensor(&[2, 8, 8]);
    let cc = tape.constant(c.clone());
    let probe = tape.mul(k, cc).unwrap();
    let loss = tape.sum_reduce(probe);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();

    // gx = ifft(c); applying forward fft must reproduce c
    let back = crate::numerics::fft2c_planar_batched(gx, false).unwrap();
    let num: f64 = back
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(num / c.norm2() < 1e-12);
}

#[test]
fn instance_norm_is_shift_invariant() {
    let mut rng = Rng::new(41);
    let x = rng.uniform_tensor(&[2, 6, 6]);
    let gain = RTensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
    let bias = RTensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();

    let run = |input: &RTensor| -> (RTensor, RTensor) {
        let mut tape = Tape::new();
        let xi = tape.leaf(input.clone());
        let g = tape.constant(gain.clone());
        let b = tape.constant(bias.clone());
        let y = tape.instance_norm(xi, g, b, 1e-5).unwrap();
        let loss = tape.sum_reduce(y);
        let grads = tape.backward(loss).unwrap();
        (tape.value(y).clone(), grads.get(xi).unwrap().clone())
    };

    let (y0, g0) = run(&x);
    let shifted = x.map(|v| v + 3.25);
    let (y1, _) = run(&shifted);
    // adding a constant per channel leaves the output unchanged
    for (a, b) in y0.data().iter().zip(y1.data()) {
        assert!((a - b).abs() < 1e-10);
    }
    // and the backward of a constant shift direction is zero:
    // <grad, 1> per channel vanishes
    for c in 0..2 {
        let s: f64 = g0.data()[c * 36..(c + 1) * 36].iter().sum();
        assert!(s.abs() < 1e-10, "channel {c} shift response {s}");
    }
}

#[test]
fn composite_program_matches_finite_differences() {
    // a small net: conv -> instance norm -> relu -> conv -> L1
    let mut rng = Rng::new(42);
    let params = store_with(&[
        ("w0", random_away_from_kinks(&mut rng, &[3, 2, 3, 3])),
        ("b0", random_away_from_kinks(&mut rng, &[3])),
        ("g0", random_away_from_kinks(&mut rng, &[3])),
        ("be0", random_away_from_kinks(&mut rng, &[3])),
        ("w1", random_away_from_kinks(&mut rng, &[2, 3, 3, 3])),
        ("b1", random_away_from_kinks(&mut rng, &[2])),
    ]);
    let input = random_away_from_kinks(&mut rng, &[2, 6, 6]);
    check(
        |tape, ids| {
            let x = tape.constant(input.clone());
            let h = tape.conv2d(x, ids["w0"], ids["b0"])?;
            let h = tape.instance_norm(h, ids["g0"], ids["be0"], 1e-5)?;
            let h = tape.relu(h);
            let h = tape.conv2d(h, ids["w1"], ids["b1"])?;
            Ok(tape.abs_sum(h))
        },
        &params,
        1e-5,
    );
}
