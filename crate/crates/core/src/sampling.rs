//! Differentiable under-sampling pattern generation.
//!
//! The probabilistic pattern is `P = sigmoid(a * w)` over trainable logits
//! `w`, renormalized so its overall mean (a fully sampled calibration block
//! included) equals the budget `gamma`. During training the binary mask is
//! drawn as `u = 1_{z < P'}` with a fresh `z` per forward pass; the
//! straight-through estimator treats the threshold as identity on the
//! backward pass. The approximate-sampling baseline replaces the threshold
//! with `sigmoid(b * (P' - z))`. Deterministic evaluation uses the top-gamma
//! fraction of `P'`; a hand-crafted variable-density pattern with a
//! polynomial radial profile serves as the non-learned baseline.

use std::path::Path;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::numerics::{RTensor, Rng};

/// Strict {0,1} mask over k-space locations.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(RTensor);

impl BinaryMask {
    pub fn new(t: RTensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "BinaryMask::new",
                detail: format!("expected [H, W], got {:?}", t.shape()),
            });
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArg(
                "mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(RTensor::zeros(&[h, w]))
    }

    pub fn tensor(&self) -> &RTensor {
        &self.0
    }

    pub fn into_tensor(self) -> RTensor {
        self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }
}

/// Trainable pattern parameters: logits, sigmoid slope, sampling budget, and
/// the fully sampled calibration region.
#[derive(Debug, Clone)]
pub struct PatternParams {
    pub logits: RTensor,
    pub slope_a: f64,
    pub gamma: f64,
    pub calib: BinaryMask,
}

impl PatternParams {
    pub fn new(logits: RTensor, slope_a: f64, gamma: f64, calib: BinaryMask) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::Shape {
                op: "PatternParams::new",
                detail: format!("logits must be [H, W], got {:?}", logits.shape()),
            });
        }
        if calib.tensor().shape() != logits.shape() {
            return Err(Error::Shape {
                op: "PatternParams::new",
                detail: format!(
                    "calib {:?} vs logits {:?}",
                    calib.tensor().shape(),
                    logits.shape()
                ),
            });
        }
        if slope_a <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "slope a must be > 0, got {slope_a}"
            )));
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::InvalidArg(format!(
                "gamma must be in (0,1), got {gamma}"
            )));
        }
        if calib.mean() >= gamma {
            return Err(Error::BudgetExceeded(format!(
                "calibration fraction {} >= gamma {gamma}",
                calib.mean()
            )));
        }
        Ok(Self {
            logits,
            slope_a,
            gamma,
            calib,
        })
    }

    /// Renormalized probability map computed off-tape.
    pub fn prob_map(&self) -> Result<RTensor> {
        let mut tape = Tape::new();
        let w = tape.constant(self.logits.clone());
        let p = probability_map_tape(&mut tape, w, self.slope_a);
        let pp = renormalize_tape(&mut tape, p, self.gamma, &self.calib)?;
        Ok(tape.value(pp).clone())
    }
}

/// Logits initialization: iid uniform in [-1, 1].
pub fn init_logits(rng: &mut Rng, h: usize, w: usize) -> RTensor {
    RTensor::from_vec(
        &[h, w],
        (0..h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    )
    .expect("shape/data agree")
}

/// Centered `ch x cw` calibration block (fully sampled k-space center).
pub fn center_calib_mask(h: usize, w: usize, ch: usize, cw: usize) -> Result<BinaryMask> {
    if ch > h || cw > w {
        return Err(Error::InvalidArg(format!(
            "calibration {ch}x{cw} exceeds grid {h}x{w}"
        )));
    }
    let r0 = h / 2 - ch / 2;
    let c0 = w / 2 - cw / 2;
    let mut t = RTensor::zeros(&[h, w]);
    for r in r0..r0 + ch {
        for c in c0..c0 + cw {
            t.set2(r, c, 1.0);
        }
    }
    BinaryMask::new(t)
}

/// P = sigmoid(a * w), recorded on the tape.
pub fn probability_map_tape(tape: &mut Tape, logits: NodeId, slope_a: f64) -> NodeId {
    let scaled = tape.affine(logits, slope_a, 0.0);
    tape.sigmoid(scaled)
}

/// Linear rescaling of P so the overall mean equals `gamma`, with the
/// calibration entries forced to 1.
///
/// Let M be the required non-calibration mean, `M = (gamma*HW - #calib) /
/// (HW - #calib)`. If the current non-calibration mean exceeds M the map is
/// scaled down, `P' = P * M / mean`; otherwise its complement is scaled,
/// `P' = 1 - (1-P) * (1-M) / (1-mean)`. Both branches keep values in [0, 1]
/// and are differentiable; the branch choice depends on values only.
pub fn renormalize_tape(
    tape: &mut Tape,
    p: NodeId,
    gamma: f64,
    calib: &BinaryMask,
) -> Result<NodeId> {
    let shape = tape.value(p).shape().to_vec();
    if calib.tensor().shape() != shape {
        return Err(Error::Shape {
            op: "renormalize",
            detail: format!("P {:?} vs calib {:?}", shape, calib.tensor().shape()),
        });
    }
    let hw = shape.iter().product::<usize>();
    let n_calib = calib.count_ones();
    let n_free = hw - n_calib;
    if n_free == 0 {
        return Err(Error::BudgetExceeded("no non-calibration entries".into()));
    }
    let m_target = (gamma * hw as f64 - n_calib as f64) / n_free as f64;
    if m_target <= 0.0 {
        return Err(Error::BudgetExceeded(format!(
            "required non-calibration mean {m_target} <= 0 (gamma {gamma}, calib {n_calib}/{hw})"
        )));
    }

    let anti = calib.tensor().map(|v| 1.0 - v);
    let anti_node = tape.constant(anti);
    let p_free = tape.mask_mul(p, anti_node)?;
    let sum_free = tape.sum_reduce(p_free);
    let mean_free = tape.affine(sum_free, 1.0 / n_free as f64, 0.0);
    let mean_val = tape.value(mean_free).item();

    let p_scaled = if mean_val >= m_target {
        let inv_mean = tape.recip(mean_free);
        let scale = tape.affine(inv_mean, m_target, 0.0);
        tape.bcast_mul(p, scale)?
    } else {
        let one_minus_p = tape.affine(p, -1.0, 1.0);
        let one_minus_mean = tape.affine(mean_free, -1.0, 1.0);
        let inv = tape.recip(one_minus_mean);
        let scale = tape.affine(inv, 1.0 - m_target, 0.0);
        let scaled = tape.bcast_mul(one_minus_p, scale)?;
        tape.affine(scaled, -1.0, 1.0)
    };
    let masked = tape.mask_mul(p_scaled, anti_node)?;
    let calib_node = tape.constant(calib.tensor().clone());
    tape.add(masked, calib_node)
}

/// Binary pattern with straight-through backward: forward draws
/// `u = 1_{z < P'}`; the backward Jacobian w.r.t. P' is the identity.
pub fn sample_binary_tape(tape: &mut Tape, p_renorm: NodeId, z: &RTensor) -> Result<NodeId> {
    tape.st_binarize(p_renorm, z)
}

/// One off-tape Bernoulli draw from a probability map.
pub fn sample_binary(p_renorm: &RTensor, rng: &mut Rng) -> Result<BinaryMask> {
    let z = rng.uniform_tensor(p_renorm.shape());
    let data = p_renorm
        .data()
        .iter()
        .zip(z.data())
        .map(|(&p, &zv)| if zv < p { 1.0 } else { 0.0 })
        .collect();
    BinaryMask::new(RTensor::from_vec(p_renorm.shape(), data)?)
}

/// Approximate-sampling relaxation: `sigmoid(b * (P' - z))`.
pub fn sample_approx_tape(
    tape: &mut Tape,
    p_renorm: NodeId,
    z: &RTensor,
    b_slope: f64,
) -> Result<NodeId> {
    let z_node = tape.constant(z.clone());
    let diff = tape.sub(p_renorm, z_node)?;
    let scaled = tape.affine(diff, b_slope, 0.0);
    Ok(tape.sigmoid(scaled))
}

/// Off-tape version of [`sample_approx_tape`].
pub fn sample_approx(p_renorm: &RTensor, z: &RTensor, b_slope: f64) -> Result<RTensor> {
    if p_renorm.shape() != z.shape() {
        return Err(Error::Shape {
            op: "sample_approx",
            detail: format!("P {:?} vs z {:?}", p_renorm.shape(), z.shape()),
        });
    }
    let data = p_renorm
        .data()
        .iter()
        .zip(z.data())
        .map(|(&p, &zv)| 1.0 / (1.0 + (-b_slope * (p - zv)).exp()))
        .collect();
    RTensor::from_vec(p_renorm.shape(), data)
}

/// Deterministic pattern: calibration entries plus the largest P' values
/// among the rest, `floor(gamma*H*W)` ones in total. Ties break toward the
/// smaller row-major index.
pub fn topk_pattern(p_renorm: &RTensor, gamma: f64, calib: &BinaryMask) -> Result<BinaryMask> {
    if p_renorm.shape() != calib.tensor().shape() {
        return Err(Error::Shape {
            op: "topk_pattern",
            detail: format!(
                "P {:?} vs calib {:?}",
                p_renorm.shape(),
                calib.tensor().shape()
            ),
        });
    }
    let hw = p_renorm.len();
    let budget = (gamma * hw as f64).floor() as usize;
    let n_calib = calib.count_ones();
    if budget < n_calib {
        return Err(Error::BudgetExceeded(format!(
            "budget {budget} < calibration size {n_calib}"
        )));
    }
    let mut order: Vec<usize> = (0..hw)
        .filter(|&i| calib.tensor().data()[i] == 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        p_renorm.data()[b]
            .partial_cmp(&p_renorm.data()[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let mut data = calib.tensor().data().to_vec();
    for &i in order.iter().take(budget - n_calib) {
        data[i] = 1.0;
    }
    BinaryMask::new(RTensor::from_vec(p_renorm.shape(), data)?)
}

/// Variable-density probability map: `p(r) = c * (1 - r/r_max)^d` on
/// non-calibration entries, clipped to [0, 1], with `c` found by bisection
/// so the overall expected mean (calibration included) equals `gamma`.
pub fn vd_prob_map(h: usize, w: usize, gamma: f64, d: f64, calib: &BinaryMask) -> Result<RTensor> {
    if d < 0.0 {
        return Err(Error::InvalidArg(format!(
            "exponent d must be >= 0, got {d}"
        )));
    }
    if calib.tensor().shape() != [h, w] {
        return Err(Error::Shape {
            op: "vd_prob_map",
            detail: format!("calib {:?} vs [{h}, {w}]", calib.tensor().shape()),
        });
    }
    let hw = h * w;
    let n_calib = calib.count_ones();
    if gamma * (hw as f64) < n_calib as f64 {
        return Err(Error::BudgetExceeded(format!(
            "gamma {gamma} below calibration fraction {}",
            n_calib as f64 / hw as f64
        )));
    }
    let (cr, cc) = (h / 2, w / 2);
    let mut r_max = 0.0f64;
    let mut radial = vec![0.0f64; hw];
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cr as f64;
            let dc = c as f64 - cc as f64;
            let dist = (dr * dr + dc * dc).sqrt();
            radial[r * w + c] = dist;
            r_max = r_max.max(dist);
        }
    }
    let weight: Vec<f64> = radial
        .iter()
        .map(|&dist| (1.0 - dist / r_max).powf(d))
        .collect();

    let mean_for = |c_scale: f64| -> f64 {
        let mut total = n_calib as f64;
        for i in 0..hw {
            if calib.tensor().data()[i] == 0.0 {
                total += (c_scale * weight[i]).min(1.0);
            }
        }
        total / hw as f64
    };

    // expected mean is continuous and nondecreasing in c; grow an upper
    // bracket first, then bisect
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut grew = 0;
    while mean_for(hi) < gamma {
        hi *= 2.0;
        grew += 1;
        if grew > 60 {
            return Err(Error::BudgetExceeded(format!(
                "gamma {gamma} unreachable: profile saturates at mean {}",
                mean_for(hi)
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_for(mid) < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c_scale = 0.5 * (lo + hi);
    let mut data = vec![0.0; hw];
    for i in 0..hw {
        data[i] = if calib.tensor().data()[i] == 1.0 {
            1.0
        } else {
            (c_scale * weight[i]).min(1.0)
        };
    }
    RTensor::from_vec(&[h, w], data)
}

/// One Bernoulli draw from the variable-density profile, calibration forced.
pub fn vd_pattern(
    h: usize,
    w: usize,
    gamma: f64,
    d: f64,
    calib: &BinaryMask,
    rng: &mut Rng,
) -> Result<BinaryMask> {
    let p = vd_prob_map(h, w, gamma, d, calib)?;
    sample_binary(&p, rng)
}

/// Grayscale PNG of a [0, 1]-valued map (values times 255, rounded).
pub fn save_gray_png(t: &RTensor, path: &Path) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op: "save_gray_png",
            detail: format!("expected [H, W], got {:?}", t.shape()),
        });
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let pixels: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img =
        image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized from shape");
    img.save(path)
        .map_err(|e| Error::InvalidArg(format!("png write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_calib(h: usize, w: usize) -> BinaryMask {
        BinaryMask::zeros(h, w)
    }

    fn renorm_plain(p: &RTensor, gamma: f64, calib: &BinaryMask) -> Result<RTensor> {
        let mut tape = Tape::new();
        let pn = tape.constant(p.clone());
        let out = renormalize_tape(&mut tape, pn, gamma, calib)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn probability_map_examples() {
        let mut tape = Tape::new();
        let zero = tape.constant(RTensor::zeros(&[4, 4]));
        let p = probability_map_tape(&mut tape, zero, 0.25);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));

        let mut tape = Tape::new();
        let w = tape.constant(RTensor::full(&[2, 2], 4.0 * 3.0f64.ln()));
        let p = probability_map_tape(&mut tape, w, 0.25);
        for &v in tape.value(p).data() {
            assert!((v - 0.75).abs() < 1e-15, "{v}");
        }

        let mut tape = Tape::new();
        let w = tape.constant(RTensor::full(&[2, 2], -1e3));
        let p = probability_map_tape(&mut tape, w, 0.25);
        assert!(tape.value(p).data().iter().all(|&v| v < 1e-50 && v >= 0.0));
    }

    #[test]
    fn renormalize_uniform_examples() {
        let calib = empty_calib(8, 8);
        let down = renorm_plain(&RTensor::full(&[8, 8], 0.5), 0.1, &calib).unwrap();
        assert!(down.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));

        let up = renorm_plain(&RTensor::full(&[8, 8], 0.05), 0.1, &calib).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn renormalize_with_calibration_block() {
        // 8x8 grid, 2x2 calib, gamma = 0.25: non-calib target is
        // (0.25*64 - 4) / 60 = 0.2 and the overall mean is 0.25
        let calib = center_calib_mask(8, 8, 2, 2).unwrap();
        let out = renorm_plain(&RTensor::full(&[8, 8], 0.5), 0.25, &calib).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let v = out.at2(r, c);
                if calib.tensor().at2(r, c) == 1.0 {
                    assert_eq!(v, 1.0);
                } else {
                    assert!((v - 0.2).abs() < 1e-12, "{v}");
                }
            }
        }
        assert!((out.mean() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn renormalize_hits_gamma_for_random_inputs() {
        let mut rng = Rng::new(50);
        for trial in 0..100 {
            let h = 8 + 4 * (trial % 3);
            let w = 8 + 4 * (trial % 2);
            let p = rng.uniform_tensor(&[h, w]);
            let gamma = rng.uniform_in(0.05, 0.9);
            let calib = {
                let side = 2 + 2 * (trial % 2);
                let c = center_calib_mask(h, w, side, side).unwrap();
                if c.mean() >= gamma {
                    empty_calib(h, w)
                } else {
                    c
                }
            };
            let out = renorm_plain(&p, gamma, &calib).unwrap();
            assert!(
                (out.mean() - gamma).abs() < 1e-10,
                "trial {trial}: mean {} vs gamma {gamma}",
                out.mean()
            );
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn renormalize_rejects_budget_below_calibration() {
        let calib = center_calib_mask(8, 8, 4, 4).unwrap(); // 16/64 = 0.25
        let err = renorm_plain(&RTensor::full(&[8, 8], 0.5), 0.2, &calib);
        assert!(matches!(err, Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn renormalize_preserves_entry_order() {
        // each branch is an affine map with positive slope, so the pointwise
        // order of entries within a map survives renormalization
        let mut rng = Rng::new(51);
        let calib = empty_calib(8, 8);
        for gamma in [0.1, 0.5, 0.9] {
            let p = rng.uniform_tensor(&[8, 8]);
            let out = renorm_plain(&p, gamma, &calib).unwrap();
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p.data()[i] < p.data()[j] {
                        assert!(
                            out.data()[i] <= out.data()[j] + 1e-12,
                            "order broken at ({i}, {j}) for gamma {gamma}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn binary_sampling_extremes_and_statistics() {
        let mut rng = Rng::new(52);
        let ones = sample_binary(&RTensor::full(&[16, 16], 1.0), &mut rng).unwrap();
        assert_eq!(ones.count_ones(), 256);
        let zeros = sample_binary(&RTensor::zeros(&[16, 16]), &mut rng).unwrap();
        assert_eq!(zeros.count_ones(), 0);

        // empirical mean of 1e5 Bernoulli(0.3) draws within 0.3 +/- 0.005
        let p = RTensor::full(&[100, 10], 0.3);
        let mut total = 0usize;
        for _ in 0..100 {
            total += sample_binary(&p, &mut rng).unwrap().count_ones();
        }
        let mean = total as f64 / 100_000.0;
        assert!((mean - 0.3).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn approx_sampling_examples() {
        let p = RTensor::full(&[4, 4], 0.37);
        let same = sample_approx(&p, &p, 12.0).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.5));

        let p6 = RTensor::full(&[1, 1], 0.6);
        let z5 = RTensor::full(&[1, 1], 0.5);
        let v = sample_approx(&p6, &z5, 12.0).unwrap().data()[0];
        let oracle = 1.0 / (1.0 + (-1.2f64).exp());
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.76852).abs() < 1e-5);

        // huge slope approaches the indicator
        let mut rng = Rng::new(53);
        let p = rng.uniform_tensor(&[8, 8]);
        let z = rng.uniform_tensor(&[8, 8]);
        let hard = sample_approx(&p, &z, 1e9).unwrap();
        for ((&pv, &zv), &uv) in p.data().iter().zip(z.data()).zip(hard.data()) {
            let ind = if zv < pv { 1.0 } else { 0.0 };
            assert!((uv - ind).abs() < 1e-3, "p={pv} z={zv} u={uv}");
        }
    }

    #[test]
    fn topk_selects_largest_and_breaks_ties_row_major() {
        // strictly decreasing map: the first budget entries win
        let p =
            RTensor::from_vec(&[4, 4], (0..16).map(|i| 1.0 - i as f64 / 16.0).collect()).unwrap();
        let calib = empty_calib(4, 4);
        let mask = topk_pattern(&p, 5.0 / 16.0, &calib).unwrap();
        assert_eq!(mask.count_ones(), 5);
        for i in 0..16 {
            assert_eq!(mask.tensor().data()[i], if i < 5 { 1.0 } else { 0.0 });
        }

        // uniform map: tie-break picks the earliest non-calib indices
        let p = RTensor::full(&[4, 4], 0.5);
        let mask = topk_pattern(&p, 0.5, &calib).unwrap();
        assert_eq!(mask.count_ones(), 8);
        for i in 0..16 {
            assert_eq!(mask.tensor().data()[i], if i < 8 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn topk_counts_and_calibration() {
        let mut rng = Rng::new(54);
        for trial in 0..20 {
            let p = rng.uniform_tensor(&[16, 16]);
            let calib = center_calib_mask(16, 16, 4, 4).unwrap();
            let gamma = rng.uniform_in(0.1, 0.8);
            let mask = topk_pattern(&p, gamma, &calib).unwrap();
            assert_eq!(
                mask.count_ones(),
                (gamma * 256.0).floor() as usize,
                "trial {trial}"
            );
            for i in 0..256 {
                if calib.tensor().data()[i] == 1.0 {
                    assert_eq!(mask.tensor().data()[i], 1.0);
                }
            }
        }
    }

    #[test]
    fn topk_invariant_under_monotone_transform() {
        let mut rng = Rng::new(55);
        let p = rng.uniform_tensor(&[12, 12]);
        let calib = center_calib_mask(12, 12, 2, 2).unwrap();
        let a = topk_pattern(&p, 0.3, &calib).unwrap();
        let squashed = p.map(|v| 1.0 / (1.0 + (-(3.0 * v + 0.5)).exp()));
        let b = topk_pattern(&squashed, 0.3, &calib).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn topk_rejects_budget_below_calibration() {
        let p = RTensor::full(&[8, 8], 0.5);
        let calib = center_calib_mask(8, 8, 4, 4).unwrap();
        assert!(matches!(
            topk_pattern(&p, 0.1, &calib),
            Err(Error::BudgetExceeded(_))
        ));
    }

    #[test]
    fn vd_profile_hits_gamma_and_flat_when_d_zero() {
        let calib = center_calib_mask(32, 32, 4, 4).unwrap();
        for (d, gamma) in [(0.0, 0.2), (2.0, 0.1), (4.0, 0.1), (6.0, 0.3)] {
            let p = vd_prob_map(32, 32, gamma, d, &calib).unwrap();
            assert!(
                (p.mean() - gamma).abs() < 1e-6,
                "d={d} gamma={gamma} mean={}",
                p.mean()
            );
        }
        // d = 0: flat profile away from the calibration block
        let p = vd_prob_map(32, 32, 0.2, 0.0, &calib).unwrap();
        let vals: Vec<f64> = (0..p.len())
            .filter(|&i| calib.tensor().data()[i] == 0.0)
            .map(|i| p.data()[i])
            .collect();
        assert!(vals.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn vd_pattern_draw_respects_calibration() {
        let mut rng = Rng::new(56);
        let calib = center_calib_mask(32, 32, 6, 6).unwrap();
        let mask = vd_pattern(32, 32, 0.15, 4.0, &calib, &mut rng).unwrap();
        for i in 0..mask.tensor().len() {
            if calib.tensor().data()[i] == 1.0 {
                assert_eq!(mask.tensor().data()[i], 1.0);
            }
        }
        // draw statistics in a loose band
        let mut total = 0usize;
        for _ in 0..50 {
            total += vd_pattern(32, 32, 0.15, 4.0, &calib, &mut rng)
                .unwrap()
                .count_ones();
        }
        let mean = total as f64 / (50.0 * 1024.0);
        assert!((mean - 0.15).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn vd_rejects_infeasible_gamma() {
        let calib = center_calib_mask(16, 16, 8, 8).unwrap(); // 64/256 = 0.25
        assert!(matches!(
            vd_prob_map(16, 16, 0.1, 4.0, &calib),
            Err(Error::BudgetExceeded(_))
        ));
    }

    #[test]
    fn pattern_params_validation() {
        let mut rng = Rng::new(57);
        let logits = init_logits(&mut rng, 8, 8);
        let calib = center_calib_mask(8, 8, 2, 2).unwrap();
        assert!(PatternParams::new(logits.clone(), 0.25, 0.25, calib.clone()).is_ok());
        assert!(PatternParams::new(logits.clone(), -1.0, 0.25, calib.clone()).is_err());
        assert!(PatternParams::new(logits.clone(), 0.25, 1.5, calib.clone()).is_err());
        // calibration fraction 4/64 = 0.0625 >= gamma
        assert!(PatternParams::new(logits, 0.25, 0.05, calib).is_err());
    }
}
