//! Synthetic complex phantoms and coil sensitivity maps.
//!
//! Phantoms are sums of 5-12 randomly placed, rotated and scaled ellipses
//! with intensities in [0.2, 1.0], carrying a smooth random phase from a
//! degree-2 polynomial with coefficients in [-pi/4, pi/4]. Magnitude is
//! normalized so its maximum is 1. Coil maps are Gaussian-magnitude bumps
//! centered on a circle around the field of view with random linear phase
//! ramps, pixelwise normalized so the squared magnitudes sum to one.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mri::CoilSensitivities;
use crate::numerics::{CTensor, Rng};

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos_t: f64,
    sin_t: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.ax;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ay;
        u * u + v * v <= 1.0
    }
}

/// Complex ellipse phantom on an `[H, W]` grid, deterministic in the rng.
pub fn simulate_phantom(rng: &mut Rng, h: usize, w: usize) -> Result<CTensor> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArg(format!(
            "phantom needs H, W >= 16, got {h}x{w}"
        )));
    }
    let n_ellipses = 5 + rng.uniform_usize(8); // 5..=12
    let ellipses: Vec<Ellipse> = (0..n_ellipses)
        .map(|_| {
            let theta = rng.uniform_in(0.0, std::f64::consts::PI);
            Ellipse {
                cx: rng.uniform_in(-0.55, 0.55),
                cy: rng.uniform_in(-0.55, 0.55),
                ax: rng.uniform_in(0.1, 0.45),
                ay: rng.uniform_in(0.1, 0.45),
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                intensity: rng.uniform_in(0.2, 1.0),
            }
        })
        .collect();
    // degree-2 phase polynomial over [-1, 1]^2 coordinates
    let phase_coeff: Vec<f64> = (0..6)
        .map(|_| rng.uniform_in(-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4))
        .collect();

    let coord = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };

    let mut mag = vec![0.0f64; h * w];
    for r in 0..h {
        let y = coord(r, h);
        for c in 0..w {
            let x = coord(c, w);
            let mut v = 0.0;
            for e in &ellipses {
                if e.contains(x, y) {
                    v += e.intensity;
                }
            }
            mag[r * w + c] = v;
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in mag.iter_mut() {
            *v /= max;
        }
    }

    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = coord(r, h);
        for c in 0..w {
            let x = coord(c, w);
            let phi = phase_coeff[0]
                + phase_coeff[1] * x
                + phase_coeff[2] * y
                + phase_coeff[3] * x * x
                + phase_coeff[4] * x * y
                + phase_coeff[5] * y * y;
            data.push(Complex64::from_polar(mag[r * w + c], phi));
        }
    }
    CTensor::from_vec(&[h, w], data)
}

/// Gaussian-bump coil maps with random phase ramps, normalized pixelwise so
/// `sum_j |S_j|^2 = 1` everywhere.
pub fn simulate_coils(rng: &mut Rng, h: usize, w: usize, n_c: usize) -> Result<CoilSensitivities> {
    if n_c < 1 {
        return Err(Error::InvalidArg("need at least one coil".into()));
    }
    let coord = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut maps = CTensor::zeros(&[n_c, h, w]);
    for j in 0..n_c {
        let angle = std::f64::consts::TAU * (j as f64 / n_c as f64) + rng.uniform_in(-0.2, 0.2);
        let radius = rng.uniform_in(1.0, 1.3);
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        let sigma = rng.uniform_in(0.7, 1.1);
        let ramp_x = rng.uniform_in(-0.5, 0.5);
        let ramp_y = rng.uniform_in(-0.5, 0.5);
        let phase0 = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
        let blk = maps.block_mut(j);
        for r in 0..h {
            let y = coord(r, h);
            for c in 0..w {
                let x = coord(c, w);
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                let phi = phase0 + ramp_x * x + ramp_y * y;
                blk[r * w + c] = Complex64::from_polar(g, phi);
            }
        }
    }
    // pixelwise normalization
    let plane = h * w;
    for p in 0..plane {
        let ss: f64 = (0..n_c)
            .map(|j| maps.data()[j * plane + p].norm_sqr())
            .sum();
        let scale = 1.0 / ss.sqrt();
        for j in 0..n_c {
            maps.data_mut()[j * plane + p] *= scale;
        }
    }
    CoilSensitivities::new(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_normalized_and_deterministic() {
        let mut rng = Rng::new(17);
        let p = simulate_phantom(&mut rng, 64, 64).unwrap();
        let max = p.magnitude().data().iter().cloned().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12, "max magnitude {max}");
        let p2 = simulate_phantom(&mut Rng::new(17), 64, 64).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn phantom_phase_is_smooth() {
        // principal-value angles stay in (-pi, pi]; the anisotropic TV of the
        // phase per pixel stays small. The generated polynomial can exceed
        // +/-pi, so neighbor differences are unwrapped to their principal
        // value before accumulating.
        let wrap = |d: f64| {
            (d + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
        };
        let rng = Rng::new(18);
        for trial in 0..5 {
            let p = simulate_phantom(&mut rng.derive(trial), 64, 64).unwrap();
            let angles: Vec<f64> = p.data().iter().map(|z| z.arg()).collect();
            let mags = p.magnitude();
            assert!(angles.iter().all(|a| a.abs() <= std::f64::consts::PI));
            // phase is only defined on the object support
            let on = |r: usize, c: usize| mags.at2(r, c) > 0.0;
            let mut tv = 0.0;
            let mut pairs = 0usize;
            for r in 0..64 {
                for c in 0..64 {
                    if c + 1 < 64 && on(r, c) && on(r, c + 1) {
                        tv += wrap(angles[r * 64 + c + 1] - angles[r * 64 + c]).abs();
                        pairs += 1;
                    }
                    if r + 1 < 64 && on(r, c) && on(r + 1, c) {
                        tv += wrap(angles[(r + 1) * 64 + c] - angles[r * 64 + c]).abs();
                        pairs += 1;
                    }
                }
            }
            assert!(pairs > 0);
            assert!(tv / (pairs as f64) < 0.2, "trial {trial}: TV/px {}", tv / pairs as f64);
        }
    }

    #[test]
    fn phantom_rejects_tiny_grids() {
        let mut rng = Rng::new(19);
        assert!(simulate_phantom(&mut rng, 8, 64).is_err());
    }

    #[test]
    fn coils_are_normalized() {
        let mut rng = Rng::new(20);
        let sens = simulate_coils(&mut rng, 32, 32, 4).unwrap();
        let plane = 32 * 32;
        for p in 0..plane {
            let ss: f64 = (0..4)
                .map(|j| sens.maps().data()[j * plane + p].norm_sqr())
                .sum();
            assert!((ss - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_coil_has_unit_magnitude() {
        let mut rng = Rng::new(21);
        let sens = simulate_coils(&mut rng, 16, 16, 1).unwrap();
        for z in sens.maps().data() {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coils_deterministic_in_seed() {
        let a = simulate_coils(&mut Rng::new(5), 16, 16, 3).unwrap();
        let b = simulate_coils(&mut Rng::new(5), 16, 16, 3).unwrap();
        assert_eq!(a.maps(), b.maps());
    }
}
