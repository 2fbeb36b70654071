//! Dense row-major tensors: real `f64` and complex `Complex64`.
//!
//! `CTensor` stores interleaved (re, im) double-precision pairs, which is
//! exactly the in-memory layout of `Complex64`. The reverse-mode tape works
//! on `RTensor` only; complex quantities cross into autodiff as planar
//! (re, im) channel pairs, see [`CTensor::to_pair`].

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape {
                op: "RTensor::from_vec",
                detail: format!("shape {:?} needs {} entries, got {}", shape, n, data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Complex tensor, row-major, interleaved (re, im) f64 pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape {
                op: "CTensor::from_vec",
                detail: format!("shape {:?} needs {} entries, got {}", shape, n, data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> Complex64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn at2(&self, r: usize, c: usize) -> Complex64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: Complex64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    /// Contiguous `[H, W]` block `j` of an `[N, H, W]` tensor.
    pub fn block(&self, j: usize) -> &[Complex64] {
        debug_assert_eq!(self.shape.len(), 3);
        let n = self.shape[1] * self.shape[2];
        &self.data[j * n..(j + 1) * n]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [Complex64] {
        debug_assert_eq!(self.shape.len(), 3);
        let n = self.shape[1] * self.shape[2];
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real inner product Re⟨a, b⟩ = Re Σ conj(aᵢ)·bᵢ.
    pub fn dot_re(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn magnitude(&self) -> RTensor {
        RTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Planar (re, im) channel pair used on the autodiff tape: shape
    /// `[dims..., H, W]` becomes `[dims..., 2, H, W]` with channel 0 = re.
    pub fn to_pair(&self) -> RTensor {
        assert!(self.shape.len() >= 2, "to_pair needs at least [H, W]");
        let (lead, hw) = self.shape.split_at(self.shape.len() - 2);
        let plane: usize = hw.iter().product();
        let batches: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(2);
        shape.extend_from_slice(hw);
        let mut data = vec![0.0; self.data.len() * 2];
        for b in 0..batches {
            let src = &self.data[b * plane..(b + 1) * plane];
            let dst = &mut data[b * 2 * plane..(b + 1) * 2 * plane];
            for (i, z) in src.iter().enumerate() {
                dst[i] = z.re;
                dst[plane + i] = z.im;
            }
        }
        RTensor { shape, data }
    }

    /// Inverse of [`CTensor::to_pair`].
    pub fn from_pair(pair: &RTensor) -> Result<Self> {
        let s = pair.shape();
        if s.len() < 3 || s[s.len() - 3] != 2 {
            return Err(Error::Shape {
                op: "CTensor::from_pair",
                detail: format!("expected [..., 2, H, W], got {:?}", s),
            });
        }
        let hw = &s[s.len() - 2..];
        let lead = &s[..s.len() - 3];
        let plane: usize = hw.iter().product();
        let batches: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(hw);
        let mut data = vec![Complex64::new(0.0, 0.0); batches * plane];
        for b in 0..batches {
            let src = &pair.data()[b * 2 * plane..(b + 1) * 2 * plane];
            let dst = &mut data[b * plane..(b + 1) * plane];
            for i in 0..plane {
                dst[i] = Complex64::new(src[i], src[plane + i]);
            }
        }
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_round_trip() {
        let t = CTensor::from_fn(&[3, 4, 5], |ix| {
            Complex64::new(ix[0] as f64 + 0.5, ix[1] as f64 - ix[2] as f64)
        });
        let pair = t.to_pair();
        assert_eq!(pair.shape(), &[3, 2, 4, 5]);
        let back = CTensor::from_pair(&pair).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(RTensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(CTensor::from_vec(&[2], vec![]).is_err());
    }

    #[test]
    fn from_fn_walks_row_major() {
        let t = RTensor::from_fn(&[2, 3], |ix| (ix[0] * 3 + ix[1]) as f64);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
