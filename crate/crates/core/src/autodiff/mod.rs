//! Reverse-mode differentiation tape over real tensors.
//!
//! The tape is define-by-run: every forward pass records a fresh graph and
//! each recording method computes its output eagerly, so data-dependent
//! control flow (stochastic masks, CG early exits) is free. Complex
//! quantities live on the tape as planar (re, im) channel pairs of shape
//! `[..., 2, H, W]`; complex ops carry explicit real-pair Jacobians, and the
//! backward of the centered FFT pair is the centered inverse FFT of the
//! cotangent pair (the transform is unitary).
//!
//! The op set is exactly what the sampling and reconstruction networks need;
//! there is no broadcasting beyond the structured ops below and no reuse of
//! a recorded graph.

mod gradcheck;
mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{fft2c_planar_batched, RTensor};

pub use gradcheck::{gradcheck, GradCheckConfig};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named store of every trainable leaf tensor (denoiser weights, pattern
/// logits, data-consistency log-weight). Deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    map: BTreeMap<String, RTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RTensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&RTensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RTensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RTensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Registers every parameter as a gradient-tracked leaf on `tape`.
    pub fn register_all(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.map
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// add + mul * x, elementwise with constant coefficients
    Affine {
        x: NodeId,
        mul: f64,
    },
    Exp(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SumReduce(NodeId),
    /// L1: sum of absolute values; subgradient at 0 is 0
    AbsSum(NodeId),
    /// sum of elementwise products, scalar output
    Dot(NodeId, NodeId),
    /// tensor times rank-0 scalar node
    BcastMul {
        x: NodeId,
        s: NodeId,
    },
    /// x * m with a real [H, W] mask broadcast over leading axes of x
    MaskMul {
        x: NodeId,
        m: NodeId,
    },
    /// forward: 1 where z < p; backward: identity (straight-through)
    StBinarize {
        p: NodeId,
    },
    /// complex product of same-shape [..., 2, H, W] pairs
    CMul(NodeId, NodeId),
    /// img [2,H,W] times coils [Nc,2,H,W], per-coil complex product
    CMulBcast {
        img: NodeId,
        coils: NodeId,
    },
    /// sum_j conj(coils_j) * y_j -> [2,H,W]
    CConjMulSum {
        coils: NodeId,
        y: NodeId,
    },
    /// centered orthonormal FFT applied to each [2,H,W] pair
    FftPair {
        x: NodeId,
        inverse: bool,
    },
    /// 3x3, stride 1, zero-pad 1: x [Cin,H,W], w [Cout,Cin,3,3], b [Cout]
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: kernels::InstanceNormStats,
    },
    /// concatenate along axis 0
    ConcatCh(NodeId, NodeId),
    /// channels [start, start+len) along axis 0
    SliceCh {
        x: NodeId,
        start: usize,
    },
}

struct Node {
    op: Op,
    value: RTensor,
    requires_grad: bool,
}

/// Gradients per node produced by [`Tape::backward`]; query leaves by id.
pub struct Gradients {
    grads: Vec<Option<RTensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&RTensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &RTensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: RTensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, value: RTensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: participates in forward values only.
    pub fn constant(&mut self, value: RTensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = RTensor::from_vec(va.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// add + mul * x elementwise (covers scalar-mul, negation, 1 - x, ...).
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| add + mul * v);
        let rg = self.needs(&[x]);
        self.push(Op::Affine { x, mul }, value, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(f64::exp);
        let rg = self.needs(&[x]);
        self.push(Op::Exp(x), value, rg)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| 1.0 / v);
        let rg = self.needs(&[x]);
        self.push(Op::Recip(x), value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn sum_reduce(&mut self, x: NodeId) -> NodeId {
        let value = RTensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.needs(&[x]);
        self.push(Op::SumReduce(x), value, rg)
    }

    pub fn abs_sum(&mut self, x: NodeId) -> NodeId {
        let value = RTensor::scalar(self.nodes[x.0].value.data().iter().map(|v| v.abs()).sum());
        let rg = self.needs(&[x]);
        self.push(Op::AbsSum(x), value, rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "dot",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Dot(a, b), RTensor::scalar(s), rg))
    }

    pub fn bcast_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(shape_err(
                "bcast_mul",
                format!("scalar operand has shape {:?}", self.nodes[s.0].value.shape()),
            ));
        }
        let sv = self.nodes[s.0].value.item();
        let value = self.nodes[x.0].value.map(|v| v * sv);
        let rg = self.needs(&[x, s]);
        Ok(self.push(Op::BcastMul { x, s }, value, rg))
    }

    /// x * m where m is a real [H, W] mask and x has trailing dims [H, W].
    pub fn mask_mul(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (vx, vm) = (&self.nodes[x.0].value, &self.nodes[m.0].value);
        let (sx, sm) = (vx.shape(), vm.shape());
        if sm.len() != 2 || sx.len() < 2 || sx[sx.len() - 2..] != *sm {
            return Err(shape_err(
                "mask_mul",
                format!("x {:?} vs mask {:?}", sx, sm),
            ));
        }
        let plane = sm[0] * sm[1];
        let mut data = vx.data().to_vec();
        for blk in data.chunks_mut(plane) {
            for (v, m) in blk.iter_mut().zip(vm.data()) {
                *v *= m;
            }
        }
        let value = RTensor::from_vec(sx, data)?;
        let rg = self.needs(&[x, m]);
        Ok(self.push(Op::MaskMul { x, m }, value, rg))
    }

    /// Binary threshold with straight-through backward: forward emits
    /// 1 where z < p (exactly {0,1}), backward passes the cotangent through
    /// unchanged, so the chain to the pattern logits is d p / d w.
    pub fn st_binarize(&mut self, p: NodeId, z: &RTensor) -> Result<NodeId> {
        let vp = &self.nodes[p.0].value;
        if vp.shape() != z.shape() {
            return Err(shape_err(
                "st_binarize",
                format!("p {:?} vs z {:?}", vp.shape(), z.shape()),
            ));
        }
        let data: Vec<f64> = vp
            .data()
            .iter()
            .zip(z.data())
            .map(|(&pv, &zv)| if zv < pv { 1.0 } else { 0.0 })
            .collect();
        let value = RTensor::from_vec(vp.shape(), data)?;
        let rg = self.needs(&[p]);
        Ok(self.push(Op::StBinarize { p }, value, rg))
    }

    fn check_pair(op: &'static str, s: &[usize]) -> Result<()> {
        if s.len() < 3 || s[s.len() - 3] != 2 {
            return Err(shape_err(op, format!("expected [..., 2, H, W], got {:?}", s)));
        }
        Ok(())
    }

    /// Complex product of same-shape pair tensors.
    pub fn cmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "cmul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        Self::check_pair("cmul", va.shape())?;
        let s = va.shape();
        let plane: usize = s[s.len() - 2] * s[s.len() - 1];
        let mut data = vec![0.0; va.len()];
        for (blk_out, (blk_a, blk_b)) in data
            .chunks_mut(2 * plane)
            .zip(va.data().chunks(2 * plane).zip(vb.data().chunks(2 * plane)))
        {
            complex_mul_block(blk_a, blk_b, blk_out, plane, false);
        }
        let value = RTensor::from_vec(s, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::CMul(a, b), value, rg))
    }

    /// Per-coil complex product: img [2,H,W] x coils [Nc,2,H,W] -> [Nc,2,H,W].
    pub fn cmul_bcast(&mut self, img: NodeId, coils: NodeId) -> Result<NodeId> {
        let (vi, vc) = (&self.nodes[img.0].value, &self.nodes[coils.0].value);
        let (si, sc) = (vi.shape(), vc.shape());
        if si.len() != 3 || si[0] != 2 || sc.len() != 4 || sc[1] != 2 || sc[2..] != si[1..] {
            return Err(shape_err(
                "cmul_bcast",
                format!("img {:?} vs coils {:?}", si, sc),
            ));
        }
        let plane = si[1] * si[2];
        let mut data = vec![0.0; vc.len()];
        for (blk_out, blk_c) in data.chunks_mut(2 * plane).zip(vc.data().chunks(2 * plane)) {
            complex_mul_block(vi.data(), blk_c, blk_out, plane, false);
        }
        let value = RTensor::from_vec(sc, data)?;
        let rg = self.needs(&[img, coils]);
        Ok(self.push(Op::CMulBcast { img, coils }, value, rg))
    }

    /// Coil combination: sum_j conj(coils_j) * y_j -> [2,H,W].
    pub fn cconj_mul_sum(&mut self, coils: NodeId, y: NodeId) -> Result<NodeId> {
        let (vc, vy) = (&self.nodes[coils.0].value, &self.nodes[y.0].value);
        if vc.shape() != vy.shape() || vc.shape().len() != 4 || vc.shape()[1] != 2 {
            return Err(shape_err(
                "cconj_mul_sum",
                format!("coils {:?} vs y {:?}", vc.shape(), vy.shape()),
            ));
        }
        let s = vc.shape();
        let plane = s[2] * s[3];
        let mut data = vec![0.0; 2 * plane];
        let mut scratch = vec![0.0; 2 * plane];
        for (blk_c, blk_y) in vc.data().chunks(2 * plane).zip(vy.data().chunks(2 * plane)) {
            complex_mul_block(blk_c, blk_y, &mut scratch, plane, true);
            for (acc, v) in data.iter_mut().zip(&scratch) {
                *acc += v;
            }
        }
        let value = RTensor::from_vec(&[2, s[2], s[3]], data)?;
        let rg = self.needs(&[coils, y]);
        Ok(self.push(Op::CConjMulSum { coils, y }, value, rg))
    }

    /// Centered orthonormal FFT over each [2, H, W] pair.
    pub fn fft_pair(&mut self, x: NodeId) -> Result<NodeId> {
        self.fft_pair_impl(x, false)
    }

    /// Centered orthonormal inverse FFT over each [2, H, W] pair.
    pub fn ifft_pair(&mut self, x: NodeId) -> Result<NodeId> {
        self.fft_pair_impl(x, true)
    }

    fn fft_pair_impl(&mut self, x: NodeId, inverse: bool) -> Result<NodeId> {
        let value = fft2c_planar_batched(&self.nodes[x.0].value, inverse)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::FftPair { x, inverse }, value, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        let ok = sx.len() == 3
            && sw.len() == 4
            && sb.len() == 1
            && sw[1] == sx[0]
            && sw[2] == 3
            && sw[3] == 3
            && sb[0] == sw[0]
            && sx[1] >= 1
            && sx[2] >= 1;
        if !ok {
            return Err(shape_err(
                "conv2d",
                format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let mut y = vec![0.0; cout * h * wd];
        kernels::conv2d_forward(vx.data(), vw.data(), vb.data(), cin, cout, h, wd, &mut y);
        let value = RTensor::from_vec(&[cout, h, wd], y)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b }, value, rg))
    }

    /// Per-channel instance normalization with trainable affine parameters.
    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (sx, sg, sb) = (vx.shape(), vg.shape(), vb.shape());
        if sx.len() != 3 || sg != [sx[0]] || sb != [sx[0]] {
            return Err(shape_err(
                "instance_norm",
                format!("x {:?}, gain {:?}, bias {:?}", sx, sg, sb),
            ));
        }
        let (c, plane) = (sx[0], sx[1] * sx[2]);
        let mut y = vec![0.0; vx.len()];
        let stats =
            kernels::instance_norm_forward(vx.data(), vg.data(), vb.data(), c, plane, eps, &mut y);
        let value = RTensor::from_vec(sx, y)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::InstanceNorm {
                x,
                gain,
                bias,
                stats,
            },
            value,
            rg,
        ))
    }

    /// Concatenate along the channel axis (axis 0).
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 1 || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err(
                "concat_ch",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = RTensor::from_vec(&shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCh(a, b), value, rg))
    }

    /// Channels [start, start+len) along axis 0.
    pub fn slice_ch(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let s = vx.shape();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err(
                "slice_ch",
                format!("channels [{start}, {}) of {:?}", start + len, s),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = vx.data()[start * stride..(start + len) * stride].to_vec();
        let value = RTensor::from_vec(&shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceCh { x, start }, value, rg))
    }

    /// Reverse accumulation from a scalar loss. Returns per-node gradients;
    /// intermediate cotangents are dropped as soon as they are consumed, so
    /// only leaf gradients survive in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<RTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(RTensor::from_vec(lv.shape(), vec![1.0]).expect("scalar"));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<RTensor>], id: NodeId, contrib: RTensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &RTensor,
        grads: &mut [Option<RTensor>],
    ) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, zip_map(gy, val(*b), |g, v| g * v));
                self.acc(grads, *b, zip_map(gy, val(*a), |g, v| g * v));
            }
            Op::Affine { x, mul } => {
                let m = *mul;
                self.acc(grads, *x, gy.map(|g| g * m));
            }
            Op::Exp(x) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *x, zip_map(gy, y, |g, yv| g * yv));
            }
            Op::Recip(x) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *x, zip_map(gy, y, |g, yv| -g * yv * yv));
            }
            Op::Relu(x) => {
                self.acc(
                    grads,
                    *x,
                    zip_map(gy, val(*x), |g, xv| if xv > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *x, zip_map(gy, y, |g, yv| g * yv * (1.0 - yv)));
            }
            Op::SumReduce(x) => {
                let g = gy.item();
                self.acc(grads, *x, RTensor::full(val(*x).shape(), g));
            }
            Op::AbsSum(x) => {
                let g = gy.item();
                self.acc(
                    grads,
                    *x,
                    val(*x).map(|v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Dot(a, b) => {
                let g = gy.item();
                self.acc(grads, *a, val(*b).map(|v| g * v));
                self.acc(grads, *b, val(*a).map(|v| g * v));
            }
            Op::BcastMul { x, s } => {
                let sv = val(*s).item();
                self.acc(grads, *x, gy.map(|g| g * sv));
                let ds: f64 = gy.data().iter().zip(val(*x).data()).map(|(g, v)| g * v).sum();
                self.acc(grads, *s, RTensor::scalar(ds));
            }
            Op::MaskMul { x, m } => {
                let vm = val(*m);
                let plane = vm.len();
                let mut gx = gy.clone();
                for blk in gx.data_mut().chunks_mut(plane) {
                    for (v, mv) in blk.iter_mut().zip(vm.data()) {
                        *v *= mv;
                    }
                }
                self.acc(grads, *x, gx);
                if self.nodes[m.0].requires_grad {
                    let vx = val(*x);
                    let mut gm = vec![0.0; plane];
                    for (gblk, xblk) in gy.data().chunks(plane).zip(vx.data().chunks(plane)) {
                        for ((gm_v, g), xv) in gm.iter_mut().zip(gblk).zip(xblk) {
                            *gm_v += g * xv;
                        }
                    }
                    self.acc(grads, *m, RTensor::from_vec(vm.shape(), gm)?);
                }
            }
            Op::StBinarize { p } => {
                self.acc(grads, *p, gy.clone());
            }
            Op::CMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let s = va.shape();
                let plane = s[s.len() - 2] * s[s.len() - 1];
                self.acc(grads, *a, cmul_conj_blocks(gy, vb, plane));
                self.acc(grads, *b, cmul_conj_blocks(gy, va, plane));
            }
            Op::CMulBcast { img, coils } => {
                let (vi, vc) = (val(*img), val(*coils));
                let plane = vi.shape()[1] * vi.shape()[2];
                if self.nodes[img.0].requires_grad {
                    // sum_j gy_j * conj(c_j)
                    let mut gi = vec![0.0; vi.len()];
                    let mut scratch = vec![0.0; 2 * plane];
                    for (gblk, cblk) in gy.data().chunks(2 * plane).zip(vc.data().chunks(2 * plane))
                    {
                        mul_conj_second(gblk, cblk, &mut scratch, plane);
                        for (a, v) in gi.iter_mut().zip(&scratch) {
                            *a += v;
                        }
                    }
                    self.acc(grads, *img, RTensor::from_vec(vi.shape(), gi)?);
                }
                if self.nodes[coils.0].requires_grad {
                    let mut gc = vec![0.0; vc.len()];
                    for (gcblk, gblk) in
                        gc.chunks_mut(2 * plane).zip(gy.data().chunks(2 * plane))
                    {
                        mul_conj_second(gblk, vi.data(), gcblk, plane);
                    }
                    self.acc(grads, *coils, RTensor::from_vec(vc.shape(), gc)?);
                }
            }
            Op::CConjMulSum { coils, y } => {
                let (vc, vy) = (val(*coils), val(*y));
                let plane = vc.shape()[2] * vc.shape()[3];
                if self.nodes[y.0].requires_grad {
                    // gy_j = c_j * gout
                    let mut g = vec![0.0; vy.len()];
                    for (gblk, cblk) in g.chunks_mut(2 * plane).zip(vc.data().chunks(2 * plane)) {
                        complex_mul_block(cblk, gy.data(), gblk, plane, false);
                    }
                    self.acc(grads, *y, RTensor::from_vec(vy.shape(), g)?);
                }
                if self.nodes[coils.0].requires_grad {
                    // gc_j = conj(gout) * y_j
                    let mut g = vec![0.0; vc.len()];
                    for (gcblk, yblk) in g.chunks_mut(2 * plane).zip(vy.data().chunks(2 * plane)) {
                        mul_conj_first(gy.data(), yblk, gcblk, plane);
                    }
                    self.acc(grads, *coils, RTensor::from_vec(vc.shape(), g)?);
                }
            }
            Op::FftPair { x, inverse } => {
                // unitary: adjoint = inverse with the matching convention
                let gx = fft2c_planar_batched(gy, !inverse)?;
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let cout = vw.shape()[0];
                let mut gx = vec![0.0; vx.len()];
                let mut gw = vec![0.0; vw.len()];
                let mut gb = vec![0.0; cout];
                kernels::conv2d_backward(
                    vx.data(),
                    vw.data(),
                    gy.data(),
                    cin,
                    cout,
                    h,
                    wd,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                self.acc(grads, *x, RTensor::from_vec(vx.shape(), gx)?);
                self.acc(grads, *w, RTensor::from_vec(vw.shape(), gw)?);
                self.acc(grads, *b, RTensor::from_vec(&[cout], gb)?);
            }
            Op::InstanceNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (vx, vg) = (val(*x), val(*gain));
                let c = vx.shape()[0];
                let plane = vx.shape()[1] * vx.shape()[2];
                let mut gx = vec![0.0; vx.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                kernels::instance_norm_backward(
                    vx.data(),
                    vg.data(),
                    stats,
                    gy.data(),
                    c,
                    plane,
                    &mut gx,
                    &mut gg,
                    &mut gb,
                );
                self.acc(grads, *x, RTensor::from_vec(vx.shape(), gx)?);
                self.acc(grads, *gain, RTensor::from_vec(&[c], gg)?);
                self.acc(grads, *bias, RTensor::from_vec(&[c], gb)?);
            }
            Op::ConcatCh(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = RTensor::from_vec(va.shape(), gy.data()[..va.len()].to_vec())?;
                let gb = RTensor::from_vec(vb.shape(), gy.data()[va.len()..].to_vec())?;
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SliceCh { x, start } => {
                let vx = val(*x);
                let stride: usize = vx.shape()[1..].iter().product();
                let mut g = vec![0.0; vx.len()];
                g[start * stride..start * stride + gy.len()].copy_from_slice(gy.data());
                self.acc(grads, *x, RTensor::from_vec(vx.shape(), g)?);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &RTensor, b: &RTensor, f: impl Fn(f64, f64) -> f64) -> RTensor {
    debug_assert_eq!(a.len(), b.len());
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    RTensor::from_vec(a.shape(), data).expect("same shape")
}

/// out = a * b (complex, planar blocks of size 2*plane); conj_a conjugates a.
fn complex_mul_block(a: &[f64], b: &[f64], out: &mut [f64], plane: usize, conj_a: bool) {
    let (are, aim) = a.split_at(plane);
    let (bre, bim) = b.split_at(plane);
    let (ore, oim) = out.split_at_mut(plane);
    if conj_a {
        for i in 0..plane {
            ore[i] = are[i] * bre[i] + aim[i] * bim[i];
            oim[i] = are[i] * bim[i] - aim[i] * bre[i];
        }
    } else {
        for i in 0..plane {
            ore[i] = are[i] * bre[i] - aim[i] * bim[i];
            oim[i] = are[i] * bim[i] + aim[i] * bre[i];
        }
    }
}

/// out = a * conj(b)
fn mul_conj_second(a: &[f64], b: &[f64], out: &mut [f64], plane: usize) {
    let (are, aim) = a.split_at(plane);
    let (bre, bim) = b.split_at(plane);
    let (ore, oim) = out.split_at_mut(plane);
    for i in 0..plane {
        ore[i] = are[i] * bre[i] + aim[i] * bim[i];
        oim[i] = aim[i] * bre[i] - are[i] * bim[i];
    }
}

/// out = conj(a) * b
fn mul_conj_first(a: &[f64], b: &[f64], out: &mut [f64], plane: usize) {
    let (are, aim) = a.split_at(plane);
    let (bre, bim) = b.split_at(plane);
    let (ore, oim) = out.split_at_mut(plane);
    for i in 0..plane {
        ore[i] = are[i] * bre[i] + aim[i] * bim[i];
        oim[i] = are[i] * bim[i] - aim[i] * bre[i];
    }
}

/// Per-block gy * conj(other), used by the CMul backward.
fn cmul_conj_blocks(gy: &RTensor, other: &RTensor, plane: usize) -> RTensor {
    let mut data = vec![0.0; gy.len()];
    for (out, (g, o)) in data
        .chunks_mut(2 * plane)
        .zip(gy.data().chunks(2 * plane).zip(other.data().chunks(2 * plane)))
    {
        mul_conj_second(g, o, out, plane);
    }
    RTensor::from_vec(gy.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests;
