//! Finite-difference verification of tape gradients.
//!
//! Compares the analytic backward pass against central differences
//! (f(p+eps) - f(p-eps)) / (2 eps) on every leaf coordinate, or on a seeded
//! random subsample for large leaves. The program under test must be
//! deterministic given the parameter store: all randomness (mask draws,
//! data) has to be pre-drawn and captured as constants.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::numerics::{RTensor, Rng};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Max probed coordinates per leaf; larger leaves are subsampled.
    pub max_coords: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords: 200,
            seed: 0,
        }
    }
}

/// Worst relative error between analytic and numeric gradients over all
/// probed coordinates. Relative error uses `|a - n| / max(|a|, |n|, 1)`, so
/// near-zero gradients are compared absolutely.
pub fn gradcheck<F>(build: F, params: &ParamStore, cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = p.register_all(&mut tape);
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids = params.register_all(&mut tape);
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NotScalar(tape.value(loss).shape().to_vec()));
    }
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, RTensor> = ids
        .iter()
        .map(|(name, &id)| {
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| RTensor::zeros(tape.value(id).shape()));
            (name.clone(), g)
        })
        .collect();
    for (name, g) in &analytic {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                ctx: format!("gradient of {name}"),
            });
        }
    }

    let mut working = params.clone();
    let mut max_rel = 0.0f64;
    for (leaf_idx, (name, base)) in params.iter().enumerate() {
        let n = base.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut rng = Rng::new(cfg.seed).derive(leaf_idx as u64);
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.max_coords);
            all.sort_unstable();
            all
        };
        let ga = &analytic[name];
        for &i in &coords {
            let orig = base.data()[i];
            working.get_mut(name).unwrap().data_mut()[i] = orig + cfg.eps;
            let fp = eval(&working)?;
            working.get_mut(name).unwrap().data_mut()[i] = orig - cfg.eps;
            let fm = eval(&working)?;
            working.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * cfg.eps);
            let a = ga.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
