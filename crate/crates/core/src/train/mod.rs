//! Joint training of the sampling pattern and the unrolled reconstructor.
//!
//! One Adam instance updates the denoiser weights, the data-consistency
//! log-weight rho and the pattern logits simultaneously, batch size 1 by
//! default. Every forward pass draws a fresh z, under-samples the fully
//! sampled k-space retrospectively with the resulting mask (binary +
//! straight-through in BS mode, fractional sigmoid in AS mode), runs the
//! K-block unroll and accumulates the L1 loss over intermediate
//! reconstructions. Validation PSNR uses the deterministic top-gamma
//! pattern so model selection is not noisy in z; the best-validation
//! checkpoint is kept. Runs are bit-deterministic given the three seeds.

mod checkpoint;
mod eval;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::mri::{read_sample, DatasetManifest, KSpaceSample, Split};
use crate::numerics::{RTensor, Rng};
use crate::recon::unrolled::{
    init_model_params, modl_forward_tape, modl_reconstruct, training_loss_tape, UnrollConfig,
};
use crate::sampling::{
    center_calib_mask, init_logits, probability_map_tape, renormalize_tape, sample_approx_tape,
    sample_binary_tape, topk_pattern, BinaryMask, PatternParams,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, EvalConfig, EvalOutcome, PatternSource, ReconMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Binary sampling with the straight-through estimator.
    Bs,
    /// Approximate (sigmoid-relaxed) sampling.
    As,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingMode::Bs => write!(f, "bs"),
            SamplingMode::As => write!(f, "as"),
        }
    }
}

/// Full training configuration. Unknown keys in config files are rejected;
/// the struct round-trips through JSON bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: SamplingMode,
    pub gamma: f64,
    pub slope_a: f64,
    /// Slope of the approximate-sampling sigmoid; required in AS mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_slope: Option<f64>,
    pub k_blocks: usize,
    pub n_cg: usize,
    pub n_cg_eval: usize,
    pub denoiser_width: usize,
    pub lr: f64,
    /// Learning rate for the pattern logits; defaults to `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_pattern: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the fully sampled central calibration square.
    pub calib: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_sampling: u64,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl TrainConfig {
    /// Desk-scale defaults; manifest and checkpoint_dir still need values.
    pub fn desk_default() -> Self {
        Self {
            mode: SamplingMode::Bs,
            gamma: 0.1,
            slope_a: 0.25,
            b_slope: None,
            k_blocks: 5,
            n_cg: 10,
            n_cg_eval: 30,
            denoiser_width: 16,
            lr: 1e-3,
            lr_pattern: None,
            epochs: 50,
            batch_size: 1,
            calib: 8,
            seed_data: 7,
            seed_init: 11,
            seed_sampling: 13,
            manifest: PathBuf::new(),
            checkpoint_dir: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplingMode::As && self.b_slope.is_none() {
            return Err(Error::Config("AS mode requires b_slope".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if self.slope_a <= 0.0 {
            return Err(Error::Config(format!("slope_a must be > 0, got {}", self.slope_a)));
        }
        if self.k_blocks < 1 || self.n_cg < 1 || self.n_cg_eval < 1 || self.denoiser_width < 1 {
            return Err(Error::Config(
                "k_blocks, n_cg, n_cg_eval, denoiser_width must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::Config("manifest path is required".into()));
        }
        if self.checkpoint_dir.as_os_str().is_empty() {
            return Err(Error::Config("checkpoint_dir is required".into()));
        }
        Ok(())
    }

    pub fn unroll(&self, n_cg: usize) -> Result<UnrollConfig> {
        UnrollConfig::new(self.k_blocks, n_cg, self.denoiser_width)
    }
}

/// Adam optimizer state: first/second moments per leaf plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, RTensor>,
    v: BTreeMap<String, RTensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every parameter in the store.
/// Missing gradients count as zero; non-finite gradients abort with the
/// offending leaf's name.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, RTensor>,
    state: &mut AdamState,
    lr_for: &dyn Fn(&str) -> f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let p = params.get_mut(&name).expect("name from store");
        let zero;
        let g = match grads.get(&name) {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                    });
                }
                g
            }
            None => {
                zero = RTensor::zeros(p.shape());
                &zero
            }
        };
        if !g.all_finite() {
            return Err(Error::NonFinite {
                ctx: format!("gradient of {name}"),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| RTensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| RTensor::zeros(p.shape()));
        let lr = lr_for(&name);
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Per-epoch trace plus the selected checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_psnr: Vec<f64>,
}

pub(crate) fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<(String, KSpaceSample)>> {
    let paths = manifest.paths(root, split);
    if paths.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .strip_prefix(root)
            .unwrap_or(&p)
            .with_extension("")
            .to_string_lossy()
            .into_owned();
        out.push((id, read_sample(&p)?));
    }
    Ok(out)
}

/// Builds the per-sample loss program on a fresh tape and returns
/// (loss value, gradients by name).
#[allow(clippy::too_many_arguments)]
fn sample_step(
    store: &ParamStore,
    sample: &KSpaceSample,
    z: &RTensor,
    cfg: &TrainConfig,
    calib: &BinaryMask,
    unroll: &UnrollConfig,
) -> Result<(f64, BTreeMap<String, RTensor>)> {
    let mut tape = Tape::new();
    let leaves = store.register_all(&mut tape);
    let b = tape.constant(sample.kspace.to_pair());
    let sens = tape.constant(sample.sens.maps().to_pair());
    let label = tape.constant(sample.label.to_pair());

    let p = probability_map_tape(&mut tape, leaves["pattern.w"], cfg.slope_a);
    let pp = renormalize_tape(&mut tape, p, cfg.gamma, calib)?;
    let mask = match cfg.mode {
        SamplingMode::Bs => sample_binary_tape(&mut tape, pp, z)?,
        SamplingMode::As => {
            sample_approx_tape(&mut tape, pp, z, cfg.b_slope.expect("validated"))?
        }
    };
    let outs = modl_forward_tape(&mut tape, b, sens, mask, &leaves, unroll)?;
    let loss = training_loss_tape(&mut tape, &outs, label)?;
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            ctx: format!("training loss (mode {}, gamma {})", cfg.mode, cfg.gamma),
        });
    }
    let grads = tape.backward(loss)?;
    let by_name: BTreeMap<String, RTensor> = leaves
        .iter()
        .filter_map(|(name, &id)| grads.get(id).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok((loss_val, by_name))
}

/// Mean validation PSNR under the deterministic top-gamma pattern. Runs at
/// the training CG depth; the evaluation harness uses n_cg_eval.
fn validation_psnr(
    store: &ParamStore,
    val: &[(String, KSpaceSample)],
    cfg: &TrainConfig,
    calib: &BinaryMask,
) -> Result<f64> {
    let pattern = PatternParams::new(
        store.get("pattern.w").expect("pattern logits").clone(),
        cfg.slope_a,
        cfg.gamma,
        calib.clone(),
    )?;
    let prob = pattern.prob_map()?;
    let mask = topk_pattern(&prob, cfg.gamma, calib)?;
    let unroll = cfg.unroll(cfg.n_cg)?;
    let mut total = 0.0;
    for (_, sample) in val {
        let recon = modl_reconstruct(sample, mask.tensor(), store, &unroll)?;
        total += psnr(&recon, &sample.label)?;
    }
    Ok(total / val.len() as f64)
}

/// End-to-end training loop. Returns the per-epoch trace; the
/// best-validation checkpoint (or the initialization when epochs = 0) is
/// written under `checkpoint_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let root = cfg
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let train_set = load_split(&manifest, &root, Split::Train)?;
    let val_set = load_split(&manifest, &root, Split::Val)?;
    let calib = center_calib_mask(manifest.h, manifest.w, cfg.calib, cfg.calib)?;

    // initialization: denoiser + rho, then pattern logits
    let mut store = ParamStore::new();
    let mut rng_init = Rng::new(cfg.seed_init);
    init_model_params(&mut store, &mut rng_init, cfg.denoiser_width);
    store.insert(
        "pattern.w",
        init_logits(&mut rng_init, manifest.h, manifest.w),
    );
    // fail fast if gamma cannot cover the calibration region
    PatternParams::new(
        store.get("pattern.w").unwrap().clone(),
        cfg.slope_a,
        cfg.gamma,
        calib.clone(),
    )?;

    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let ckpt_path = cfg.checkpoint_dir.join(format!("{}-best.ckpt", cfg.mode));
    let unroll = cfg.unroll(cfg.n_cg)?;
    let mut adam = AdamState::new();
    let lr_fn = |name: &str| -> f64 {
        if name == "pattern.w" {
            cfg.lr_pattern.unwrap_or(cfg.lr)
        } else {
            cfg.lr
        }
    };

    let mut outcome = TrainOutcome {
        checkpoint_path: ckpt_path.clone(),
        best_epoch: 0,
        best_val_psnr: f64::NEG_INFINITY,
        epoch_train_loss: Vec::new(),
        epoch_val_psnr: Vec::new(),
    };

    if cfg.epochs == 0 {
        save_checkpoint(&ckpt_path, cfg, 0, None, &store)?;
        return Ok(outcome);
    }

    let rng_sampling = Rng::new(cfg.seed_sampling);
    for epoch in 0..cfg.epochs {
        let mut rng_e = rng_sampling.derive(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng_e.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grads: BTreeMap<String, RTensor> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (_, sample) = &train_set[idx];
                let z = rng_e.uniform_tensor(&[manifest.h, manifest.w]);
                let (loss_val, grads) = sample_step(&store, sample, &z, cfg, &calib, &unroll)?;
                batch_loss += loss_val;
                for (name, g) in grads {
                    match batch_grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            batch_grads.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;
            adam_step(&mut store, &batch_grads, &mut adam, &lr_fn)?;
        }
        epoch_loss /= train_set.len() as f64;

        let val_psnr = validation_psnr(&store, &val_set, cfg, &calib)?;
        outcome.epoch_train_loss.push(epoch_loss);
        outcome.epoch_val_psnr.push(val_psnr);
        println!(
            "epoch {epoch:3}  train loss {epoch_loss:10.4}  val psnr {val_psnr:7.3} dB{}",
            if val_psnr > outcome.best_val_psnr {
                "  *"
            } else {
                ""
            }
        );
        if val_psnr > outcome.best_val_psnr {
            outcome.best_val_psnr = val_psnr;
            outcome.best_epoch = epoch;
            save_checkpoint(&ckpt_path, cfg, epoch as u64, Some(val_psnr), &store)?;
        }
    }

    let log_path = cfg.checkpoint_dir.join(format!("{}-train-log.json", cfg.mode));
    std::fs::write(&log_path, serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests;
