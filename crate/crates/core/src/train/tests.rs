use std::collections::BTreeMap;
use std::path::PathBuf;

use tempfile::tempdir;

use super::*;
use crate::mri::{build_dataset, GenConfig};

fn scalar_store(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("p", RTensor::scalar(v));
    s
}

fn grad_map(name: &str, g: RTensor) -> BTreeMap<String, RTensor> {
    let mut m = BTreeMap::new();
    m.insert(name.to_string(), g);
    m
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut store = scalar_store(1.0);
    let mut state = AdamState::new();
    let lr = 0.1;
    adam_step(&mut store, &grad_map("p", RTensor::scalar(0.5)), &mut state, &|_| lr).unwrap();
    // bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
    let p = store.get("p").unwrap().item();
    assert!((p - (1.0 - lr)).abs() < lr * 1e-6, "p = {p}");
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut store = scalar_store(2.5);
    let mut state = AdamState::new();
    for _ in 0..5 {
        adam_step(&mut store, &grad_map("p", RTensor::scalar(0.0)), &mut state, &|_| 0.1).unwrap();
    }
    assert_eq!(store.get("p").unwrap().item(), 2.5);
}

#[test]
fn adam_matches_hand_stepped_trace() {
    // constant gradient: m_hat = g and v_hat = g^2 exactly, so each step
    // subtracts lr * g / (g + eps); three steps from p0 = 1, g = 0.1, lr = 0.1
    let mut store = scalar_store(1.0);
    let mut state = AdamState::new();
    let (g, lr) = (0.1, 0.1);
    let per_step = lr * g / (g + 1e-8);
    for step in 1..=3 {
        adam_step(&mut store, &grad_map("p", RTensor::scalar(g)), &mut state, &|_| lr).unwrap();
        let want = 1.0 - step as f64 * per_step;
        let got = store.get("p").unwrap().item();
        assert!((got - want).abs() < 1e-12, "step {step}: {got} vs {want}");
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = scalar_store(0.0);
    let mut state = AdamState::new();
    let err = adam_step(
        &mut store,
        &grad_map("p", RTensor::scalar(f64::NAN)),
        &mut state,
        &|_| 0.1,
    )
    .unwrap_err();
    assert!(err.to_string().contains('p'), "{err}");
}

fn tiny_cfg(manifest: PathBuf, dir: PathBuf) -> TrainConfig {
    TrainConfig {
        mode: SamplingMode::Bs,
        gamma: 0.2,
        slope_a: 0.25,
        b_slope: None,
        k_blocks: 2,
        n_cg: 3,
        n_cg_eval: 5,
        denoiser_width: 4,
        lr: 1e-3,
        lr_pattern: None,
        epochs: 1,
        batch_size: 1,
        calib: 4,
        seed_data: 3,
        seed_init: 5,
        seed_sampling: 9,
        manifest,
        checkpoint_dir: dir,
    }
}

fn tiny_dataset(dir: &std::path::Path) -> PathBuf {
    let gen = GenConfig {
        n_train: 2,
        n_val: 1,
        n_test: 1,
        h: 16,
        w: 16,
        n_c: 2,
        seed: 3,
        noise_std: 0.0,
    };
    build_dataset(&gen, dir).unwrap();
    dir.join("manifest.json")
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let data = tempdir().unwrap();
    let ck = tempdir().unwrap();
    let manifest = tiny_dataset(data.path());
    let mut cfg = tiny_cfg(manifest, ck.path().to_path_buf());
    cfg.epochs = 0;
    let outcome = train(&cfg).unwrap();

    let loaded = load_checkpoint(&outcome.checkpoint_path).unwrap();
    assert_eq!(loaded.epoch, 0);
    assert!(loaded.val_psnr.is_none());

    // rebuild the initialization exactly as train() does
    let mut store = ParamStore::new();
    let mut rng_init = Rng::new(cfg.seed_init);
    init_model_params(&mut store, &mut rng_init, cfg.denoiser_width);
    store.insert("pattern.w", init_logits(&mut rng_init, 16, 16));
    assert_eq!(loaded.params, store);
}

#[test]
fn one_training_step_moves_pattern_logits_with_binary_mask() {
    let data = tempdir().unwrap();
    let ck = tempdir().unwrap();
    let manifest_path = tiny_dataset(data.path());
    let cfg = tiny_cfg(manifest_path.clone(), ck.path().to_path_buf());

    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    let root = manifest_path.parent().unwrap();
    let train_set = load_split(&manifest, root, Split::Train).unwrap();
    let calib = center_calib_mask(16, 16, cfg.calib, cfg.calib).unwrap();

    let mut store = ParamStore::new();
    let mut rng_init = Rng::new(cfg.seed_init);
    init_model_params(&mut store, &mut rng_init, cfg.denoiser_width);
    store.insert("pattern.w", init_logits(&mut rng_init, 16, 16));
    let w_before = store.get("pattern.w").unwrap().clone();

    let unroll = cfg.unroll(cfg.n_cg).unwrap();
    let mut rng = Rng::new(cfg.seed_sampling);
    let z = rng.uniform_tensor(&[16, 16]);
    let (loss, grads) = sample_step(&store, &train_set[0].1, &z, &cfg, &calib, &unroll).unwrap();
    assert!(loss > 0.0);
    let gw = grads.get("pattern.w").expect("pattern gradient present");
    assert!(gw.norm2() > 0.0, "ST path carried no gradient");

    let mut adam = AdamState::new();
    adam_step(&mut store, &grads, &mut adam, &|_| cfg.lr).unwrap();
    let w_after = store.get("pattern.w").unwrap();
    let delta: f64 = w_after
        .data()
        .iter()
        .zip(w_before.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(delta > 0.0, "logits did not move");
}

#[test]
fn training_is_deterministic_and_checkpoint_round_trips() {
    let data = tempdir().unwrap();
    let manifest = tiny_dataset(data.path());

    // identical config including paths: rerun into the same directory
    let ck1 = tempdir().unwrap();
    let run = || -> Vec<u8> {
        let mut cfg = tiny_cfg(manifest.clone(), ck1.path().to_path_buf());
        cfg.epochs = 2;
        train(&cfg).unwrap();
        std::fs::read(ck1.path().join("bs-best.ckpt")).unwrap()
    };
    let bytes1 = run();
    std::fs::remove_file(ck1.path().join("bs-best.ckpt")).unwrap();
    let bytes2 = run();
    assert_eq!(bytes1, bytes2, "training is not deterministic");

    let loaded = load_checkpoint(&ck1.path().join("bs-best.ckpt")).unwrap();
    let resaved = ck1.path().join("resave.ckpt");
    save_checkpoint(
        &resaved,
        &loaded.config,
        loaded.epoch,
        loaded.val_psnr,
        &loaded.params,
    )
    .unwrap();
    assert_eq!(bytes1, std::fs::read(&resaved).unwrap());
}

#[test]
fn as_mode_requires_b_slope_and_runs() {
    let data = tempdir().unwrap();
    let ck = tempdir().unwrap();
    let manifest = tiny_dataset(data.path());
    let mut cfg = tiny_cfg(manifest, ck.path().to_path_buf());
    cfg.mode = SamplingMode::As;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.b_slope = Some(12.0);
    cfg.epochs = 1;
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.epoch_train_loss.len(), 1);
    assert!(outcome.checkpoint_path.ends_with("as-best.ckpt"));
}

#[test]
fn config_json_round_trip_is_bit_exact_and_rejects_unknown_keys() {
    let mut cfg = TrainConfig::desk_default();
    cfg.manifest = PathBuf::from("data/manifest.json");
    cfg.checkpoint_dir = PathBuf::from("ckpt");
    cfg.lr = 0.1234567890123457;
    let j1 = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&j1).unwrap();
    assert_eq!(back, cfg);
    let j2 = serde_json::to_string(&back).unwrap();
    assert_eq!(j1, j2);

    let with_unknown = j1.replace("\"mode\"", "\"bogus_key\":1,\"mode\"");
    assert!(serde_json::from_str::<TrainConfig>(&with_unknown).is_err());
}
