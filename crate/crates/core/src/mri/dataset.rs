//! On-disk sample format (KSD1) and dataset generation.
//!
//! KSD1 layout, all little-endian:
//! bytes 0-3 magic `KSD1`; u32 N_c, H, W; then three payloads in order:
//! kspace (N_c*H*W complex, interleaved f64 re/im), sens (same layout),
//! label (H*W complex). Row-major throughout. Round trips are bit-exact.
//!
//! The manifest is a JSON file listing relative sample paths with their
//! train/val/test split tags, the generation seed, and the dimensions.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::{
    sense_adjoint, simulate_coils, simulate_phantom, CoilSensitivities, KSpaceSample,
};
use crate::numerics::{fft2c, CTensor, RTensor, Rng};

const MAGIC: &[u8; 4] = b"KSD1";

/// Maximum per-axis dimension accepted when reading; keeps a corrupt header
/// from driving a huge allocation.
const MAX_DIM: u32 = 1 << 20;

pub fn write_sample(path: &Path, sample: &KSpaceSample) -> Result<()> {
    let shape = sample.kspace.shape();
    let (nc, h, w) = (shape[0], shape[1], shape[2]);
    if sample.sens.maps().shape() != [nc, h, w] || sample.label.shape() != [h, w] {
        return Err(Error::Shape {
            op: "write_sample",
            detail: format!(
                "kspace {:?}, sens {:?}, label {:?}",
                shape,
                sample.sens.maps().shape(),
                sample.label.shape()
            ),
        });
    }
    let mut buf = Vec::with_capacity(16 + 16 * (2 * nc * h * w + h * w));
    buf.extend_from_slice(MAGIC);
    for dim in [nc, h, w] {
        let v = u32::try_from(dim).map_err(|_| Error::DimOverflow(format!("dim {dim}")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for tensor in [&sample.kspace, sample.sens.maps(), &sample.label] {
        for z in tensor.data() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<KSpaceSample> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, header needs 16", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "KSD1",
        });
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (nc, h, w) = (dim(4), dim(8), dim(12));
    if nc == 0 || h == 0 || w == 0 || nc > MAX_DIM || h > MAX_DIM || w > MAX_DIM {
        return Err(Error::DimOverflow(format!(
            "{}: header says N_c={nc}, H={h}, W={w}",
            path.display()
        )));
    }
    let (nc, h, w) = (nc as usize, h as usize, w as usize);
    let n_complex = 2 * nc * h * w + h * w;
    let expect = 16 + 16 * n_complex;
    if bytes.len() != expect {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, expected {expect}", bytes.len()),
        });
    }
    let mut off = 16;
    let mut take = |count: usize| -> Vec<Complex64> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            let im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
            out.push(Complex64::new(re, im));
            off += 16;
        }
        out
    };
    let kspace = CTensor::from_vec(&[nc, h, w], take(nc * h * w))?;
    let sens = CoilSensitivities::new(CTensor::from_vec(&[nc, h, w], take(nc * h * w))?)?;
    let label = CTensor::from_vec(&[h, w], take(h * w))?;
    Ok(KSpaceSample {
        kspace,
        sens,
        label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub h: usize,
    pub w: usize,
    pub n_c: usize,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_reader(fs::File::open(path)?)?;
        manifest.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Splits must be consistently tagged and every listed file must exist.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.samples {
            if !seen.insert(&entry.path) {
                return Err(Error::Dataset(format!(
                    "duplicate sample path {}",
                    entry.path
                )));
            }
            let full = root.join(&entry.path);
            if !full.is_file() {
                return Err(Error::Dataset(format!("missing file {}", full.display())));
            }
        }
        Ok(())
    }

    pub fn paths(&self, root: &Path, split: Split) -> Vec<PathBuf> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| root.join(&e.path))
            .collect()
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    pub n_c: usize,
    pub seed: u64,
    /// Std of optional additive complex Gaussian noise on the fully sampled
    /// k-space, per real component. 0 disables it.
    #[serde(default)]
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_val: 5,
            n_test: 10,
            h: 64,
            w: 64,
            n_c: 4,
            seed: 7,
            noise_std: 0.0,
        }
    }
}

/// Generates phantom + coil samples, writes one KSD1 file per sample plus a
/// `manifest.json`, and returns the manifest. Deterministic in the config.
pub fn build_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let master = Rng::new(config.seed);
    let counts = [
        (Split::Train, config.n_train),
        (Split::Val, config.n_val),
        (Split::Test, config.n_test),
    ];
    let mut samples = Vec::new();
    let mut global_idx = 0u64;
    for (split, count) in counts {
        let dir = out_dir.join(split.to_string());
        fs::create_dir_all(&dir)?;
        for i in 0..count {
            let mut rng = master.derive(global_idx);
            global_idx += 1;
            let sample = generate_sample(&mut rng, config)?;
            let rel = format!("{split}/{i:04}.ksd");
            write_sample(&out_dir.join(&rel), &sample)?;
            samples.push(ManifestEntry { path: rel, split });
        }
    }
    let manifest = DatasetManifest {
        h: config.h,
        w: config.w,
        n_c: config.n_c,
        seed: config.seed,
        samples,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn generate_sample(rng: &mut Rng, config: &GenConfig) -> Result<KSpaceSample> {
    let phantom = simulate_phantom(rng, config.h, config.w)?;
    let sens = simulate_coils(rng, config.h, config.w, config.n_c)?;
    let mut kspace = CTensor::zeros(&[config.n_c, config.h, config.w]);
    for j in 0..config.n_c {
        let weighted = CTensor::from_vec(
            &[config.h, config.w],
            phantom
                .data()
                .iter()
                .zip(sens.maps().block(j))
                .map(|(x, s)| x * s)
                .collect(),
        )?;
        let ksp = fft2c(&weighted)?;
        kspace.block_mut(j).copy_from_slice(ksp.data());
    }
    if config.noise_std > 0.0 {
        for z in kspace.data_mut() {
            *z += Complex64::new(
                config.noise_std * rng.normal(),
                config.noise_std * rng.normal(),
            );
        }
    }
    // the label is the adjoint coil combination of its own k-space, so the
    // consistency invariant holds bit-exactly
    let ones = RTensor::full(&[config.h, config.w], 1.0);
    let label = sense_adjoint(&kspace, &sens, &ones)?;
    Ok(KSpaceSample {
        kspace,
        sens,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn sample_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::new(3);
        let sample = generate_sample(&mut rng, &GenConfig::default()).unwrap();
        let path = dir.path().join("s.ksd");
        write_sample(&path, &sample).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(back, sample);
    }

    #[test]
    fn corrupted_magic_is_detected() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::new(4);
        let cfg = GenConfig {
            h: 16,
            w: 16,
            n_c: 2,
            ..Default::default()
        };
        let sample = generate_sample(&mut rng, &cfg).unwrap();
        let path = dir.path().join("s.ksd");
        write_sample(&path, &sample).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_sample(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::new(5);
        let cfg = GenConfig {
            h: 16,
            w: 16,
            n_c: 2,
            ..Default::default()
        };
        let sample = generate_sample(&mut rng, &cfg).unwrap();
        let path = dir.path().join("s.ksd");
        write_sample(&path, &sample).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_sample(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn absurd_header_dims_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.ksd");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"KSD1");
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&16u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sample(&path), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn build_dataset_writes_disjoint_splits_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let cfg = GenConfig {
            n_train: 4,
            n_val: 2,
            n_test: 3,
            h: 16,
            w: 16,
            n_c: 2,
            seed: 11,
            noise_std: 0.0,
        };
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 9);
        let train = manifest.paths(dir.path(), Split::Train);
        let val = manifest.paths(dir.path(), Split::Val);
        let test = manifest.paths(dir.path(), Split::Test);
        assert_eq!((train.len(), val.len(), test.len()), (4, 2, 3));
        manifest.validate(dir.path()).unwrap();

        // identical config twice: identical manifest and files
        let dir2 = tempdir().unwrap();
        let manifest2 = build_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(manifest, manifest2);
        for entry in &manifest.samples {
            let a = fs::read(dir.path().join(&entry.path)).unwrap();
            let b = fs::read(dir2.path().join(&entry.path)).unwrap();
            assert_eq!(a, b, "{}", entry.path);
        }
    }

    #[test]
    fn labels_are_consistent_with_kspace() {
        let dir = tempdir().unwrap();
        let cfg = GenConfig {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            h: 32,
            w: 32,
            n_c: 3,
            seed: 13,
            noise_std: 0.0,
        };
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        for entry in &manifest.samples {
            let s = read_sample(&dir.path().join(&entry.path)).unwrap();
            let ones = RTensor::full(&[cfg.h, cfg.w], 1.0);
            let recombined = sense_adjoint(&s.kspace, &s.sens, &ones).unwrap();
            let err: f64 = recombined
                .data()
                .iter()
                .zip(s.label.data())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-10 * s.label.norm2().max(1.0));
        }
    }

    #[test]
    fn manifest_validation_catches_missing_files() {
        let dir = tempdir().unwrap();
        let cfg = GenConfig {
            n_train: 1,
            n_val: 1,
            n_test: 1,
            h: 16,
            w: 16,
            n_c: 1,
            seed: 2,
            noise_std: 0.0,
        };
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        fs::remove_file(dir.path().join(&manifest.samples[0].path)).unwrap();
        assert!(manifest.validate(dir.path()).is_err());
    }
}
