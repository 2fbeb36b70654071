//! Checkpoint files: JSON header + raw f64 tensor payloads.
//!
//! Layout, little-endian: magic `KLC1`, u32 header length, the UTF-8 JSON
//! header (config, epoch, validation PSNR, tensor manifest), then each
//! tensor's f64 data in manifest order. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::RTensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"KLC1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: u64,
    /// None when no validation has run (epochs = 0).
    val_psnr: Option<f64>,
    tensors: Vec<TensorDesc>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub val_psnr: Option<f64>,
    pub params: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    epoch: u64,
    val_psnr: Option<f64>,
    params: &ParamStore,
) -> Result<()> {
    let tensors: Vec<TensorDesc> = params
        .iter()
        .map(|(name, t)| TensorDesc {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        config: config.clone(),
        epoch,
        val_psnr,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let len = u32::try_from(header_json.len())
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "shorter than the fixed header".into(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "KLC1",
        });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "JSON header cut short".into(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
    let mut off = 8 + hlen;
    let mut params = ParamStore::new();
    for desc in &header.tensors {
        let n: usize = desc.shape.iter().product();
        let end = off + 8 * n;
        if bytes.len() < end {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("payload for {} cut short", desc.name),
            });
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f64::from_le_bytes(
                bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap(),
            ));
        }
        params.insert(desc.name.clone(), RTensor::from_vec(&desc.shape, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        val_psnr: header.val_psnr,
        params,
    })
}
