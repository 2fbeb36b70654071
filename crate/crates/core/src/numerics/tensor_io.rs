//! Raw real-tensor files (KST1), used for pattern export and exact reuse.
//!
//! Layout, little-endian: magic `KST1`, u32 rank, u32 dims[rank], then the
//! f64 payload row-major. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RTensor;

const MAGIC: &[u8; 4] = b"KST1";
const MAX_RANK: u32 = 8;
const MAX_DIM: u32 = 1 << 20;

pub fn write_rtensor(path: &Path, t: &RTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    let rank = u32::try_from(t.shape().len())
        .ok()
        .filter(|&r| r <= MAX_RANK)
        .ok_or_else(|| Error::DimOverflow(format!("rank {}", t.shape().len())))?;
    buf.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let v = u32::try_from(d).map_err(|_| Error::DimOverflow(format!("dim {d}")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_rtensor(path: &Path) -> Result<RTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, header needs 8", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "KST1",
        });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::DimOverflow(format!("rank {rank}")));
    }
    let rank = rank as usize;
    if bytes.len() < 8 + 4 * rank {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "header dims cut short".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if d == 0 || d > MAX_DIM {
            return Err(Error::DimOverflow(format!("dim {d}")));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let payload = 8 + 4 * rank;
    if bytes.len() != payload + 8 * n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} bytes, expected {}", bytes.len(), payload + 8 * n),
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = payload + 8 * i;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    RTensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kst");
        let t = RTensor::from_vec(&[3, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        write_rtensor(&path, &t).unwrap();
        assert_eq!(read_rtensor(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kst");
        let t = RTensor::full(&[4], 1.0);
        write_rtensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_rtensor(&path), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_rtensor(&path), Err(Error::BadMagic { .. })));
    }
}
