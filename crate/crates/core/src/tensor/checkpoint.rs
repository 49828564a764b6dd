//! Binary parameter files: an 8-byte magic, a little-endian `u32` format
//! version, a `u64` manifest length, a JSON manifest of names and shapes,
//! then every tensor's values as little-endian f64 in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SAMPFAW\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint parameter {name}: {reason}")]
    Mismatch { name: String, reason: String },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_params<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let manifest: Vec<Entry> = params
        .iter()
        .map(|(name, t)| Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in params {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
    r.read_exact(&mut json)?;
    let manifest: Vec<Entry> = serde_json::from_slice(&json)?;
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64b)?;
            data.push(f64::from_le_bytes(u64b));
        }
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Mismatch {
            name: e.name.clone(),
            reason: err.to_string(),
        })?;
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    write_params(BufWriter::new(File::create(path)?), params)
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    read_params(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let params = vec![
            ("w".to_string(), Tensor::from_rows(&[[0.1, -2.5e-300], [f64::MAX, 1.0 / 3.0]])),
            ("b".to_string(), Tensor::scalar(-0.0)),
            ("empty".to_string(), Tensor::zeros(&[0, 4])),
        ];
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in params.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(matches!(read_params(&b"NOTAFILE0000"[..]), Err(CheckpointError::Magic)));
        let mut buf = Vec::new();
        write_params(&mut buf, &[("w".into(), Tensor::from_rows(&[[1.0, 2.0]]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params(buf.as_slice()), Err(CheckpointError::Io(_))));
    }
}
