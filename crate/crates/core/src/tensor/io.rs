//! Flat binary tensor format used by dataset and checkpoint files.
//!
//! Record layout: 8-byte magic `SNRT0001`, little-endian u32 rank,
//! u32 dims[rank], then the little-endian f32 payload. Files may hold one
//! record or an ordered concatenation of records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, TensorData};

pub const MAGIC: &[u8; 8] = b"SNRT0001";

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &TensorData<S>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Corruption {
        path: path.to_path_buf(),
        reason: format!("truncated while reading {what}"),
    })
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R, path: &Path) -> Result<TensorData<S>> {
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {magic:?}, expected SNRT0001"),
        });
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_corrupt(r, &mut u32buf, path, "rank")?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        read_exact_or_corrupt(r, &mut u32buf, path, "dims")?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n = numel(&shape);
    let mut payload = vec![0u8; n * 4];
    read_exact_or_corrupt(r, &mut payload, path, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| S::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    TensorData::new(shape, data)
}

/// Write one tensor per file.
pub fn save_tensor<S: Scalar>(path: &Path, t: &TensorData<S>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<TensorData<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r, path)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "trailing bytes after single tensor record".to_string(),
        });
    }
    Ok(t)
}

/// Ordered concatenation of records, as used by checkpoints.
pub fn save_tensors<S: Scalar>(path: &Path, ts: &[&TensorData<S>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in ts {
        write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_tensors<S: Scalar>(path: &Path) -> Result<Vec<TensorData<S>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    loop {
        let mut probe = [0u8; 1];
        match r.read(&mut probe).map_err(|e| Error::io(path, e))? {
            0 => break,
            _ => {
                let mut chained = probe.as_slice().chain(&mut r);
                out.push(read_tensor(&mut chained, path)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn round_trip_identity_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.snrt");
        let mut rng = StreamRng::from_seed(1);
        let t = TensorData::<f32>::uniform(vec![3, 4, 2], -1.0, 1.0, &mut rng);
        save_tensor(&p, &t).unwrap();
        let back: TensorData<f32> = load_tensor(&p).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rank_zero_scalar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.snrt");
        let t = TensorData::<f64>::scalar(0.5);
        save_tensor(&p, &t).unwrap();
        let back: TensorData<f64> = load_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[0.5]);
    }

    #[test]
    fn truncated_file_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.snrt");
        let t = TensorData::<f32>::filled(vec![4, 4], 1.0);
        save_tensor(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        let r: Result<TensorData<f32>> = load_tensor(&p);
        assert!(matches!(r, Err(Error::Corruption { .. })), "{r:?}");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.snrt");
        std::fs::write(&p, b"NOTSNRT0____").unwrap();
        let r: Result<TensorData<f32>> = load_tensor(&p);
        assert!(matches!(r, Err(Error::Format { .. })), "{r:?}");
    }

    #[test]
    fn concatenated_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("many.snrt");
        let a = TensorData::<f32>::filled(vec![2, 2], 1.5);
        let b = TensorData::<f32>::filled(vec![3], -0.25);
        save_tensors(&p, &[&a, &b]).unwrap();
        let back: Vec<TensorData<f32>> = load_tensors(&p).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
