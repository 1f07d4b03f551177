//! Binary tensor dump: a magic tag, then per tensor a name, shape, dtype
//! tag, and row-major little-endian f64 data. Stable across runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

const MAGIC: &[u8; 8] = b"RPRTNSR1";
const DTYPE_F64_LE: u8 = 1;

pub fn write_checkpoint(path: &Path, tensors: &[(&str, &Matrix)]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        w.write_all(&[DTYPE_F64_LE])?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a tensor checkpoint".into()));
    }
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)?;
    let count = u32::from_le_bytes(count_buf);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".into()))?;
        let mut u64_buf = [0u8; 8];
        r.read_exact(&mut u64_buf)?;
        let rows = u64::from_le_bytes(u64_buf) as usize;
        r.read_exact(&mut u64_buf)?;
        let cols = u64::from_le_bytes(u64_buf) as usize;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64_LE {
            return Err(Error::Checkpoint(format!("unsupported dtype tag {}", dtype[0])));
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut f64_buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut f64_buf)?;
            data.push(f64::from_le_bytes(f64_buf));
        }
        out.push((
            name,
            Matrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        ));
    }
    Ok(out)
}

/// Convenience lookup after `read_checkpoint`.
pub fn take_tensor(tensors: &mut Vec<(String, Matrix)>, name: &str) -> Result<Matrix> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} missing from checkpoint")))?;
    Ok(tensors.remove(idx).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let b = Matrix::random_normal(7, 2, 0.3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &[("a", &a), ("b", &b)]).unwrap();
        let mut tensors = read_checkpoint(&path).unwrap();
        assert_eq!(tensors.len(), 2);
        let a_back = take_tensor(&mut tensors, "a").unwrap();
        let b_back = take_tensor(&mut tensors, "b").unwrap();
        for (x, y) in a.data().iter().zip(a_back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in b.data().iter().zip(b_back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMAGIC????").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_tensor_lookup_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ckpt");
        let m = Matrix::zeros(1, 1);
        write_checkpoint(&path, &[("only", &m)]).unwrap();
        let mut tensors = read_checkpoint(&path).unwrap();
        assert!(take_tensor(&mut tensors, "absent").is_err());
    }
}
