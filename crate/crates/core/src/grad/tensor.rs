//! Dense row-major f64 tensor and its binary file format.
//!
//! Files start with the magic bytes `TNSR`, then a little-endian u32 rank,
//! `rank` little-endian u32 dimensions, and the elements as little-endian
//! f64 in row-major order.

use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"TNSR";
// Ranks above this are always a corrupted header in practice.
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {shape:?} wants {want} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Shape as `[n, c, h, w]` for ops that require rank 4.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-4 NCHW tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(file);
        let ctx = || format!("write {}", path.display());
        w.write_all(&MAGIC).map_err(|e| Error::io(ctx(), e))?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(ctx(), e))?;
        for &dim in &self.shape {
            w.write_all(&(dim as u32).to_le_bytes())
                .map_err(|e| Error::io(ctx(), e))?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::TensorFormat {
            path: path.to_path_buf(),
            detail,
        };
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut r = std::io::BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated before magic".into()))?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }

        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("truncated before rank".into()))?;
        let rank = u32::from_le_bytes(u32buf);
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} exceeds supported {MAX_RANK}")));
        }

        let mut shape = Vec::with_capacity(rank as usize);
        for i in 0..rank {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad(format!("truncated in dimension {i}")))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("element count overflows for shape {shape:?}")))?;

        let mut data = vec![0.0f64; len];
        let mut f64buf = [0u8; 8];
        for (i, slot) in data.iter_mut().enumerate() {
            r.read_exact(&mut f64buf)
                .map_err(|_| bad(format!("truncated in element {i} of {len}")))?;
            *slot = f64::from_le_bytes(f64buf);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io("read", e))? != 0 {
            return Err(bad(format!("trailing bytes after {len} elements")));
        }
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn round_trip_preserves_shape_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::new(
            vec![2, 1, 2, 2],
            vec![1.5, -0.25, 0.0, f64::MIN_POSITIVE, 3.0, -1e300, 0.1, 7.0],
        )
        .unwrap();
        t.save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn file_bytes_are_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"TNSR");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn scalar_round_trips_with_rank_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tnsr");
        Tensor::scalar(4.25).save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), &[4.25]);
    }

    #[test]
    fn corrupted_files_are_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("magic.tnsr");
        std::fs::write(&bad_magic, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = Tensor::load(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let truncated = dir.path().join("short.tnsr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TNSR");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        std::fs::write(&truncated, &bytes).unwrap();
        let err = Tensor::load(&truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let trailing = dir.path().join("long.tnsr");
        bytes.extend_from_slice(&2.0f64.to_le_bytes());
        bytes.extend_from_slice(&3.0f64.to_le_bytes());
        bytes.push(0);
        std::fs::write(&trailing, &bytes).unwrap();
        let err = Tensor::load(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
