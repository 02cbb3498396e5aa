//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MSCIBCKP"
//! version    u32      1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   rows     u64
//!   cols     u64
//!   data     rows*cols f64, row-major
//! has_rng    u8       0 or 1
//!   seed     32 bytes            (ChaCha key)
//!   stream   u64
//!   word_pos u128
//! ```
//!
//! No trailing bytes are allowed.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Result};

pub const MAGIC: &[u8; 8] = b"MSCIBCKP";
pub const VERSION: u32 = 1;

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>)>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta(key).ok_or_else(|| CheckpointError::Tensor {
            name: key.to_string(),
            message: "missing metadata entry".into(),
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let at = r.pos;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows.checked_mul(cols).ok_or(CheckpointError::Malformed {
                offset: at,
                message: "tensor size overflows".into(),
            })?;
            let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated { offset: at })?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| {
                CheckpointError::Malformed {
                    offset: at,
                    message: e.to_string(),
                }
            })?;
            tensors.push((name, t));
        }
        let flag_at = r.pos;
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
            other => {
                return Err(CheckpointError::Malformed {
                    offset: flag_at,
                    message: format!("rng flag {other}"),
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                message: "trailing bytes".into(),
            });
        }
        Ok(Self { meta, tensors, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { offset: self.pos })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed {
            offset: at,
            message: "invalid UTF-8".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        Checkpoint {
            meta: vec![("epoch".into(), "3".into())],
            tensors: vec![
                ("a".into(), array![[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]]),
                ("empty".into(), Array2::zeros((0, 4))),
            ],
            rng: Some(RngState::capture(&rng)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.rng, ck.rng);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dim(), t2.dim());
            for (x, y) in t1.iter().zip(t2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn restored_rng_continues_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = bytes.len() - 5;
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(CheckpointError::Truncated { offset }) => assert!(offset <= cut),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Malformed { .. })
        ));
    }
}
