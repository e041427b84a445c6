//! Little-endian checkpoint format:
//!
//! ```text
//! "AMDN"  u32 version
//! u32 len, config text (key=value lines, includes param_count)
//! u32 tensor count, then per tensor:
//!     u32 len, name   u32 ndim   u64 × ndim extents   f64 × numel values
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMDN";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = format!("{}param_count={}\n", self.config.to_text(), self.parameter_count());
        put_bytes(&mut out, text.as_bytes());
        let params = self.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in &params {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)?;
        let declared: Option<usize> = text
            .lines()
            .find_map(|l| l.strip_prefix("param_count="))
            .and_then(|v| v.trim().parse().ok());

        let count = r.u32()? as usize;
        let mut blobs = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blobs.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut model = Model::new(config, 0)?;
        let mut problem = None;
        let mut used = 0;
        model.visit_mut("", &mut |name, t| match blobs.get(name) {
            Some(b) if b.shape() == t.shape() => {
                *t = b.clone().requires_grad_();
                used += 1;
            }
            Some(b) => {
                problem.get_or_insert(format!("{name}: stored shape {:?}, model expects {:?}", b.shape(), t.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if used != blobs.len() {
            return Err(Error::Checkpoint(format!("{} unknown tensors", blobs.len() - used)));
        }
        if let Some(d) = declared {
            if d != model.parameter_count() {
                return Err(Error::Checkpoint(format!(
                    "header declares {d} parameters, tensors hold {}",
                    model.parameter_count()
                )));
            }
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Parameter count declared in a checkpoint header, without loading tensors.
pub fn declared_param_count(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    r.u32()?;
    let len = r.u32()? as usize;
    let text = String::from_utf8_lossy(r.take(len)?).into_owned();
    text.lines()
        .find_map(|l| l.strip_prefix("param_count="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Checkpoint("header has no param_count".into()))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        Model::new(ModelConfig { input_size: 32, width_multiplier: 0.125, ..Default::default() }, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.amdn");
        m.save_checkpoint(&path).unwrap();
        let back = Model::load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        let x = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        for (p, q) in a.detection.iter().zip(&b.detection) {
            assert_eq!(p.to_vec(), q.to_vec());
        }
        assert_eq!(a.seg_logits.to_vec(), b.seg_logits.to_vec());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Model::from_bytes(&v2).unwrap_err().to_string().contains("version"));
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }

    #[test]
    fn header_count_matches_enumeration() {
        let m = tiny();
        let enumerated: usize = m.parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(declared_param_count(&m.to_bytes()).unwrap(), enumerated);
    }
}
