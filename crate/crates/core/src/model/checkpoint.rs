//! Binary model checkpoints with integrity verification.
//!
//! Layout: magic, format version, architecture JSON, then each layer's
//! weight and bias values as little-endian f64, then the identity hash of
//! the saved model. Loading recomputes the hash from the decoded values and
//! refuses checkpoints whose content does not match.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Arch, Model, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FPSCKPT\0";
const VERSION: u32 = 1;

impl Model {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let arch = serde_json::to_vec(self.arch())
            .map_err(|e| Error::data(format!("architecture does not serialize: {e}")))?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(&arch)?;
        let params = self.param_set();
        w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
        for (weight, bias) in &params.layers {
            w.write_all(&(weight.len() as u64).to_le_bytes())?;
            for v in weight {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(bias.len() as u64).to_le_bytes())?;
            for v in bias {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let hash = self.hash().as_bytes();
        w.write_all(&(hash.len() as u32).to_le_bytes())?;
        w.write_all(hash)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
            path: path.display().to_string(),
            offset: 0,
        };
        let mut magic = [0u8; 8];
        r.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(r.bad(8, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(r.bad(4, format!("unsupported checkpoint version {version}")));
        }
        let arch_len = r.u32("architecture length")? as usize;
        if arch_len > 1 << 20 {
            return Err(r.bad(4, format!("unreasonable architecture length {arch_len}")));
        }
        let mut arch_bytes = vec![0u8; arch_len];
        r.fill(&mut arch_bytes, "architecture json")?;
        let arch: Arch = serde_json::from_slice(&arch_bytes)
            .map_err(|e| r.bad(arch_len as u64, format!("architecture json: {e}")))?;
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 || n_layers > u16::MAX as usize {
            return Err(r.bad(4, format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let wl = r.u64(&format!("layer {i} weight count"))? as usize;
            let weight = r.f64_block(wl, &format!("layer {i} weights"))?;
            let bl = r.u64(&format!("layer {i} bias count"))? as usize;
            let bias = r.f64_block(bl, &format!("layer {i} biases"))?;
            layers.push((weight, bias));
        }
        let hash_len = r.u32("hash length")? as usize;
        if hash_len != 16 {
            return Err(r.bad(4, format!("hash length {hash_len}, expected 16")));
        }
        let mut hash_bytes = vec![0u8; hash_len];
        r.fill(&mut hash_bytes, "identity hash")?;
        let stored = String::from_utf8(hash_bytes)
            .map_err(|_| r.bad(16, "identity hash is not utf-8"))?;

        let model = Model::from_param_set(&arch, ParamSet { layers })?;
        if model.hash() != stored {
            return Err(Error::data(format!(
                "checkpoint {} failed verification: stored hash {stored}, recomputed {}",
                path.display(),
                model.hash()
            )));
        }
        Ok(model)
    }
}

struct Reader {
    inner: BufReader<File>,
    path: String,
    offset: u64,
}

impl Reader {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            path: self.path.clone(),
            offset: self.offset,
            msg: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64_block(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        if count > 1 << 28 {
            return Err(self.bad(8, format!("{what}: implausible element count {count}")));
        }
        let mut bytes = vec![0u8; count * 8];
        self.fill(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    /// A parse error pointing at the start of the field that just failed.
    fn bad(&self, field_len: u64, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.offset.saturating_sub(field_len),
            msg: msg.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn checkpoint_round_trip_restores_model_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::mini_transformer(4, 8, 3, 5, 123).unwrap();
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.hash(), m.hash());
        assert_eq!(loaded.arch(), m.arch());
        let x = Tensor::new((0..20).map(|i| i as f64 * 0.1 - 1.0).collect(), &[1, 20]).unwrap();
        assert_eq!(
            loaded.forward(&x).unwrap().to_vec(),
            m.forward(&x).unwrap().to_vec(),
            "reloaded model predicts differently"
        );
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::mlp(&[4, 3, 2], 9).unwrap();
        m.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip a parameter byte in the middle of the file
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = Model::load_checkpoint(&path).unwrap_err();
        assert_eq!(err.category(), "data", "tampering surfaced as: {err}");
    }

    #[test]
    fn truncated_checkpoint_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::mlp(&[4, 3, 2], 9).unwrap();
        m.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..40]).unwrap();
        match Model::load_checkpoint(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset <= 40, "offset {offset} past truncation"),
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn garbage_file_is_a_parse_error_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        match Model::load_checkpoint(&path).unwrap_err() {
            Error::Parse { offset, msg, .. } => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"), "message was: {msg}");
            }
            other => panic!("expected a parse error, got {other}"),
        }
    }
}
