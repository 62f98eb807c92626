//! Binary checkpoint: magic `MMFL`, `u16` version, `u32` length + JSON
//! config, `u32` parameter count, then per parameter `u32` name length,
//! name bytes, `u32` rank, `u64` extents and `f64` values. All integers and
//! floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMFL";
pub const CHECKPOINT_VERSION: u16 = 1;

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(self.config())?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.params().len() as u32).to_le_bytes());
        for (name, t) in self.params().iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let mut model = Model::new(config, 0).map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let count = r.u32()? as usize;
        if count != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} parameters, model has {}",
                model.params().len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("parameter `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.params_mut().assign(&name, &shape, data)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("parameter `{name}` appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::from_checkpoint_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Family;

    fn small() -> Model {
        let cfg = ModelConfig {
            model_dim: 4,
            heads: 2,
            ff_dim: 4,
            head_hidden_dim: 4,
            encoder_layers: 1,
            vocab_size: 8,
            max_text_len: 4,
            num_regions: 2,
            region_feature_dim: 3,
            num_classes: 3,
            ..ModelConfig::desk(Family::DualStreamLateFusion)
        };
        Model::new(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = small();
        let bytes = m.to_checkpoint_bytes().unwrap();
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((n1, t1), (n2, t2)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = small().to_checkpoint_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Model::from_checkpoint_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bytes = small().to_checkpoint_bytes().unwrap();
        bytes[4] = 9;
        assert!(Model::from_checkpoint_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn every_truncation_rejected() {
        let bytes = small().to_checkpoint_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                Model::from_checkpoint_bytes(&bytes[..cut]).is_err(),
                "prefix {cut} accepted"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Model::from_checkpoint_bytes(&longer).is_err());
    }
}
