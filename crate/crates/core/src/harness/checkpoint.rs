//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAMT"            magic
//! u32               format version
//! u64 + bytes       experiment config as UTF-8 JSON
//! u32               parameter count
//! per parameter:
//!   u32 + bytes     name
//!   u8              trainable flag
//!   u32             rank, then u64 per dimension
//!   f64 * numel     values
//! ```

use std::path::Path;

use super::config::ExperimentConfig;
use super::{HarnessError, Result};
use crate::model::CaMtlModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAMT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &CaMtlModel, config: &ExperimentConfig) -> Vec<u8> {
    let store = model.store();
    let mut out = Vec::with_capacity(16 + 8 * store.total_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_string(config).expect("config serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
        out.extend_from_slice(p.name().as_bytes());
        out.push(p.trainable() as u8);
        let shape = p.tensor().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HarnessError::Checkpoint(format!("truncated while reading {field}"))),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| HarnessError::Checkpoint(format!("{field} length {n} is implausible")))
    }

    fn string(&mut self, n: usize, field: &str) -> Result<String> {
        String::from_utf8(self.take(n, field)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint(format!("{field} is not UTF-8")))
    }
}

/// Rebuilds the model described by the embedded config and overwrites every
/// parameter with the stored values.
pub fn from_bytes(bytes: &[u8]) -> Result<(ExperimentConfig, CaMtlModel)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(HarnessError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n = r.len("config")?;
    let json = r.string(n, "config")?;
    let config: ExperimentConfig =
        serde_json::from_str(&json).map_err(|e| HarnessError::Checkpoint(format!("config: {e}")))?;
    let mut model = CaMtlModel::new(config.model.clone(), &config.task_kinds(), config.seed)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.store().len() {
        return Err(HarnessError::Checkpoint(format!(
            "parameter count {count} does not match the configured model's {}",
            model.store().len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("parameter name")? as usize;
        let name = r.string(name_len, "parameter name")?;
        let id = model
            .store()
            .id(&name)
            .ok_or_else(|| HarnessError::Checkpoint(format!("unknown parameter `{name}`")))?;
        let trainable = match r.take(1, "trainable flag")?[0] {
            0 => false,
            1 => true,
            other => return Err(HarnessError::Checkpoint(format!("`{name}`: bad trainable flag {other}"))),
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        if shape != model.store().get(id).shape() {
            return Err(HarnessError::Checkpoint(format!(
                "shape of `{name}` is {shape:?}, model expects {:?}",
                model.store().get(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "parameter values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push((id, trainable, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(HarnessError::Checkpoint("trailing bytes after the last parameter".into()));
    }
    for (id, trainable, t) in loaded {
        model.store_mut().replace(id, t);
        model.store_mut().set_trainable(id, trainable);
    }
    Ok((config, model))
}

pub fn save(path: &Path, model: &CaMtlModel, config: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, config)).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, CaMtlModel)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_bytes(&bytes)
}
