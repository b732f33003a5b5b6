//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MRKPCKPT"  u32 version  u64 manifest_len  manifest (JSON, UTF-8)
//! u64 tensor_count
//! repeated: u32 name_len  name  u64 rows  u64 cols  rows*cols f64
//! ```
//!
//! Tensor names are prefixed with `param/`, `adam.m/` or `adam.v/`. Floats
//! are stored as raw bits so a round trip is exact.

use serde_json::{json, Value};

use mrkp_core::config::TrainConfig;
use mrkp_core::nn::{Adam, ParamStore};
use mrkp_core::tensor::Tensor;
use mrkp_core::trainer::{Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRKPCKPT";

const SECTIONS: [&str; 3] = ["param/", "adam.m/", "adam.v/"];

fn section(ck: &Checkpoint, i: usize) -> &ParamStore {
    match i {
        0 => &ck.params,
        1 => &ck.optimizer.first,
        _ => &ck.optimizer.second,
    }
}

/// Serializes `ck`, embedding `run` (the run manifest) in the header.
pub fn encode(ck: &Checkpoint, run: &Value) -> Vec<u8> {
    let manifest = json!({
        "step": ck.step,
        "config": ck.config.render(),
        "adam": {
            "beta1": ck.optimizer.beta1.to_string(),
            "beta2": ck.optimizer.beta2.to_string(),
            "eps": ck.optimizer.eps.to_string(),
            "step": ck.optimizer.step,
        },
        "run": run,
    });
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ck.version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    let count: usize = (0..3).map(|i| section(ck, i).len()).sum();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (i, prefix) in SECTIONS.iter().enumerate() {
        for (name, t) in section(ck, i).iter() {
            let key = format!("{prefix}{name}");
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            let (r, c) = t.shape();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Incompatible("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Incompatible("length overflows".into()))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Incompatible(msg.into())
}

/// Inverse of [`encode`]; returns the checkpoint and the embedded run manifest.
pub fn decode(bytes: &[u8]) -> Result<(Checkpoint, Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let mlen = r.len()?;
    let manifest: Value = serde_json::from_slice(r.take(mlen)?).map_err(|e| bad(format!("manifest: {e}")))?;
    let text = |v: &Value| v.as_str().map(str::to_owned).ok_or_else(|| bad("manifest field is not a string"));
    let float = |v: &Value| text(v)?.parse::<f64>().map_err(|_| bad("manifest float is malformed"));
    let int = |v: &Value| v.as_u64().ok_or_else(|| bad("manifest integer is malformed"));
    let config = TrainConfig::parse(&text(&manifest["config"])?).map_err(|e| bad(format!("stored config: {e}")))?;
    let adam = &manifest["adam"];
    let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
    let count = r.len()?;
    for _ in 0..count {
        let klen = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(klen)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_owned();
        let rows = r.len()?;
        let cols = r.len()?;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor shape overflows"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor shape overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::from_vec(rows, cols, data)?;
        let (i, name) = SECTIONS
            .iter()
            .enumerate()
            .find_map(|(i, p)| key.strip_prefix(p).map(|n| (i, n)))
            .ok_or_else(|| bad(format!("unknown tensor `{key}`")))?;
        stores[i].insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    let [params, first, second] = stores;
    let optimizer = Adam {
        beta1: float(&adam["beta1"])?,
        beta2: float(&adam["beta2"])?,
        eps: float(&adam["eps"])?,
        step: int(&adam["step"])?,
        first,
        second,
    };
    let ck = Checkpoint { version, config, params, optimizer, step: int(&manifest["step"])? };
    Ok((ck, manifest["run"].clone()))
}

pub fn read(path: &std::path::Path) -> Result<(Checkpoint, Value)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Incompatible(msg) => Error::Incompatible(format!("{}: {msg}", path.display())),
        other => other,
    })
}
