//! Binary checkpoints: named f32 tensors plus a JSON config blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMOC"                                magic
//! u32    format version (currently 1)
//! u32    tensor count
//! repeat per tensor:
//!   u16      name length, then that many UTF-8 bytes
//!   u8       rank, then rank u32 dims
//!   f32 * n  payload, n = product of dims
//! u32    config length, then that many UTF-8 bytes of JSON
//! ```
//!
//! Model weights are stored under their parameter names; optimizer state
//! rides along as extra tensors named `opt.m.<param>`, `opt.v.<param>`, and
//! `opt.step`, so a training run can resume exactly where it stopped.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{MocError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{sc, AdamW, ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MMOC";
const VERSION: u32 = 1;
const MAX_RANK: u8 = 4;

/// Serializes named tensors and a config string into the checkpoint format.
pub fn write_checkpoint<F: Scalar>(
    path: &Path,
    tensors: &[(String, Tensor<F>)],
    config_json: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| MocError::Argument("too many tensors for one checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| MocError::Argument(format!("tensor name too long: {name:?}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            let dim = u32::try_from(d)
                .map_err(|_| MocError::Argument(format!("dimension {d} too large for checkpoint")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    let cfg_len = u32::try_from(config_json.len())
        .map_err(|_| MocError::Argument("config blob too large for checkpoint".into()))?;
    out.extend_from_slice(&cfg_len.to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Byte cursor with truncation-aware reads.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MocError::Format(format!("checkpoint truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| MocError::Format(format!("checkpoint {what} is not UTF-8")))
    }
}

/// Reads a checkpoint back as named tensors plus the config string. Rejects
/// bad magic, unknown versions, truncation, oversized ranks, and trailing
/// bytes — a checkpoint either parses exactly or not at all.
pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<(Vec<(String, Tensor<F>)>, String)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(MocError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(MocError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = cur.string(name_len, "tensor name")?;
        let rank = cur.u8("rank")?;
        if rank > MAX_RANK {
            return Err(MocError::Format(format!("tensor {i} ({name}) has rank {rank} > {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = cur.u32("dimension")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| MocError::Format(format!("tensor {name} dimensions overflow")))?;
            shape.push(d);
        }
        let payload = cur.take(len * 4, "tensor payload")?;
        let data: Vec<F> = payload
            .chunks_exact(4)
            .map(|c| sc(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let config = cur.string(cfg_len, "config blob")?;
    if cur.pos != bytes.len() {
        return Err(MocError::Format(format!(
            "checkpoint has {} trailing bytes after config",
            bytes.len() - cur.pos
        )));
    }
    Ok((tensors, config))
}

/// Flattens an optimizer's moment buffers and step counter into named
/// tensors (`opt.m.<param>`, `opt.v.<param>`, `opt.step`) for storage.
pub fn optimizer_state_tensors<F: Scalar>(
    optimizer: &AdamW<F>,
    store: &ParamStore<F>,
) -> Vec<(String, Tensor<F>)> {
    let mut out = Vec::new();
    for (id, name, value) in store.iter() {
        if let Some((m, v)) = optimizer.moments(id) {
            let shape = value.shape();
            out.push((format!("opt.m.{name}"), Tensor::new(shape, m.to_vec()).expect("moment shape")));
            out.push((format!("opt.v.{name}"), Tensor::new(shape, v.to_vec()).expect("moment shape")));
        }
    }
    out.push(("opt.step".to_string(), Tensor::new(&[1], vec![sc(optimizer.step_count() as f64)]).unwrap()));
    out
}

/// Saves a model's weights and config, plus optimizer state when given.
pub fn save_model<F: Scalar>(path: &Path, model: &Model<F>, optimizer: Option<&AdamW<F>>) -> Result<()> {
    let store = model.store();
    let mut tensors: Vec<(String, Tensor<F>)> =
        store.iter().map(|(_, name, value)| (name.to_string(), value.clone())).collect();
    if let Some(opt) = optimizer {
        tensors.extend(optimizer_state_tensors(opt, store));
    }
    let config_json = serde_json::to_string(model.config()).expect("config serializes");
    write_checkpoint(path, &tensors, &config_json)
}

/// Restores a model saved by [`save_model`]. Returns the model and any
/// `opt.*` extras for [`apply_optimizer_state`]. The tensor set must match
/// the rebuilt model exactly: every parameter present, nothing unknown.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(Model<F>, Vec<(String, Tensor<F>)>)> {
    let (tensors, config_json) = read_checkpoint::<F>(path)?;
    let config: ModelConfig = serde_json::from_str(&config_json)
        .map_err(|e| MocError::Format(format!("checkpoint config does not parse: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let mut extras = Vec::new();
    let mut seen = HashSet::new();
    for (name, tensor) in tensors {
        if name.starts_with("opt.") {
            extras.push((name, tensor));
            continue;
        }
        let id = model
            .store()
            .by_name(&name)
            .ok_or_else(|| MocError::Format(format!("checkpoint tensor {name:?} is not a model parameter")))?;
        model.store_mut().set(id, tensor)?;
        seen.insert(name);
    }
    if seen.len() != model.store().len() {
        let missing: Vec<&str> = model
            .store()
            .iter()
            .map(|(_, name, _)| name)
            .filter(|name| !seen.contains(**&name))
            .collect();
        return Err(MocError::Format(format!("checkpoint is missing parameters: {missing:?}")));
    }
    Ok((model, extras))
}

/// Feeds `opt.*` extras from [`load_model`] back into an optimizer. With no
/// extras this is a no-op (fresh optimizer); partial state — a first moment
/// without its second, or moments for an unknown parameter — is rejected.
pub fn apply_optimizer_state<F: Scalar>(
    optimizer: &mut AdamW<F>,
    store: &ParamStore<F>,
    extras: &[(String, Tensor<F>)],
) -> Result<()> {
    let mut firsts: Vec<(String, &Tensor<F>)> = Vec::new();
    let mut seconds: Vec<(String, &Tensor<F>)> = Vec::new();
    for (name, tensor) in extras {
        if let Some(param) = name.strip_prefix("opt.m.") {
            firsts.push((param.to_string(), tensor));
        } else if let Some(param) = name.strip_prefix("opt.v.") {
            seconds.push((param.to_string(), tensor));
        } else if name == "opt.step" {
            let step = tensor.data().first().and_then(|v| v.to_f64()).unwrap_or(-1.0);
            if step < 0.0 || step.fract() != 0.0 {
                return Err(MocError::Format(format!("bad optimizer step count {step}")));
            }
            optimizer.set_step_count(step as u64);
        } else {
            return Err(MocError::Format(format!("unknown optimizer state tensor {name:?}")));
        }
    }
    for (param, m) in &firsts {
        let v = seconds
            .iter()
            .find(|(p, _)| p == param)
            .map(|(_, t)| *t)
            .ok_or_else(|| MocError::Format(format!("first moment for {param:?} has no second moment")))?;
        let id = store
            .by_name(param)
            .ok_or_else(|| MocError::Format(format!("optimizer state for unknown parameter {param:?}")))?;
        optimizer.set_moments(id, m.data().to_vec(), v.data().to_vec())?;
    }
    if seconds.len() != firsts.len() {
        return Err(MocError::Format("second moment present without matching first moment".into()));
    }
    Ok(())
}
