//! Versioned named-tensor checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "EDUQALM1"
//! 8       1     kind: 0 = full model, 1 = adapter-only
//! 9       4     meta_len: u32
//! 13      m     meta: UTF-8 JSON (ModelConfig for kind 0, AdapterMeta for kind 1)
//! ..      4     n_tensors: u32
//! per tensor manifest entry:
//!         2     name_len: u16
//!         n     name: UTF-8
//!         1     dtype tag (0 = f32, 1 = f64)
//!         1     rank: u8
//!         8*r   dims: u64 each
//! then, for each manifest entry in order:
//!         numel * dtype_size   raw row-major payload, little-endian
//! ```
//!
//! Saving the same state twice produces byte-identical files; `save(load(f))`
//! reproduces `f` exactly. Loads are dtype-strict: a file written at one
//! precision never silently converts to another.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::lora::LoraConfig;
use crate::model::{DecoderModel, ModelConfig};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"EDUQALM1";
const KIND_MODEL: u8 = 0;
const KIND_ADAPTER: u8 = 1;

/// Meta block of an adapter-only checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<String>,
}

struct TensorRecord<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

fn write_container<T: Scalar>(
    path: &Path,
    kind: u8,
    meta: &[u8],
    tensors: &[TensorRecord<T>],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.tag());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in tensors {
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    write_atomic(path, &out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated container: wanted {n} bytes at offset {}",
                self.off
            )));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_container<T: Scalar>(path: &Path) -> Result<(u8, Vec<u8>, Vec<TensorRecord<T>>)> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, off: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format(format!(
            "bad magic in {}: not an EDUQALM1 container",
            path.display()
        )));
    }
    let kind = r.u8()?;
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?.to_vec();
    let n_tensors = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
        let tag = r.u8()?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for {name}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name} stored as {dtype:?} but {0:?} was requested",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        manifest.push((name, shape));
    }
    let size = T::DTYPE.size_bytes();
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * size)?;
        let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
        tensors.push(TensorRecord { name, shape, data });
    }
    if r.off != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payloads",
            buf.len() - r.off
        )));
    }
    Ok((kind, meta, tensors))
}

/// Save a plain model (config + every base parameter). A model with
/// adapters attached must be merged first or saved via [`save_adapters`].
pub fn save_model<T: Scalar>(model: &DecoderModel<T>, path: &Path) -> Result<()> {
    if !model.adapters().is_empty() {
        return Err(Error::Contract(
            "model has adapters attached; merge or save them separately".into(),
        ));
    }
    let meta = serde_json::to_vec(model.config())
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let tensors: Vec<TensorRecord<T>> = model
        .base_params()
        .into_iter()
        .map(|p| TensorRecord {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            data: p.to_vec(),
        })
        .collect();
    write_container(path, KIND_MODEL, &meta, &tensors)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<DecoderModel<T>> {
    let (kind, meta, tensors) = read_container::<T>(path)?;
    if kind != KIND_MODEL {
        return Err(Error::Format("container is not a model checkpoint".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&meta)
        .map_err(|e| Error::Format(format!("config meta: {e}")))?;
    let model = DecoderModel::zeros(&config)?;
    let expected = model.base_params().len();
    if tensors.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} tensors, found {}",
            tensors.len()
        )));
    }
    for rec in tensors {
        let param = model
            .param_by_name(&rec.name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {}", rec.name)))?;
        if param.shape() != rec.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                param.shape()
            )));
        }
        param.set_data(rec.data)?;
    }
    Ok(model)
}

/// Save only the adapters of an adapted model.
pub fn save_adapters<T: Scalar>(model: &DecoderModel<T>, path: &Path) -> Result<()> {
    let adapters = model.adapters();
    let first = adapters
        .values()
        .next()
        .ok_or_else(|| Error::Contract("model has no adapters to save".into()))?;
    let meta = AdapterMeta {
        rank: first.rank(),
        alpha: first.alpha(),
        dropout: first.dropout(),
        targets: adapters.keys().cloned().collect(),
    };
    let meta = serde_json::to_vec(&meta)
        .map_err(|e| Error::Format(format!("adapter meta serialization: {e}")))?;
    let mut tensors = Vec::with_capacity(2 * adapters.len());
    for adapter in adapters.values() {
        for p in [adapter.up_param(), adapter.down_param()] {
            tensors.push(TensorRecord {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.to_vec(),
            });
        }
    }
    write_container(path, KIND_ADAPTER, &meta, &tensors)
}

/// Attach the saved adapters to `model` and restore their weights exactly.
pub fn load_adapters_into<T: Scalar>(model: &mut DecoderModel<T>, path: &Path) -> Result<()> {
    let (kind, meta, tensors) = read_container::<T>(path)?;
    if kind != KIND_ADAPTER {
        return Err(Error::Format("container is not an adapter checkpoint".into()));
    }
    let meta: AdapterMeta = serde_json::from_slice(&meta)
        .map_err(|e| Error::Format(format!("adapter meta: {e}")))?;
    model.attach_lora(
        &LoraConfig {
            rank: meta.rank,
            alpha: meta.alpha,
            dropout: meta.dropout,
            targets: Some(meta.targets),
        },
        0,
    )?;
    for rec in tensors {
        let param = model
            .param_by_name(&rec.name)
            .ok_or_else(|| Error::Format(format!("unexpected adapter tensor {}", rec.name)))?;
        if param.shape() != rec.shape.as_slice() {
            return Err(Error::Format(format!(
                "adapter tensor {} has shape {:?}, expected {:?}",
                rec.name,
                rec.shape,
                param.shape()
            )));
        }
        param.set_data(rec.data)?;
    }
    Ok(())
}
