//! Self-describing, integrity-checked model archives.
//!
//! Layout: the 8-byte magic `CAGEMCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, the
//! little-endian element payload, and finally the SHA-256 digest of
//! everything before it.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"CAGEMCKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    adam_step: u64,
    /// Which parameters carry Adam moments (stored `m` then `v`).
    adam_moments: Vec<bool>,
    meta: serde_json::Value,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub adam: Adam<F>,
    /// Caller-defined state (schedule position, RNG, bookkeeping).
    pub meta: serde_json::Value,
}

fn encode<F: Real>(model: &Model<F>, adam: &Adam<F>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let store = &model.store;
    let mut payload = Vec::with_capacity(store.num_scalars() * F::BYTES * 3);
    let mut params = Vec::new();
    for id in store.ids() {
        let v = store.value(id);
        params.push(Entry { name: store.name(id).to_string(), shape: vec![v.nrows(), v.ncols()] });
        v.iter().for_each(|&x| x.write_le(&mut payload));
    }
    let mut buffers = Vec::new();
    for id in store.buffer_ids() {
        let b = store.buffer(id);
        buffers.push(Entry { name: store.buffer_name(id).to_string(), shape: vec![b.len()] });
        b.iter().for_each(|&x| x.write_le(&mut payload));
    }
    let mut adam_moments = Vec::new();
    for id in store.ids() {
        let m = adam.moments(id);
        adam_moments.push(m.is_some());
        if let Some((m, v)) = m {
            m.iter().chain(v.iter()).for_each(|&x| x.write_le(&mut payload));
        }
    }
    let header = Header {
        dtype: F::DTYPE.to_string(),
        config: model.config().clone(),
        params,
        buffers,
        adam_step: adam.step,
        adam_moments,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes a checkpoint via a temporary file and rename.
pub fn save<F: Real>(path: &Path, model: &Model<F>, adam: &Adam<F>, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(model, adam, meta)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    elem: usize,
    dtype: &'a str,
}

impl Cursor<'_> {
    fn take<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
        let len = n * self.elem;
        if self.pos + len > self.bytes.len() {
            return Err(Error::Integrity("payload shorter than the header describes".into()));
        }
        let chunk = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(chunk
            .chunks_exact(self.elem)
            .map(|c| match self.dtype {
                "f32" => F::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => F::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect())
    }
}

/// Reads a checkpoint, converting stored elements to `F` if needed.
pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

fn decode<F: Real>(path: &Path, bytes: &[u8]) -> Result<Checkpoint<F>> {
    let fmt = |offset: usize, message: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(fmt(bytes.len(), "file too short for a checkpoint"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity(format!("{}: digest mismatch", path.display())));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > body.len() {
        return Err(fmt(12, "header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + hlen])?;
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => return Err(fmt(20, &format!("unknown element type {d}"))),
    };
    let mut cur = Cursor { bytes: body, pos: 20 + hlen, elem, dtype: &header.dtype };

    let mut model = Model::<F>::new(header.config.clone(), 0)?;
    if header.params.len() != model.store.len() || header.adam_moments.len() != model.store.len() {
        return Err(Error::Integrity("parameter count does not match the stored configuration".into()));
    }
    let mut ids = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {}", e.name)))?;
        let (r, c) = model.store.value(id).dim();
        if e.shape != [r, c] {
            return Err(Error::Integrity(format!("parameter {} has shape {:?}, expected [{r}, {c}]", e.name, e.shape)));
        }
        let v = cur.take::<F>(r * c)?;
        *model.store.value_mut(id) = Array2::from_shape_vec((r, c), v).expect("length checked");
        ids.push(id);
    }
    for e in &header.buffers {
        let id = model
            .store
            .find_buffer(&e.name)
            .ok_or_else(|| Error::Integrity(format!("unknown buffer {}", e.name)))?;
        let n = model.store.buffer(id).len();
        if e.shape != [n] {
            return Err(Error::Integrity(format!("buffer {} has shape {:?}, expected [{n}]", e.name, e.shape)));
        }
        *model.store.buffer_mut(id) = Array1::from(cur.take::<F>(n)?);
    }
    let mut adam = Adam::new(model.store.len());
    adam.step = header.adam_step;
    for (&id, &has) in ids.iter().zip(&header.adam_moments) {
        if has {
            let dim = model.store.value(id).dim();
            let n = dim.0 * dim.1;
            let m = cur.take::<F>(n)?;
            let v = cur.take::<F>(n)?;
            adam.m[id.index()] = Some(Array2::from_shape_vec(dim, m).expect("length checked"));
            adam.v[id.index()] = Some(Array2::from_shape_vec(dim, v).expect("length checked"));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    Ok(Checkpoint { model, adam, meta: header.meta })
}

/// Rejects a checkpoint whose architecture differs from `expected`.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    if expected != found {
        return Err(Error::Config(format!(
            "checkpoint configuration {found:?} does not match requested {expected:?}"
        )));
    }
    Ok(())
}
