//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ALLATTN1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian element data of every
//! tensor back to back. The header records the element type, free-form
//! metadata (config echo, step, generator state) and, per tensor, its name,
//! shape and byte offset into the data section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Float, ParamStore, Rng, Tensor};

pub const MAGIC: &[u8; 8] = b"ALLATTN1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let size = std::mem::size_of::<T>();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * size;
        }
        let header = serde_json::to_vec(&Header {
            dtype: T::DTYPE.name().to_string(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        match DType::parse(&header.dtype) {
            Some(d) if d == T::DTYPE => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {} data, expected {}",
                    header.dtype,
                    T::DTYPE.name()
                )))
            }
        }
        let data = &bytes[12 + hlen..];
        let size = std::mem::size_of::<T>();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + n * size)
                .ok_or_else(|| Error::Checkpoint(format!("data of `{}` truncated", e.name)))?;
            let values = raw.chunks_exact(size).map(T::read_le).collect();
            tensors.push((e.name, Tensor::new(&e.shape, values)?));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.path), p.value.clone());
        }
    }

    /// Copies the tensors under `prefix` into `store`, which must hold exactly
    /// the same paths and shapes. Every mismatch is listed in the error.
    pub fn restore_params(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, t) in self.with_prefix(prefix) {
            seen.insert(name.to_string());
            match store.find(name) {
                None => problems.push(format!("  {name}: in checkpoint, not in model")),
                Some(id) => {
                    let want = store.value(id).shape();
                    if want != t.shape() {
                        problems.push(format!(
                            "  {name}: checkpoint {:?}, model {want:?}",
                            t.shape()
                        ));
                    }
                }
            }
        }
        for (_, p) in store.iter() {
            if !seen.contains(&p.path) {
                problems.push(format!("  {}: in model, not in checkpoint", p.path));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match the model:\n{}",
                problems.join("\n")
            )));
        }
        for (name, t) in self.with_prefix(prefix) {
            let id = store.find(name).expect("checked above");
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Exact position of a generator, serializable into checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = || Error::Checkpoint("malformed generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}
