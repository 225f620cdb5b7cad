//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SEMC" | version | meta_len | meta (UTF-8 JSON)
//!        | n_tensors | n_tensors × (name_len | name | rows | cols)
//!        | tensor data, f32 little-endian, row-major, in table order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor2D<f32>)>,
}

impl Checkpoint {
    pub fn from_stores<'a>(
        meta: serde_json::Value,
        stores: impl IntoIterator<Item = (&'a str, &'a ParamStore<f32>)>,
    ) -> Self {
        let mut tensors = Vec::new();
        for (prefix, store) in stores {
            for p in store.iter() {
                tensors.push((format!("{prefix}{}", p.name), p.value.clone()));
            }
        }
        Checkpoint { meta, tensors }
    }

    /// Loads every tensor whose name starts with `prefix` into `store`.
    /// Every parameter of the store must be present.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let full = format!("{prefix}{name}");
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Format {
                    path: Default::default(),
                    msg: format!("checkpoint lacks tensor `{full}`"),
                })?;
            store.assign(&name, t.1.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_len = read_u32(&mut r)? as usize;
        if r.len() < meta_len {
            return Err("truncated metadata".into());
        }
        let meta = serde_json::from_slice(&r[..meta_len]).map_err(|e| e.to_string())?;
        r = &r[meta_len..];
        let n = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            if r.len() < len {
                return Err("truncated tensor table".into());
            }
            let name = String::from_utf8(r[..len].to_vec()).map_err(|e| e.to_string())?;
            r = &r[len..];
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            table.push((name, rows, cols));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, rows, cols) in table {
            let count = rows * cols;
            if r.len() < count * 4 {
                return Err(format!("truncated data for `{name}`"));
            }
            let data: Vec<f32> = r[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[count * 4..];
            let t = Tensor2D::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "unexpected end of file")?;
    Ok(u32::from_le_bytes(b))
}
