//! Named parameter storage, tape bindings and the checkpoint container.
//!
//! Checkpoint layout (little-endian):
//! `b"GTCK"`, `u32` version, `u32` + UTF-8 JSON header, `u32` matrix count,
//! then per matrix `u32` + UTF-8 name, `u32` rows, `u32` cols, `f64` payload.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|m| m.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Matrix::is_finite)
    }

    /// Registers every entry as a named tape parameter.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect();
        Bindings { vars }
    }

    /// Places every entry on the tape as an unregistered constant.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bindings { vars }
    }
}

/// Parameter name to tape variable.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

/// Serializes a header and parameters into the checkpoint container.
pub fn encode_checkpoint(header: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    let json = serde_json::to_vec(header)?;
    write_u32(&mut out, len_u32(json.len())?)?;
    out.extend_from_slice(&json);
    write_u32(&mut out, len_u32(store.len())?)?;
    for (name, m) in store.iter() {
        write_u32(&mut out, len_u32(name.len())?)?;
        out.extend_from_slice(name.as_bytes());
        write_u32(&mut out, len_u32(m.rows())?)?;
        write_u32(&mut out, len_u32(m.cols())?)?;
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header: serde_json::Value = serde_json::from_str(&read_string(&mut r)?)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated payload for {name}")))?;
            data.push(f64::from_le_bytes(b));
        }
        store.insert(name, Matrix::new(rows, cols, data)?);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: &Path, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(header, store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    decode_checkpoint(&std::fs::read(path)?)
}
