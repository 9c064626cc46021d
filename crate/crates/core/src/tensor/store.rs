//! Named parameter storage, Adam updates, and binary checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::TensorError;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    adam: Option<AdamSlot>,
}

/// Adam hyperparameters. `Default` gives lr 1e-3, betas 0.9/0.999, eps 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Flat collection of named 2-D parameters plus optional Adam moments.
///
/// Names are unique; iteration order is always lexicographic, which keeps
/// gradient application and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter with explicit initial values.
    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        if values.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "insert",
                detail: format!("{} values for {}x{}", values.len(), rows, cols),
            });
        }
        self.entries.insert(name.to_string(), Entry { rows, cols, values, adam: None });
        Ok(())
    }

    /// Register a weight matrix initialized uniformly in
    /// `[-1/sqrt(rows), 1/sqrt(rows)]` (fan-in scaling).
    pub fn insert_dense<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<(), TensorError> {
        let bound = 1.0 / (rows as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, rows, cols, values)
    }

    /// Register a zero-initialized bias row.
    pub fn insert_bias(&mut self, name: &str, cols: usize) -> Result<(), TensorError> {
        self.insert(name, 1, cols, vec![0.0; cols])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn shape(&self, name: &str) -> Result<(usize, usize), TensorError> {
        let e = self.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        Ok((e.rows, e.cols))
    }

    pub fn values(&self, name: &str) -> Result<&[f64], TensorError> {
        let e = self.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        Ok(&e.values)
    }

    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<(), TensorError> {
        let e = self.entries.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        if values.len() != e.values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_values",
                detail: format!("{} values for {}x{}", values.len(), e.rows, e.cols),
            });
        }
        e.values = values;
        Ok(())
    }

    pub(super) fn fetch(&self, name: &str) -> Result<(usize, usize, Vec<f64>), TensorError> {
        let e = self.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.into()))?;
        Ok((e.rows, e.cols, e.values.clone()))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    /// Number of Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copy the parameter values of `other` into `self`. Both stores must
    /// hold exactly the same names and shapes. Adam state is untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::ShapeMismatch {
                op: "copy_values_from",
                detail: format!("{} vs {} parameters", self.entries.len(), other.entries.len()),
            });
        }
        for (name, src) in &other.entries {
            let dst =
                self.entries.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if (dst.rows, dst.cols) != (src.rows, src.cols) {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_values_from",
                    detail: format!("{}: {}x{} vs {}x{}", name, dst.rows, dst.cols, src.rows, src.cols),
                });
            }
            dst.values = src.values.clone();
        }
        Ok(())
    }

    /// One Adam update over every parameter. `grads` must contain an entry
    /// of matching length for each parameter name.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        hyper: AdamHyper,
    ) -> Result<(), TensorError> {
        for name in self.entries.keys() {
            match grads.get(name) {
                None => return Err(TensorError::MissingGradient(name.clone())),
                Some(g) if g.len() != self.entries[name].values.len() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("{}: {} grads for {} values", name, g.len(), self.entries[name].values.len()),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (name, entry) in self.entries.iter_mut() {
            let g = &grads[name];
            let slot = entry.adam.get_or_insert_with(|| AdamSlot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g[i];
                slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                entry.values[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            }
        }
        Ok(())
    }

    /// Serialize all parameters (and Adam state, if any step was taken) to a
    /// little-endian binary file. Loading the result reproduces the store
    /// byte for byte.
    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let has_adam = self.entries.values().any(|e| e.adam.is_some());
        buf.push(has_adam as u8);
        buf.extend_from_slice(&self.step.to_le_bytes());
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if has_adam {
                match &e.adam {
                    Some(slot) => {
                        buf.push(1);
                        for v in slot.m.iter().chain(&slot.v) {
                            buf.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    None => buf.push(0),
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TensorError::CheckpointMalformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::CheckpointVersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let has_adam = r.u8()? != 0;
        let step = r.u64()?;
        let mut store = ParamStore { entries: BTreeMap::new(), step };
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::CheckpointMalformed("non-utf8 name".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| TensorError::CheckpointMalformed("shape overflow".into()))?;
            let values = r.f64s(len)?;
            let adam = if has_adam && r.u8()? != 0 {
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                Some(AdamSlot { m, v })
            } else {
                None
            };
            if store.entries.insert(name.clone(), Entry { rows, cols, values, adam }).is_some() {
                return Err(TensorError::CheckpointMalformed(format!("duplicate name {}", name)));
            }
        }
        if r.pos != bytes.len() {
            return Err(TensorError::CheckpointMalformed("trailing bytes".into()));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::CheckpointMalformed("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TensorError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|&g| g * g).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }
    norm
}
