//! Named parameter tensors with gradient buffers and Adam moments.
//!
//! # Checkpoint layout
//!
//! ```text
//! bytes 0..8     magic  b"OPTDCKPT"
//! bytes 8..12    format version, u32 little-endian (currently 1)
//! bytes 12..20   manifest length in bytes, u64 little-endian
//! manifest       UTF-8 text, '\n'-terminated lines:
//!                  step_count <n>
//!                  entries <m>
//!                  <name>\t<d0>,<d1>,...     (m lines, sorted by name)
//! payload        for each entry in manifest order: value, adam_m, adam_v,
//!                each as prod(shape) little-endian f64
//! ```
//!
//! Gradient buffers are not persisted; they are zero on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OPTDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        ParamEntry {
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a parameter. Moments and gradient are reset.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    /// Add `grad` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if e.grad.len() != grad.len() {
            return Err(Error::dim(
                format!("gradient for `{name}`"),
                format!("expected {} values, got {}", e.grad.len(), grad.len()),
            ));
        }
        e.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = format!("step_count {}\nentries {}\n", self.step_count, self.entries.len());
        for (name, e) in &self.entries {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\n", dims.join(",")));
        }
        let mut buf = Vec::with_capacity(20 + manifest.len() + 24 * self.num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(manifest.as_bytes());
        for e in self.entries.values() {
            for t in [&e.value, &e.adam_m, &e.adam_v] {
                for x in t.data() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let manifest = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut lines = manifest.lines();
        let step_count = lines
            .next()
            .and_then(|l| l.strip_prefix("step_count "))
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| bad("bad step_count line"))?;
        let n_entries = lines
            .next()
            .and_then(|l| l.strip_prefix("entries "))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad("bad entries line"))?;

        let mut cursor = 20 + mlen;
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated payload"))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let mut store = ParamStore::new();
        store.step_count = step_count;
        for _ in 0..n_entries {
            let line = lines.next().ok_or_else(|| bad("missing manifest entry"))?;
            let (name, dims) = line.split_once('\t').ok_or_else(|| bad("bad manifest entry"))?;
            let shape = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("bad dimension"))?
            };
            let value = read_tensor(&shape)?;
            let adam_m = read_tensor(&shape)?;
            let adam_v = read_tensor(&shape)?;
            let mut entry = ParamEntry::new(value);
            entry.adam_m = adam_m;
            entry.adam_v = adam_v;
            store.entries.insert(name.to_string(), entry);
        }
        Ok(store)
    }
}
