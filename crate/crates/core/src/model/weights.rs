//! Named parameter store and its versioned on-disk container.

use crate::error::{Error, Result};
use crate::io_util::{fnv1a, HashReader, HashWriter};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FPW1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Parameters plus non-trainable buffers (batch-norm running statistics),
/// iterated in name order for determinism.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Vec<f32>>,
    pub meta: BTreeMap<String, String>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), Param { tensor, frozen: false });
    }

    pub fn insert_buffer(&mut self, name: &str, values: Vec<f32>) {
        self.buffers.insert(name.to_string(), values);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&[f32]> {
        self.buffers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("missing buffer '{name}'")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f32>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing buffer '{name}'")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.buffers.iter()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Drops parameters and buffers under a name prefix (e.g. the decoder
    /// when exporting the deployed model).
    pub fn without_prefix(&self, prefix: &str) -> WeightStore {
        WeightStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| !n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(n, _)| !n.starts_with(prefix))
                .map(|(n, b)| (n.clone(), b.clone()))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Zeroes masked positions in every named tensor. Mask length must match.
    pub fn apply_masks(&mut self, masks: &BTreeMap<String, Vec<bool>>) -> Result<()> {
        for (name, mask) in masks {
            let t = self.tensor_mut(name)?;
            if t.numel() != mask.len() {
                return Err(Error::Shape {
                    op: "apply_masks",
                    detail: format!("{name}: mask length {} vs tensor {}", mask.len(), t.numel()),
                });
            }
            for (v, &keep) in t.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes, freeze flags, parameter data, and buffers.
    /// Metadata is excluded so retraining provenance does not change identity.
    pub fn content_hash(&self) -> u64 {
        let mut bytes: Vec<u8> = Vec::new();
        for (name, p) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            for &d in p.tensor.shape() {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            bytes.push(p.frozen as u8);
            for v in p.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (name, b) in &self.buffers {
            bytes.extend_from_slice(name.as_bytes());
            for v in b {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Hash restricted to parameters under a prefix (freeze verification).
    pub fn prefix_hash(&self, prefix: &str) -> u64 {
        let mut bytes: Vec<u8> = Vec::new();
        for (name, p) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            bytes.extend_from_slice(name.as_bytes());
            for v in p.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = HashWriter::new(BufWriter::new(File::create(path)?));
        w.write_bytes(MAGIC)?;
        w.write_u32(VERSION)?;
        w.write_u32(self.meta.len() as u32)?;
        for (k, v) in &self.meta {
            w.write_str(k)?;
            w.write_str(v)?;
        }
        w.write_u32(self.params.len() as u32)?;
        for (name, p) in &self.params {
            w.write_str(name)?;
            w.write_u32(p.tensor.ndim() as u32)?;
            for &d in p.tensor.shape() {
                w.write_u32(d as u32)?;
            }
            w.write_u8(p.frozen as u8)?;
            w.write_f32_slice(p.tensor.data())?;
        }
        w.write_u32(self.buffers.len() as u32)?;
        for (name, b) in &self.buffers {
            w.write_str(name)?;
            w.write_u32(b.len() as u32)?;
            w.write_f32_slice(b)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = HashReader::new(BufReader::new(File::open(path)?))?;
        let magic = r.read_bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let n_meta = r.read_u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.read_str()?;
            let v = r.read_str()?;
            meta.insert(k, v);
        }
        let n_params = r.read_u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.read_str()?;
            let ndim = r.read_u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32()? as usize);
            }
            let frozen = r.read_u8()? != 0;
            let numel: usize = shape.iter().product();
            let data = r.read_f32_vec(numel)?;
            params.insert(name, Param { tensor: Tensor::new(shape, data)?, frozen });
        }
        let n_buffers = r.read_u32()? as usize;
        let mut buffers = BTreeMap::new();
        for _ in 0..n_buffers {
            let name = r.read_str()?;
            let len = r.read_u32()? as usize;
            buffers.insert(name, r.read_f32_vec(len)?);
        }
        Ok(WeightStore { params, buffers, meta })
    }
}
