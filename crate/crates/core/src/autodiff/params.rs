use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 7] = b"WPCKPT1";

/// One learnable tensor. Values live in f64 but are kept representable in f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Learnable parameters keyed by stable dotted paths, iterated lexicographically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, shape: &[usize], mut value: Vec<f64>) -> Result<()> {
        if shape.is_empty() || shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(
                "param insert",
                format!("{path}: shape {shape:?} with {} values", value.len()),
            ));
        }
        if self.params.contains_key(path) {
            return Err(Error::invalid(
                "param path",
                format!("{path} already exists"),
            ));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("parameter {path}")));
        }
        round_f32(&mut value);
        let n = value.len();
        self.params.insert(
            path.to_string(),
            Param {
                shape: shape.to_vec(),
                value,
                grad: vec![0.0; n],
            },
        );
        Ok(())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        path: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(path, shape, v)
    }

    pub fn insert_const(&mut self, path: &str, shape: &[usize], c: f64) -> Result<()> {
        self.insert(path, shape, vec![c; shape.iter().product()])
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// The parameter as a matrix: trailing axis is columns, the rest are flattened into rows.
    pub fn tensor(&self, path: &str) -> Result<Tensor> {
        let p = self
            .params
            .get(path)
            .ok_or_else(|| Error::invalid("parameter path", format!("{path} not found")))?;
        let cols = *p.shape.last().unwrap();
        let rows = if cols == 0 { 0 } else { p.value.len() / cols };
        Tensor::new(rows, cols, p.value.clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Param::len).sum()
    }

    /// Scalar count of parameters whose path starts with `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter bound to `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (path, var) in graph.bound_params() {
            let (Some(p), Some(g)) = (self.params.get_mut(path), grads.get(*var)) else {
                continue;
            };
            for (o, x) in p.grad.iter_mut().zip(g) {
                *o += x;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Snaps every value to the nearest f32.
    pub fn round_to_storage(&mut self) {
        for p in self.params.values_mut() {
            round_f32(&mut p.value);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CKPT_MAGIC.to_vec();
        for (path, p) in &self.params {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &p.value {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |field: &str, reason: String| Error::Format {
            path: path.to_path_buf(),
            field: field.to_string(),
            reason,
        };
        if bytes.len() < 7 || &bytes[..7] != CKPT_MAGIC {
            return Err(fail("header", "bad magic".into()));
        }
        let mut pos = 7;
        let mut take = |n: usize, field: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(fail(field, format!("truncated at offset {pos}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        loop {
            let Ok(len) = take(4, "record") else {
                break;
            };
            let len = u32_at(len);
            let name = std::str::from_utf8(take(len, "path")?)
                .map_err(|e| fail("path", e.to_string()))?
                .to_string();
            let rank = u32_at(take(4, &name)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4, &name)?));
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 4, &name)?;
            let value: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store
                .insert(&name, &shape, value)
                .map_err(|e| fail(&name, e.to_string()))?;
        }
        if pos != bytes.len() {
            return Err(fail(
                "record",
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes, path)
    }
}
