//! Named trainable tensors and their binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TRKP" | version: u16 | count: u32 |
//!   count x ( name_len: u16 | name: utf-8 | dtype: u8 (0 = f32, 1 = f64) |
//!             rank: u8 | extents: rank x u64 | values: raw little-endian )
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {tag} at byte {offset}")]
    DType { tag: u8, offset: usize },
    #[error("tensor name at byte {0} is not valid utf-8")]
    Name(usize),
    #[error("duplicate tensor name {0:?}")]
    Duplicate(String),
    #[error("tensor {name:?} stored as {found:?}, expected {expected:?}")]
    DTypeMismatch { name: String, found: DType, expected: DType },
}

/// Trainable tensors of one operator, keyed by unique name. Iteration order is
/// the lexicographic name order, which fixes the checkpoint layout and the
/// order in which optimizers visit parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::Duplicate(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Union of two sets with disjoint names.
    pub fn merged(&self, other: &ParamSet<T>) -> Result<ParamSet<T>, CheckpointError> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k, v.clone())?;
        }
        Ok(out)
    }

    /// Subset of tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Adds a convolution kernel `[f, c, k, k]` and bias `[f]` under
    /// `{prefix}.w` / `{prefix}.b`. Kernels are drawn uniformly with the
    /// fan-in bound `sqrt(6 / (c k k))`; `zero` makes both all-zero.
    pub fn add_conv(
        &mut self,
        prefix: &str,
        f: usize,
        c: usize,
        k: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<(), CheckpointError> {
        let fan_in = (c * k * k) as f64;
        let w = uniform(&[f, c, k, k], if zero { 0.0 } else { (6.0 / fan_in).sqrt() }, rng);
        self.insert(format!("{prefix}.w"), w)?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[f]))
    }

    /// Adds a dense layer `[inputs, outputs]` plus bias `[outputs]`.
    pub fn add_dense(
        &mut self,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<(), CheckpointError> {
        let bound = if zero { 0.0 } else { (6.0 / (inputs + outputs) as f64).sqrt() };
        self.insert(format!("{prefix}.w"), uniform(&[inputs, outputs], bound, rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[outputs]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE as u8);
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint whose tensors are all stored with element type `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic(magic));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::Name(name_at))?
                .to_string();
            let tag_at = cur.pos;
            let tag = cur.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or(CheckpointError::DType { tag, offset: tag_at })?;
            if dtype != T::DTYPE {
                return Err(CheckpointError::DTypeMismatch { name, found: dtype, expected: T::DTYPE });
            }
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let width = dtype.size();
            let raw = cur.take(n.checked_mul(width).ok_or(CheckpointError::Truncated(cur.pos))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let tensor = Tensor::new(&shape, data).expect("extent product matches value count");
            set.insert(name, tensor)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        if bound == 0.0 {
            T::zero()
        } else {
            T::of(rng.random_range(-bound..bound))
        }
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.pos)),
        }
    }
}
