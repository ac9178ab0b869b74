use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameter block label: shared backbone, one correspondence branch, or
/// the shared pose head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Psi,
    /// Zero-based branch index; rendered one-based (`phi_1`, `phi_2`, ...).
    Phi(usize),
    Omega,
}

impl Block {
    pub fn is_branch(self) -> bool {
        matches!(self, Block::Phi(_))
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Psi => f.write_str("psi"),
            Block::Phi(g) => write!(f, "phi_{}", g + 1),
            Block::Omega => f.write_str("omega"),
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psi" => Ok(Block::Psi),
            "omega" => Ok(Block::Omega),
            _ => s
                .strip_prefix("phi_")
                .and_then(|g| g.parse::<usize>().ok())
                .filter(|&g| g >= 1)
                .map(|g| Block::Phi(g - 1))
                .ok_or_else(|| Error::Format { what: "block tag", detail: s.to_string() }),
        }
    }
}

impl Serialize for Block {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub block: Block,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Number of optimizer updates this tensor has received.
    pub steps: u64,
}

/// Named parameters, each tagged with exactly one block.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, block: Block, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.clone(), block, m: zeros.clone(), v: zeros, value, steps: 0 });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Distinct block labels in first-appearance order.
    pub fn blocks(&self) -> Vec<Block> {
        let mut out: Vec<Block> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.block) {
                out.push(p.block);
            }
        }
        out
    }

    /// Total number of scalar entries for parameters matching `pred`.
    pub fn count(&self, pred: impl Fn(Block) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p.block)).map(|p| p.value.len()).sum()
    }

    /// Overwrites a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("{:?} vs {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }
}

/// Result of a backward pass: one gradient per parameter of the store the
/// tape was bound to, exact zeros for parameters the loss never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Tensor<T>>,
    pub(crate) reached: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    /// Whether any path connected the loss to this parameter.
    pub fn reached(&self, id: ParamId) -> bool {
        self.reached[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn to_map(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store.iter().map(|(id, p)| (p.name.clone(), self.grads[id.0].clone())).collect()
    }

    /// Concatenated gradient entries of every parameter matching `pred`, in
    /// store order.
    pub fn flatten(&self, store: &ParamStore<T>, pred: impl Fn(Block) -> bool) -> Vec<T> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if pred(p.block) {
                out.extend_from_slice(self.grads[id.0].data());
            }
        }
        out
    }

    /// Adds `other * w` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, w: T) {
        for (i, (a, b)) in self.grads.iter_mut().zip(&other.grads).enumerate() {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y * w;
            }
            self.reached[i] |= other.reached[i];
        }
    }

    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            reached: vec![false; store.len()],
        }
    }
}
