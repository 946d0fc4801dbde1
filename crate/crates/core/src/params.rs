//! Named parameter and buffer storage, and binding onto a tape.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the truncated normal used for weights.
pub const INIT_STD: f64 = 0.02;

/// Role of a learnable tensor. Decides initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Linear, convolution and attention matrices.
    Weight,
    Bias,
    /// Batch norm scale.
    NormScale,
    /// Batch norm shift.
    NormShift,
    /// Attention temperature stored as `log β`.
    Temperature,
    /// Any other learnable scalar.
    Scalar,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Temperature => 4,
            ParamKind::Scalar => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Temperature,
            5 => ParamKind::Scalar,
            _ => return None,
        })
    }
}

/// Initial value for a tensor of the given role.
pub fn init_tensor<R: Rng + ?Sized>(shape: &[usize], kind: ParamKind, rng: &mut R) -> Tensor {
    match kind {
        ParamKind::Weight => Tensor::trunc_normal(shape, INIT_STD, rng),
        ParamKind::NormScale => Tensor::ones(shape),
        ParamKind::Bias | ParamKind::NormShift | ParamKind::Temperature | ParamKind::Scalar => {
            Tensor::zeros(shape)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Insertion-ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(name, Param { value, kind });
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(name, init_tensor(shape, kind, rng), kind)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::input(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::input(format!("unknown parameter `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }
}

/// Non-learnable state such as batch norm running statistics.
pub type Buffers = IndexMap<String, Tensor>;

/// Lazily records parameters on a tape the first time a layer asks for them.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    requires_grad: bool,
    bound: RefCell<IndexMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore, requires_grad: bool) -> Self {
        Binder {
            tape,
            store,
            requires_grad,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Makes `name` resolve to an existing var instead of a fresh leaf.
    pub fn preset(&self, name: impl Into<String>, var: Var<'t>) {
        self.bound.borrow_mut().insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let var = self.tape.leaf(value, self.requires_grad);
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Parameters touched so far, in first-use order.
    pub fn into_bound(self) -> IndexMap<String, Var<'t>> {
        self.bound.into_inner()
    }
}
