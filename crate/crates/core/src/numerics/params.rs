use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    frozen: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name,
            value,
            grad,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter leaf bound on `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for &(pid, var) in &graph.bound_params {
            if let Some(g) = graph.grad(var) {
                for (acc, v) in self.params[pid].grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// SHA-256 over names, shapes and values of the selected parameters.
    pub fn checksum_where(&self, mut keep: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    /// Replaces a parameter value, checking that the shape is unchanged.
    pub fn load_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::checkpoint("parameter", name, "<missing>"))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::checkpoint(
                format!("shape of {name}"),
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        value.check_finite(name)?;
        p.value = value;
        Ok(())
    }
}

impl Graph {
    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound_params.iter().find(|(p, _)| *p == id.0) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), !store.is_frozen(id));
        self.bound_params.push((id.0, v));
        v
    }
}

/// How a new parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Receiver for parameter declarations. Model constructors are written
/// against this trait so the same code can allocate weights or only
/// enumerate their shapes.
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId;
}

/// Allocates declared parameters into a store, drawing from `rng`.
pub struct Initializer<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> Initializer<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }
}

impl<R: Rng + ?Sized> ParamSink for Initializer<'_, R> {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::Const(c) => Tensor::full(shape, c),
        };
        self.store.add(name, value)
    }
}

/// Records names and shapes without allocating.
#[derive(Clone, Debug, Default)]
pub struct ShapeRecorder {
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl ParamSink for ShapeRecorder {
    fn declare(&mut self, name: String, shape: &[usize], _init: Init) -> ParamId {
        self.shapes.push((name, shape.to_vec()));
        ParamId(self.shapes.len() - 1)
    }
}
