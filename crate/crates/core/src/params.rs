//! Named parameter storage, gradient slots and seeded initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Trained by the optimizer.
    Learnable,
    /// State carried along but not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot<T: Float> {
    pub name: String,
    pub kind: Kind,
    pub value: Tensor<T>,
}

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            slots: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: Kind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.slots.len();
        self.index.insert(name.clone(), id);
        self.slots.push(Slot { name, kind, value });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{}: shape {:?} does not match stored {:?}",
                    slot.name,
                    value.shape(),
                    slot.value.shape()
                ),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn slot(&self, id: ParamId) -> &Slot<T> {
        &self.slots[id.0]
    }

    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.slots[id.0].kind == Kind::Learnable)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == Kind::Learnable)
            .map(|s| s.value.len())
            .sum()
    }

    /// Learnable scalars whose names start with `prefix`.
    pub fn count_learnable_with_prefix(&self, prefix: &str) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == Kind::Learnable && s.name.starts_with(prefix))
            .map(|s| s.value.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    kind: s.kind,
                    value: s.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Name of the first slot holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.slots
            .iter()
            .find(|s| !s.value.is_finite())
            .map(|s| s.name.as_str())
    }
}

/// One gradient tensor per store slot, zero for buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T: Float> {
    slots: Vec<Tensor<T>>,
}

impl<T: Float> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            slots: store.slots.iter().map(|s| Tensor::zeros_like(&s.value)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.slots[id.0].add_assign(g)
    }

    pub fn zero(&mut self) {
        for g in &mut self.slots {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|g| g.is_finite())
    }
}

/// Seeded initializer that registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

/// Owns the store and generator behind a root [`ParamBuilder`].
pub struct Init<T: Float> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Init<T> {
    pub fn new(seed: u64) -> Self {
        Init {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn root(&mut self) -> ParamBuilder<'_, T> {
        ParamBuilder {
            store: &mut self.store,
            rng: &mut self.rng,
            prefix: String::new(),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

impl<T: Float> ParamBuilder<'_, T> {
    pub fn child(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.path(name),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Truncated normal (cut at two standard deviations), std [`INIT_STD`].
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v: f64 = dist.sample(&mut *self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                data.push(T::of(v));
            }
        }
        self.insert(name, Kind::Learnable, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Kind::Learnable, Tensor::full(shape, T::of(value)))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, Kind::Buffer, value)
    }

    /// Draws a fresh sub-seed, for components that need their own generator.
    pub fn seed(&mut self) -> u64 {
        self.rng.gen()
    }

    fn insert(&mut self, name: &str, kind: Kind, value: Tensor<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, kind, value)
    }
}
