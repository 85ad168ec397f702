//! Named learnable parameters and their binding onto a fresh tape per pass.

use std::collections::BTreeMap;

use hd2s_tensor::{Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Vec<f32>,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

/// 64-bit FNV-1a, used to give every parameter its own initialization stream.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            frozen: false,
        });
        id
    }

    /// Uniform initialization in `[-bound, bound)`, seeded by `seed` and the
    /// parameter name so adding parameters never perturbs existing ones.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f32, seed: u64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Parameters in name order.
    pub fn sorted(&self) -> impl Iterator<Item = &Param> {
        self.by_name.values().map(|id| &self.params[id.0])
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes every parameter whose name starts with one of `prefixes` and
    /// unfreezes the rest.
    pub fn freeze_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.frozen = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected tensor `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Adds the gradients recorded in `grads` for every bound parameter.
    pub fn accumulate(&mut self, binder: &Binder, grads: &Gradients<f32>) {
        for (&id, &var) in &binder.bound {
            if let Some(g) = grads.get(var) {
                for (acc, &v) in self.params[id.0].grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

/// Maps parameters onto tape variables, binding each at most once per pass.
#[derive(Debug, Default)]
pub struct Binder {
    bound: BTreeMap<ParamId, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape<f32>, store: &ParamStore, id: ParamId) -> Var {
        *self.bound.entry(id).or_insert_with(|| {
            let p = store.get(id);
            if p.frozen {
                tape.constant(p.value.clone())
            } else {
                tape.variable(p.value.clone())
            }
        })
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }
}

/// A tape plus the parameter bindings made while recording on it.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape<f32>,
    pub binder: Binder,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.binder.bind(&mut self.tape, store, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_insertion_order() {
        let mut a = ParamStore::new();
        a.insert_uniform("x", &[3], 1.0, 5);
        a.insert_uniform("y", &[3], 1.0, 5);
        let mut b = ParamStore::new();
        b.insert_uniform("y", &[3], 1.0, 5);
        assert_eq!(a.by_name("y").unwrap().value, b.by_name("y").unwrap().value);
        assert_ne!(a.by_name("x").unwrap().value, a.by_name("y").unwrap().value);
    }

    #[test]
    fn binding_is_memoized_and_gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let a = g.param(&store, id);
            let b = g.param(&store, id);
            assert_eq!(a, b);
            let s = g.tape.sum(a);
            let grads = g.tape.backward(s).unwrap();
            store.accumulate(&g.binder, &grads);
        }
        assert_eq!(store.get(id).grad, vec![2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    }
}
