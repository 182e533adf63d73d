//! Named parameter storage, tape bindings and the SGD optimiser.

use std::ops::Index;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Put every parameter on `tape`: as gradient leaves on a training tape,
    /// as constants on an inference tape.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let grad = tape.grad_enabled();
        Bindings(
            self.values
                .iter()
                .map(|v| if grad { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
                .collect(),
        )
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }

    /// Serialise as a sequence of binary tensor records in store order.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for v in &self.values {
            v.write_to(w)?;
        }
        Ok(())
    }

    /// Overwrite every value from records written by [`ParamStore::write_to`].
    pub fn read_values_from<R: std::io::Read>(&mut self, r: &mut R) -> Result<()> {
        for i in 0..self.values.len() {
            let t = Tensor::read_from(r)?;
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bindings {
    /// Bindings over vars laid out in store order, e.g. by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
    lr_scale: Vec<f64>,
    max_norm: Option<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
            lr_scale: Vec::new(),
            max_norm: None,
        }
    }

    /// Rescale each step's gradient to global L2 norm at most `max_norm`.
    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_norm = Some(max_norm);
        self
    }

    /// Multiply the learning rate of every parameter by `mult` except those in `base`.
    pub fn with_group_scale(mut self, store: &ParamStore, mult: f64, base: &[ParamId]) -> Self {
        self.lr_scale = store.ids().map(|id| if base.contains(&id) { 1.0 } else { mult }).collect();
        self
    }

    /// Apply one update from the gradients of `binds` (parameters without a
    /// gradient are left untouched).
    pub fn step(&mut self, store: &mut ParamStore, binds: &Bindings, grads: &Gradients) {
        self.velocity.resize_with(store.len(), || None);
        let mut factor = 1.0;
        if let Some(max) = self.max_norm {
            let sq: f64 = store
                .ids()
                .filter_map(|id| grads.get(binds[id]))
                .flat_map(|g| g.data().iter().map(|x| x * x))
                .sum();
            if sq.sqrt() > max {
                factor = max / sq.sqrt();
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(binds[id]) else { continue };
            let vel = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            let lr = self.lr * self.lr_scale.get(id.0).copied().unwrap_or(1.0);
            let p = store.values[id.0].data_mut();
            for ((pv, vv), gv) in p.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + factor * gv;
                *pv -= lr * *vv;
            }
        }
    }

    pub(crate) fn clamp(store: &mut ParamStore, id: ParamId, lo: f64, hi: f64) {
        for v in store.values[id.0].data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}
