//! Named parameter storage and the per-graph binding of parameters to leaves.

use std::collections::HashMap;

use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Learning-rate group (layer index for layer-wise decay).
    pub group: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: usize,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Appends every parameter to `ckpt` under its own name.
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        for p in &self.params {
            ckpt.push(p.name.clone(), AnyTensor::from_real(p.value.clone()));
        }
    }

    /// Overwrites parameters whose names start with `prefix` from `ckpt`.
    ///
    /// Every such parameter must be present with a matching shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing entry `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "entry `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.to_real();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    bufs: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            bufs: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.bufs[id.0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, &y)| *x += y);
        }
    }

    pub fn max_abs_diff(&self, other: &Grads<T>) -> T {
        let mut m = T::zero();
        for (a, b) in self.bufs.iter().zip(&other.bufs) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    pub fn is_nonzero(&self, id: ParamId) -> bool {
        self.bufs[id.0].data().iter().any(|v| *v != T::zero())
    }
}

/// A graph under construction plus the lazily created leaves of its parameters.
pub struct Session<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    frozen: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            frozen: false,
        }
    }

    /// Parameters enter as constants; no gradient is recorded for them.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Session {
            frozen: true,
            ..Session::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Leaf bound to a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.value(id).clone();
        let v = if self.frozen {
            self.g.constant(t)
        } else {
            self.g.input(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Adds the gradients of every bound parameter into `grads`.
    pub fn accumulate_grads(&self, grads: &mut Grads<T>) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(gv) = self.g.grad(*v) {
                    grads.bufs[i]
                        .data_mut()
                        .iter_mut()
                        .zip(gv)
                        .for_each(|(x, &y)| *x += y);
                }
            }
        }
    }
}
