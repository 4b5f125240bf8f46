//! Layers, parameter storage and the optimizer.
//!
//! Parameters live in a [`ParamStore`] between steps. A [`Session`] wraps one
//! forward/backward pass: it lazily copies each parameter into the graph the
//! first time a layer asks for it and hands the gradients back afterwards.

mod layers;
mod optim;
mod store;

pub use layers::{BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use optim::{cosine_factor, AdamW, AdamWConfig};
pub use store::{stream_seed, Entry, EntryKind, Init, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// One forward (and optionally backward) pass over a model's parameters.
pub struct Session<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
}

/// Gradients of the loss with respect to every parameter a session touched.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.by_param.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let (_, entry) = self.store.entry(id);
        let value = entry.value.clone();
        let v = match entry.kind {
            EntryKind::Param => self.graph.param(value),
            EntryKind::Buffer => self.graph.constant(value),
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Run `f` with nodes labelled under `name` (used by the cost profiler).
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.graph.push_scope(name);
        let out = f(self);
        self.graph.pop_scope();
        out
    }

    /// Backpropagate from `loss` and collect one gradient per bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.graph.backward(loss)?;
        let mut by_param = vec![None; self.bound.len()];
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if self.graph.requires_grad(*v) {
                    let g = self
                        .graph
                        .grad(*v)
                        .cloned()
                        .ok_or_else(|| Error::Invariant("bound parameter without gradient".into()))?;
                    by_param[i] = Some(g);
                }
            }
        }
        Ok(Gradients { by_param })
    }

    /// Graph nodes that hold bound parameters, in store order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
