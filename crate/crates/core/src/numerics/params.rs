use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Prefix reserved for optimizer state stored alongside parameters.
pub const RESERVED_PREFIX: &str = "__";

/// Named parameters, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    /// Incremented on every optimizer update.
    pub version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        t.check_finite(|| format!("parameter {path}"))?;
        self.params.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.params.remove(path)
    }

    /// All entries, including reserved optimizer state.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable entries only.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(k, _)| !k.starts_with(RESERVED_PREFIX))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    /// Copies every entry of `other` into `self`.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(k.to_string(), v.clone());
        }
    }

    /// Square root of the sum of squares of all trainable entries.
    pub fn global_norm(&self) -> f64 {
        self.trainable()
            .map(|(_, t)| t.sum_sq())
            .sum::<f64>()
            .sqrt()
    }
}

/// Graph handles for the entries of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds trainable parameters as gradient-tracking leaves.
    pub fn params<R: Real>(g: &Graph<R>, store: &ParamStore) -> Self {
        Self::bind(g, store, true)
    }

    /// Binds trainable parameters as constants (inference).
    pub fn constants<R: Real>(g: &Graph<R>, store: &ParamStore) -> Self {
        Self::bind(g, store, false)
    }

    fn bind<R: Real>(g: &Graph<R>, store: &ParamStore, grad: bool) -> Self {
        let vars = store
            .trainable()
            .map(|(k, t)| {
                let t = t.cast::<R>();
                let v = if grad { g.param(t) } else { g.constant(t) };
                (k.to_string(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Binds as gradient-free leaves, with `delta` added to one element of
    /// `path`. Used by finite-difference checks.
    pub(crate) fn bind_perturbed<R: Real>(
        g: &Graph<R>,
        store: &ParamStore,
        path: &str,
        index: usize,
        delta: f64,
    ) -> Self {
        let vars = store
            .trainable()
            .map(|(k, t)| {
                let mut t = t.cast::<R>();
                if k == path {
                    let d = &mut t.data_mut()[index];
                    *d = *d + R::of(delta);
                }
                (k.to_string(), g.constant(t))
            })
            .collect();
        Bindings { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Reverse-mode gradient of a scalar loss with respect to every trainable
/// parameter. Returns the loss value and one gradient per parameter.
pub fn grad<F>(params: &ParamStore, loss_fn: F) -> Result<(f32, ParamStore)>
where
    F: FnOnce(&Graph<f32>, &Bindings) -> Result<Var>,
{
    let g = Graph::<f32>::new();
    let b = Bindings::params(&g, params);
    let loss = loss_fn(&g, &b)?;
    let value = g.value(loss);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    let lv = value.data()[0];
    if !lv.is_finite() {
        let paths: Vec<_> = b.iter().map(|(k, _)| k).collect();
        return Err(Error::NonFinite(format!(
            "loss ({lv}) over parameters [{}]",
            paths.join(", ")
        )));
    }
    let grads = g.backward(loss)?;
    let mut out = ParamStore::new();
    for (path, v) in b.iter() {
        let gt = match grads.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(params.get(path)?.shape().to_vec()),
        };
        gt.check_finite(|| format!("gradient of {path}"))?;
        out.params.insert(path.to_string(), gt);
    }
    Ok((lv, out))
}
