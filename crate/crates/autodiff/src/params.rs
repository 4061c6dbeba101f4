use std::collections::BTreeMap;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::{AutodiffError, Real};

#[derive(Clone, Debug, PartialEq)]
struct Param {
    value: Tensor,
    trainable: bool,
}

/// Named leaf tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register (or replace) a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                trainable: true,
            },
        );
    }

    /// Register a parameter that is bound as a constant.
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copy every parameter onto `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let var = if p.trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bindings { vars }
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), AutodiffError> {
        for (name, p) in &mut self.entries {
            let src = other
                .get(name)
                .ok_or_else(|| AutodiffError::UnknownParameter { name: name.clone() })?;
            if src.shape() != p.value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "load_from",
                    shapes: vec![p.value.shape().to_vec(), src.shape().to_vec()],
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Variable bound for `name`. Panics on an unknown name: models only
    /// look up parameters they registered themselves.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was never bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient for every trainable parameter of `store`; parameters the
    /// loss does not reach get zeros.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> GradMap {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if !store.is_trainable(name) {
                continue;
            }
            let g = match grads.get(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(name).expect("bound from store").shape()),
            };
            out.insert(name.clone(), g);
        }
        GradMap(out)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(pub BTreeMap<String, Tensor>);

impl GradMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradMap(
            store
                .iter()
                .filter(|(n, _)| store.is_trainable(n))
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    /// `self += other`; names missing from `self` are inserted.
    pub fn accumulate(&mut self, other: &GradMap) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: Real) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> Real {
        self.0.values().map(Tensor::squared_norm).sum::<Real>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}
