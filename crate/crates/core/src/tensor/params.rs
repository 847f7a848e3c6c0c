//! Named parameter storage shared by all network modules.
//!
//! A [`ParamStore`] owns the current values; modules keep [`ParamId`]s and
//! materialize graph leaves through a per-forward [`GraphCtx`], so the same
//! parameter used twice in one graph is a single node.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;

use super::{is_trainable, Grads, Real, Tensor};

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<F>>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter under a unique dotted name.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "set: shape mismatch for {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    /// In-place update through a closure; clones only if the value is shared.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<F>)) {
        let arr = Arc::make_mut(&mut self.values[id.0]);
        f(arr);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<F>)> {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (ParamId(i), n.as_str(), self.values[i].as_ref()))
    }
}

/// Per-forward context; memoizes one leaf tensor per parameter.
pub struct GraphCtx<'a, F: Real> {
    store: &'a ParamStore<F>,
    leaves: RefCell<Vec<Option<Tensor<F>>>>,
}

impl<'a, F: Real> GraphCtx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        GraphCtx {
            store,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// The graph leaf for a parameter (created on first use).
    pub fn p(&self, id: ParamId) -> Tensor<F> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.0] {
            return t.clone();
        }
        let t = Tensor::trainable_shared(Arc::clone(&self.store.values[id.0]));
        leaves[id.0] = Some(t.clone());
        t
    }

    /// Collect gradients out of a backward pass, indexed by parameter.
    /// Parameters that did not participate get `None`.
    pub fn param_grads(&self, grads: &Grads<F>) -> Vec<Option<ArrayD<F>>> {
        let leaves = self.leaves.borrow();
        leaves
            .iter()
            .map(|slot| {
                slot.as_ref().and_then(|t| {
                    debug_assert!(is_trainable(t));
                    grads.get(t).cloned()
                })
            })
            .collect()
    }
}
