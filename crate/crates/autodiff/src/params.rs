use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
///
/// Values are reference counted so binding them onto a tape does not copy;
/// optimizer updates copy-on-write once no tape holds them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(Arc::as_ref)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Puts every parameter on `tape`. Only names accepted by `trainable`
    /// request gradients.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf_shared(Arc::clone(v), trainable(k))))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to handles already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    /// Collects gradients for every bound parameter that received one.
    pub fn gradients(&self, grads: &Gradients) -> GradSet {
        let grads = self
            .vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect();
        GradSet { grads }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` (names missing on either side are kept).
    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "accumulate",
                            left: mine.shape().to_vec(),
                            right: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
