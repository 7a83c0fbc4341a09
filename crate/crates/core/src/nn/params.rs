//! Named parameter storage shared by the model, optimizer, and checkpoints.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Var};

/// Handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. Creation order is the
/// canonical order used by the optimizer and checkpoint format.
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter as a graph leaf, in canonical order.
    /// `trainable` controls whether gradients flow back into them.
    pub fn leaves(&self, graph: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| graph.leaf(v.clone(), trainable)).collect()
    }

    /// Collects per-parameter gradients from a backward pass, given the
    /// leaf vars returned by [`leaves`](Self::leaves). Missing gradients
    /// (parameters not on the loss path) come back as zeros.
    pub fn collect_grads(
        &self,
        leaf_vars: &[Var],
        grads: &[Option<ArrayD<F>>],
    ) -> Vec<ArrayD<F>> {
        leaf_vars
            .iter()
            .enumerate()
            .map(|(i, var)| {
                grads[var.0]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(self.values[i].raw_dim()))
            })
            .collect()
    }

    /// Converts every parameter to `f64` (for checkpointing).
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.iter()
            .map(|(n, v)| {
                (
                    n.to_string(),
                    v.shape().to_vec(),
                    v.iter().map(|x| Real::to_f64(*x)).collect(),
                )
            })
            .collect()
    }

    /// Restores parameter values from exported data. Names and shapes must
    /// match the store's layout exactly.
    pub fn import(&mut self, data: &[(String, Vec<usize>, Vec<f64>)]) -> crate::Result<()> {
        if data.len() != self.values.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                data.len()
            )));
        }
        for (i, (name, shape, values)) in data.iter().enumerate() {
            if name != &self.names[i] || shape != self.values[i].shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {i} mismatch: {} {:?} vs {} {:?}",
                    name,
                    shape,
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(
                IxDyn(shape),
                values.iter().map(|v| F::from_f64(*v)).collect(),
            )
            .map_err(|e| crate::Error::Checkpoint(e.to_string()))?;
            self.values[i] = arr;
        }
        Ok(())
    }
}

/// Kaiming-style uniform init: U(-b, b) with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<F: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::from_f64(rng.random_range(-bound..bound))
    })
}

pub fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}
