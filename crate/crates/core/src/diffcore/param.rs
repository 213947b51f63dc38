use crate::diffcore::{Gradients, Tape, Tensor};

/// Handle to a trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors, their gradient
/// accumulators, and non-trainable buffers (batch-norm statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

/// Handle to a non-trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffer_names
            .iter()
            .map(String::as_str)
            .zip(self.buffers.iter())
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.buffers.iter_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Values and gradients side by side, for optimizers.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.values.iter_mut().zip(self.grads.iter())
    }

    /// Parameters then buffers, in declaration order.
    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut().chain(self.buffers.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Add the gradients that `tape` produced for parameter leaves.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, g) in grads.param_grads(tape) {
            self.grads[id.0].axpy(1.0, g);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Sum over all parameter values, weighted by position; cheap fingerprint
    /// for detecting unintended mutation.
    pub fn fingerprint(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|t| t.data().iter())
            .enumerate()
            .map(|(i, x)| x * (1.0 + (i % 97) as f64))
            .sum()
    }
}
