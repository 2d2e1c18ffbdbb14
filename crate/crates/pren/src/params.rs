//! Named parameter storage shared by every model variant.
//!
//! Parameters live outside any tape; a forward pass stages them onto a
//! [`crate::tape::Tape`] and `apply_param_grads` routes gradients back here.
//! Registration order is deterministic, so checkpoints and optimizer state
//! can address parameters by index or name interchangeably.

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamItem<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

pub struct ParamStore<S> {
    items: Vec<ParamItem<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { items: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.items.iter().all(|it| it.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.items.push(ParamItem { name, value, grad });
        ParamId(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamItem<S> {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamItem<S> {
        &mut self.items[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|it| it.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamItem<S>)> {
        self.items.iter().enumerate().map(|(i, it)| (ParamId(i), it))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamItem<S>)> {
        self.items.iter_mut().enumerate().map(|(i, it)| (ParamId(i), it))
    }

    pub fn zero_grads(&mut self) {
        for it in &mut self.items {
            for g in it.grad.data_mut() {
                *g = S::zero();
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.items.iter().map(|it| it.value.len()).sum()
    }

    /// Euclidean norm over every gradient entry in the store.
    pub fn global_grad_norm(&self) -> f64 {
        let ss: f64 = self
            .items
            .iter()
            .flat_map(|it| it.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum();
        ss.sqrt()
    }

    /// Scale every gradient entry by `factor`.
    pub fn scale_grads(&mut self, factor: S) {
        for it in &mut self.items {
            for g in it.grad.data_mut() {
                *g *= factor;
            }
        }
    }
}

/// Uniform init in `[-bound, bound]`, sampled in f64 for cross-precision parity.
pub fn uniform_init<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    let n = crate::tensor::numel(&shape);
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("uniform_init shape")
}

/// Kaiming-style fan-in scaled uniform init for conv kernels and matrices.
pub fn kaiming_init<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = (3.0 / fan_in as f64).sqrt();
    uniform_init(rng, shape, bound)
}
