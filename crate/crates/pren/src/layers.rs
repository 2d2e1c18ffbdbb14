//! Small parameterized building blocks shared across the model families.

use rand::Rng;

use crate::error::Result;
use crate::params::{kaiming_init, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Scalar, Tensor};

/// A 2-d convolution with learned kernels and per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let kernels = store.add(
            format!("{name}.kernel"),
            kaiming_init(rng, vec![c_out, c_in, k, k], c_in * k * k),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Conv2d { kernels, bias, stride, pad }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b, self.stride, self.pad)
    }
}

/// Fully-connected layer, optionally biased.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        biased: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_init(rng, vec![d_in, d_out], d_in));
        let bias = biased.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Linear { weight, bias }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain and bias, identity-initialized.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(vec![d], S::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]));
        LayerNorm { gain, bias }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}
