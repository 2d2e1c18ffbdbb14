//! Primitive representation learning by global feature aggregation.
//!
//! Both aggregators reduce a feature map to n primitive vectors of d/3
//! channels. The pooling aggregator applies two stride-2 convolutions and
//! a global average pool, so its aggregating weights are uniform and
//! shared by all samples. The weighted aggregator learns sample-specific
//! sigmoid heatmaps and takes the heatmap-weighted sum of a hidden map at
//! the input resolution. One of each runs per pyramid level; the three
//! partial outputs concatenate channel-wise into the n×d primitive set.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::tape::{Tape, TensorRef};
use crate::tensor::Scalar;

/// conv → φ → conv → global average pool, one group of d/3 channels per
/// primitive. Both convolutions are 3×3 stride 2, padding 1.
pub struct PoolingAggregator {
    conv1: Conv2d,
    conv2: Conv2d,
    n: usize,
    part_dim: usize,
}

impl PoolingAggregator {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        n: usize,
        part_dim: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, part_dim, 3, 2, 1);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), part_dim, n * part_dim, 3, 2, 1);
        PoolingAggregator { conv1, conv2, n, part_dim }
    }

    /// The n×(d/3) primitive part for one pyramid level.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: TensorRef,
    ) -> Result<TensorRef> {
        let pre = self.pre_pool(tape, store, f)?;
        let pooled = tape.global_avg_pool(pre)?;
        tape.reshape(pooled, vec![self.n, self.part_dim])
    }

    /// The n·(d/3)-channel map right before pooling; channel group i feeds
    /// primitive i. Exposed for visualization of per-primitive responses.
    pub fn pre_pool<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: TensorRef,
    ) -> Result<TensorRef> {
        let h1 = self.conv1.apply(tape, store, f).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("pooling aggregator: {msg}")),
            other => other,
        })?;
        let a = tape.swish(h1);
        self.conv2.apply(tape, store, a).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("pooling aggregator: {msg}")),
            other => other,
        })
    }
}

/// Heatmap-weighted aggregation: Z from one 3×3 convolution with φ, n
/// sigmoid heatmaps from another, and p_i = Σ_xy H_i(x,y)·Z(x,y).
/// Heatmaps are raw sigmoid responses, deliberately not normalized.
pub struct WeightedAggregator {
    conv3: Conv2d,
    conv4: Conv2d,
}

impl WeightedAggregator {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        n: usize,
        part_dim: usize,
    ) -> Self {
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), c_in, part_dim, 3, 1, 1);
        let conv4 = Conv2d::new(store, rng, &format!("{name}.conv4"), c_in, n, 3, 1, 1);
        WeightedAggregator { conv3, conv4 }
    }

    /// Returns the n×(d/3) primitive part and the n×h×w heatmap stack.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f: TensorRef,
    ) -> Result<(TensorRef, TensorRef)> {
        let z_pre = self.conv3.apply(tape, store, f)?;
        let z = tape.swish(z_pre);
        let h_pre = self.conv4.apply(tape, store, f)?;
        let heatmaps = tape.sigmoid(h_pre);
        // p = flatten(H)ᵀ-rows × flatten(Z): (n×m)·(m×dd)
        let hf = tape.flatten_chw(heatmaps)?;
        let ht = tape.transpose(hf)?;
        let zf = tape.flatten_chw(z)?;
        let p = tape.matmul(ht, zf)?;
        Ok((p, heatmaps))
    }
}

/// Channel-wise concatenation of the three per-level parts, in fixed
/// shallow-to-deep level order.
pub fn assemble_primitives<S: Scalar>(
    tape: &mut Tape<S>,
    parts: &[TensorRef; 3],
) -> Result<TensorRef> {
    let n = tape.shape(parts[0])[0];
    for part in parts {
        let s = tape.shape(*part);
        if s.len() != 2 || s[0] != n {
            return Err(Error::shape(
                "assemble_primitives",
                format!("parts must share the primitive count, got {:?}", s),
            ));
        }
    }
    let ab = tape.concat_cols(parts[0], parts[1])?;
    tape.concat_cols(ab, parts[2])
}
