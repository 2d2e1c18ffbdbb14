//! Visual text representation generation and parallel decoding.
//!
//! A single-layer graph-convolution projection Y = φ(B·P·W) turns the n
//! primitive representations into L per-position character vectors; B is
//! a learned L×n coefficient matrix standing in for an adjacency matrix.
//! The parallel head classifies all L rows at once, so decoding has no
//! sequential dependence whatsoever.

use rand::Rng;

use crate::error::Result;
use crate::layers::Linear;
use crate::params::{kaiming_init, uniform_init, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

/// One graph-convolution projection: Y = φ(B·P·W).
pub struct GcnProjector {
    pub coeff: ParamId,
    pub weight: ParamId,
}

impl GcnProjector {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        max_len: usize,
        n: usize,
        d: usize,
    ) -> Self {
        // B has no topology to inherit; it starts random and is learned
        let bound = 1.0 / (n as f64).sqrt();
        let coeff = store.add(format!("{name}.coeff"), uniform_init(rng, vec![max_len, n], bound));
        let weight = store.add(format!("{name}.weight"), kaiming_init(rng, vec![d, d], d));
        GcnProjector { coeff, weight }
    }

    pub fn project<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        primitives: TensorRef,
    ) -> Result<TensorRef> {
        let b = tape.param(store, self.coeff);
        let w = tape.param(store, self.weight);
        let bp = tape.matmul(b, primitives)?;
        let bpw = tape.matmul(bp, w)?;
        Ok(tape.swish(bpw))
    }
}

/// Elementwise sum of the two visual text representation streams.
pub fn fuse_vtr<S: Scalar>(tape: &mut Tape<S>, y1: TensorRef, y2: TensorRef) -> Result<TensorRef> {
    tape.add(y1, y2)
}

/// Shared linear classifier over every decoding position.
pub struct ParallelHead {
    linear: Linear,
}

impl ParallelHead {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d: usize,
        classes: usize,
    ) -> Self {
        ParallelHead { linear: Linear::new(store, rng, name, d, classes, true) }
    }

    /// Raw L×K logits; training consumes these.
    pub fn logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        vtr: TensorRef,
    ) -> Result<TensorRef> {
        self.linear.apply(tape, store, vtr)
    }

    /// Row-wise class distributions for all L positions at once.
    pub fn probabilities<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        vtr: TensorRef,
    ) -> Result<TensorRef> {
        let logits = self.logits(tape, store, vtr)?;
        Ok(tape.softmax_lastdim(logits))
    }
}

/// Argmax each row (ties to the lowest class index), truncate at the
/// first ⟨eos⟩. Rows that argmax to ⟨pad⟩ without a preceding ⟨eos⟩ are
/// skipped; if no ⟨eos⟩ appears within L rows, all L symbols are emitted.
pub fn greedy_readout<S: Scalar>(probs: &Tensor<S>, vocab: &Vocabulary) -> String {
    assert_eq!(probs.shape().len(), 2, "greedy_readout expects L x K rows");
    let k = probs.shape()[1];
    let mut picks = Vec::with_capacity(probs.shape()[0]);
    for row in probs.data().chunks_exact(k) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        picks.push(best);
    }
    vocab.decode(&picks)
}
