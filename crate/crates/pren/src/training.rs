//! Target construction, masked cross-entropy, ADADELTA, the epoch loop,
//! and sequence-accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::synthdata::{LabeledSample, Orientation};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

/// A label expanded to the fixed decoding length: the class sequence
/// `g_1..g_l, ⟨eos⟩, ⟨pad⟩...`, the loss mask covering positions 1..l+1,
/// and the ⟨sos⟩-shifted decoder input for the 2D variants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSeq {
    pub classes: Vec<usize>,
    pub mask: Vec<bool>,
    pub decoder_input: Vec<usize>,
}

pub fn make_targets(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TargetSeq> {
    let encoded = vocab.encode(text)?;
    if encoded.len() + 1 > max_len {
        return Err(Error::Usage(format!(
            "text {text:?} of length {} does not fit decoding length {max_len} with ⟨eos⟩",
            encoded.len()
        )));
    }
    let mut classes = encoded.clone();
    classes.push(vocab.eos());
    let covered = classes.len();
    classes.resize(max_len, vocab.pad());
    let mut mask = vec![true; covered];
    mask.resize(max_len, false);
    let mut decoder_input = Vec::with_capacity(max_len);
    decoder_input.push(vocab.sos());
    decoder_input.extend_from_slice(&classes[..max_len - 1]);
    Ok(TargetSeq { classes, mask, decoder_input })
}

/// Summed negative log-likelihood over the masked positions of one
/// sample's logits. Batch reduction is the mean of these per-sample sums.
pub fn compute_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: TensorRef,
    target: &TargetSeq,
) -> Result<TensorRef> {
    tape.masked_cross_entropy(logits, &target.classes, &target.mask)
}

/// ADADELTA with per-parameter squared-gradient and squared-update
/// accumulators, scaled by an explicit learning rate.
pub struct AdaDelta<S> {
    rho: S,
    eps: S,
    state: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdaDelta<S> {
    pub fn new(store: &ParamStore<S>, rho: f64, eps: f64) -> Self {
        let state = store
            .iter()
            .map(|(_, item)| {
                let shape = item.value.shape().to_vec();
                (Tensor::zeros(shape.clone()), Tensor::zeros(shape))
            })
            .collect();
        AdaDelta { rho: S::from_f64(rho), eps: S::from_f64(eps), state }
    }

    /// Accumulator snapshot aligned with parameter registration order.
    pub fn export_state(&self) -> Vec<(Vec<S>, Vec<S>)> {
        self.state
            .iter()
            .map(|(g, u)| (g.data().to_vec(), u.data().to_vec()))
            .collect()
    }

    pub fn restore_state(&mut self, state: &[(Vec<S>, Vec<S>)]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} entries, expected {}",
                state.len(),
                self.state.len()
            )));
        }
        for ((sq_grad, sq_update), (g, u)) in self.state.iter_mut().zip(state) {
            if sq_grad.len() != g.len() || sq_update.len() != u.len() {
                return Err(Error::Config("optimizer state shape mismatch".into()));
            }
            sq_grad.data_mut().copy_from_slice(g);
            sq_update.data_mut().copy_from_slice(u);
        }
        Ok(())
    }

    /// One update from the gradients currently in the store.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        let lr = S::from_f64(lr);
        let (rho, eps) = (self.rho, self.eps);
        let one_minus = S::one() - rho;
        for ((_, item), (sq_grad, sq_update)) in store.iter_mut().zip(&mut self.state) {
            let grads = item.grad.data();
            if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} ({bad})", item.name)));
            }
            let values = item.value.data_mut();
            let sg = sq_grad.data_mut();
            let su = sq_update.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                sg[i] = rho * sg[i] + one_minus * g * g;
                let delta = -((su[i] + eps).sqrt() / (sg[i] + eps).sqrt()) * g;
                su[i] = rho * su[i] + one_minus * delta * delta;
                values[i] += lr * delta;
            }
        }
        Ok(())
    }
}

/// Step-decay learning rate: `(from_epoch, lr)` pairs, first at epoch 0.
#[derive(Clone, Debug)]
pub struct LrSchedule(Vec<(usize, f64)>);

impl LrSchedule {
    pub fn new(mut steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("learning-rate schedule cannot be empty".into()));
        }
        steps.sort_by_key(|&(e, _)| e);
        if steps[0].0 != 0 {
            return Err(Error::Config("learning-rate schedule must start at epoch 0".into()));
        }
        if steps.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        Ok(LrSchedule(steps))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .take_while(|&&(from, _)| from <= epoch)
            .last()
            .expect("first step is epoch 0")
            .1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// `(from_epoch, lr)` step-decay pairs.
    pub lr_steps: Vec<(usize, f64)>,
    pub clip_norm: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop once test word accuracy reaches this value, if set.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr_steps: vec![(0, 0.5), (2, 0.1)],
            clip_norm: 5.0,
            rho: 0.9,
            eps: 1e-6,
            seed: 1,
            target_accuracy: None,
        }
    }
}

/// One metrics row: per-step rows carry the batch loss; the epoch-end row
/// carries the evaluation accuracy.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

fn batch_loss<S: Scalar>(
    model: &Model<S>,
    batch: &[(&LabeledSample<S>, &TargetSeq)],
) -> Result<(Tape<S>, TensorRef)> {
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for (sample, target) in batch {
        let img = tape.value(sample.image.clone());
        let mut trace = Vec::new();
        let decoder_input = model.kind().is_two_d().then_some(target.decoder_input.as_slice());
        let logits = model.forward_logits(&mut tape, img, decoder_input, &mut trace)?;
        losses.push(compute_loss(&mut tape, logits, target)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, S::from_f64(1.0 / batch.len() as f64));
    Ok((tape, mean))
}

/// One pass over the training set. Batches never mix canvas shapes: each
/// iteration draws wholly from the horizontal-canvas or vertical-canvas
/// subset, in an order shuffled per epoch from the seed.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Scalar>(
    model: &mut Model<S>,
    optimizer: &mut AdaDelta<S>,
    prepared: &[(LabeledSample<S>, TargetSeq)],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    records: &mut Vec<StepRecord>,
    global_step: &mut usize,
) -> Result<EpochStats> {
    if prepared.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut horizontal: Vec<usize> = Vec::new();
    let mut vertical: Vec<usize> = Vec::new();
    for (i, (sample, _)) in prepared.iter().enumerate() {
        match sample.orientation {
            Orientation::Vertical => vertical.push(i),
            _ => horizontal.push(i),
        }
    }
    horizontal.shuffle(&mut rng);
    vertical.shuffle(&mut rng);
    let bs = cfg.batch_size.max(1);
    let mut batches: Vec<Vec<usize>> = horizontal
        .chunks(bs)
        .chain(vertical.chunks(bs))
        .map(|c| c.to_vec())
        .collect();
    batches.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    for (batch_idx, batch) in batches.iter().enumerate() {
        let refs: Vec<(&LabeledSample<S>, &TargetSeq)> =
            batch.iter().map(|&i| (&prepared[i].0, &prepared[i].1)).collect();
        let (mut tape, mean_loss) = batch_loss(model, &refs)?;
        let loss = tape.scalar_value(mean_loss).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss in epoch {epoch}, batch {batch_idx}")));
        }
        tape.backward(mean_loss)?;
        model.store.zero_grads();
        tape.apply_param_grads(&mut model.store);
        let norm = model.store.global_grad_norm();
        if norm > cfg.clip_norm && norm > 0.0 {
            model.store.scale_grads(S::from_f64(cfg.clip_norm / norm));
        }
        optimizer.step(&mut model.store, lr)?;
        loss_sum += loss;
        *global_step += 1;
        records.push(StepRecord { epoch, step: *global_step, loss, lr, accuracy: None });
    }
    Ok(EpochStats { mean_loss: loss_sum / batches.len() as f64, batches: batches.len() })
}

/// Word-accuracy report with a per-orientation breakdown.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// (orientation, correct, total) for every orientation present.
    pub by_orientation: Vec<(Orientation, usize, usize)>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn orientation_accuracy(&self, o: Orientation) -> Option<f64> {
        self.by_orientation
            .iter()
            .find(|(ori, _, total)| *ori == o && *total > 0)
            .map(|(_, c, t)| *c as f64 / *t as f64)
    }

    /// Mean of the horizontal and vertical accuracies (the two columns the
    /// orientation experiments report); falls back to overall accuracy if
    /// neither orientation is present.
    pub fn average_hv(&self) -> f64 {
        let parts: Vec<f64> = [Orientation::Horizontal, Orientation::Vertical]
            .iter()
            .filter_map(|&o| self.orientation_accuracy(o))
            .collect();
        if parts.is_empty() {
            self.accuracy()
        } else {
            parts.iter().sum::<f64>() / parts.len() as f64
        }
    }
}

/// Exact-match accuracy of greedy readout over a dataset.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[LabeledSample<S>]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let mut by: Vec<(Orientation, usize, usize)> = Vec::new();
    for sample in samples {
        let predicted = model.predict(&sample.image)?;
        let hit = predicted == sample.text;
        correct += usize::from(hit);
        match by.iter_mut().find(|(o, _, _)| *o == sample.orientation) {
            Some((_, c, t)) => {
                *c += usize::from(hit);
                *t += 1;
            }
            None => by.push((sample.orientation, usize::from(hit), 1)),
        }
    }
    Ok(EvalReport { total: samples.len(), correct, by_orientation: by })
}
