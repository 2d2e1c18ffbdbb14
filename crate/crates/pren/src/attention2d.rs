//! 2D-attention encoder-decoder stack.
//!
//! The encoder runs modified self-attention over the fused feature map:
//! queries and keys come from 3×3 convolutional neighborhoods of each
//! feature element, values from the raw per-position features, so the
//! attention weights can exploit local spatial structure. The decoder is
//! a small pre-norm transformer whose inputs are character embeddings,
//! optionally gate-fused with the visual text representations row by row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{kaiming_init, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef, MASKED_LOGIT};
use crate::tensor::{Scalar, Tensor};

/// Fixed sinusoidal encoding of one axis position into `dims` channels.
fn fill_sinusoidal(row: &mut [f64], pos: f64, dims: usize) {
    for i in 0..dims {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dims as f64);
        row[i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
    }
}

/// 1D positional encoding table, len×d.
pub fn sinusoidal_1d<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = vec![0.0f64; len * d];
    for pos in 0..len {
        fill_sinusoidal(&mut data[pos * d..(pos + 1) * d], pos as f64, d);
    }
    Tensor::from_vec(vec![len, d], data.into_iter().map(S::from_f64).collect()).expect("pe shape")
}

/// 2D positional encoding for an h×w grid flattened row-major to
/// (h·w)×d; the first half of the channels encodes the row index, the
/// second half the column index.
pub fn sinusoidal_2d<S: Scalar>(h: usize, w: usize, d: usize) -> Tensor<S> {
    let dy = d / 2;
    let dx = d - dy;
    let mut data = vec![0.0f64; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            fill_sinusoidal(&mut row[..dy], y as f64, dy);
            fill_sinusoidal(&mut row[dy..], x as f64, dx);
        }
    }
    Tensor::from_vec(vec![h * w, d], data.into_iter().map(S::from_f64).collect()).expect("pe shape")
}

/// Named attention probability matrices collected during a forward pass;
/// every row of every entry sums to 1.
pub type AttentionTrace = Vec<(String, TensorRef)>;

struct FeedForward {
    expand: Linear,
    contract: Linear,
}

impl FeedForward {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        FeedForward {
            expand: Linear::new(store, rng, &format!("{name}.expand"), d, 4 * d, true),
            contract: Linear::new(store, rng, &format!("{name}.contract"), 4 * d, d, true),
        }
    }

    fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let h = self.expand.apply(tape, store, x)?;
        let h = tape.swish(h);
        self.contract.apply(tape, store, h)
    }
}

/// One encoder block: convolutional-neighborhood query/key attention with
/// residual, then a feed-forward with residual, both pre-normalized.
pub struct EncoderBlock {
    f_conv: Conv2d,
    g_conv: Conv2d,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    ln_attn: LayerNorm,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    d: usize,
}

impl EncoderBlock {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        EncoderBlock {
            f_conv: Conv2d::new(store, rng, &format!("{name}.f_conv"), d, d, 3, 1, 1),
            g_conv: Conv2d::new(store, rng, &format!("{name}.g_conv"), d, d, 3, 1, 1),
            w_q: store.add(format!("{name}.w_q"), kaiming_init(rng, vec![d, d], d)),
            w_k: store.add(format!("{name}.w_k"), kaiming_init(rng, vec![d, d], d)),
            w_v: store.add(format!("{name}.w_v"), kaiming_init(rng, vec![d, d], d)),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d),
            d,
        }
    }

    /// Modified self-attention over a d×h×w map: queries and keys from
    /// 3×3 convolutions, values from the raw flattened features. Returns
    /// the (h·w)×d output and the (h·w)×(h·w) attention matrix.
    pub fn local_qk_attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        f_map: TensorRef,
    ) -> Result<(TensorRef, TensorRef)> {
        let shape = tape.shape(f_map).to_vec();
        if shape.len() != 3 || shape[0] != self.d {
            return Err(Error::shape(
                "local_qk_attention",
                format!("expected {}xHxW map, got {shape:?}", self.d),
            ));
        }
        let fq = self.f_conv.apply(tape, store, f_map)?;
        let gk = self.g_conv.apply(tape, store, f_map)?;
        let q_src = tape.flatten_chw(fq)?;
        let k_src = tape.flatten_chw(gk)?;
        let x_rows = tape.flatten_chw(f_map)?;
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        let q = tape.matmul(q_src, w_q)?;
        let k = tape.matmul(k_src, w_k)?;
        let v = tape.matmul(x_rows, w_v)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, S::from_f64(1.0 / (self.d as f64).sqrt()));
        let probs = tape.softmax_lastdim(scaled);
        let out = tape.matmul(probs, v)?;
        Ok((out, probs))
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
        h: usize,
        w: usize,
    ) -> Result<(TensorRef, TensorRef)> {
        let normed = self.ln_attn.apply(tape, store, x)?;
        let as_map = tape.rows_to_chw(normed, h, w)?;
        let (attn, probs) = self.local_qk_attention(tape, store, as_map)?;
        let x = tape.add(x, attn)?;
        let normed = self.ln_ffn.apply(tape, store, x)?;
        let ff = self.ffn.apply(tape, store, normed)?;
        let x = tape.add(x, ff)?;
        Ok((x, probs))
    }
}

/// N identical encoder blocks over the fused map, preceded by a 2D
/// sinusoidal positional encoding on the flattened features.
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    d: usize,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, d: usize, n_blocks: usize) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("enc.{i}"), d))
            .collect();
        Encoder { blocks, d }
    }

    /// Encode a d×h×w fused map into (h·w)×d memory rows.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        fused: TensorRef,
        trace: &mut AttentionTrace,
    ) -> Result<TensorRef> {
        let shape = tape.shape(fused).to_vec();
        if shape.len() != 3 || shape[0] != self.d {
            return Err(Error::shape("encode", format!("expected {}xHxW map, got {shape:?}", self.d)));
        }
        let (h, w) = (shape[1], shape[2]);
        let rows = tape.flatten_chw(fused)?;
        let pe = tape.value(sinusoidal_2d::<S>(h, w, self.d));
        let mut x = tape.add(rows, pe)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, probs) = block.forward(tape, store, x, h, w)?;
            trace.push((format!("enc.{i}"), probs));
            x = next;
        }
        Ok(x)
    }
}

/// Gated convex combination of visual text representations and character
/// embeddings: z = σ([Y,E]·W_z), out = z⊙Y + (1−z)⊙E.
pub struct GateUnit {
    pub w_z: ParamId,
}

impl GateUnit {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        GateUnit { w_z: store.add(format!("{name}.w_z"), kaiming_init(rng, vec![2 * d, d], 2 * d)) }
    }

    pub fn fuse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        vtr: TensorRef,
        emb: TensorRef,
    ) -> Result<TensorRef> {
        if tape.shape(vtr) != tape.shape(emb) {
            return Err(Error::shape(
                "gate_fuse",
                format!("{:?} vs {:?}", tape.shape(vtr), tape.shape(emb)),
            ));
        }
        let both = tape.concat_cols(vtr, emb)?;
        let w_z = tape.param(store, self.w_z);
        let logits = tape.matmul(both, w_z)?;
        let z = tape.sigmoid(logits);
        // e + z*(y - e) is the same convex combination with one multiply
        let delta = tape.sub(vtr, emb)?;
        let gated = tape.mul(z, delta)?;
        tape.add(emb, gated)
    }
}

struct AttentionParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
}

impl AttentionParams {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        AttentionParams {
            w_q: store.add(format!("{name}.w_q"), kaiming_init(rng, vec![d, d], d)),
            w_k: store.add(format!("{name}.w_k"), kaiming_init(rng, vec![d, d], d)),
            w_v: store.add(format!("{name}.w_v"), kaiming_init(rng, vec![d, d], d)),
            w_o: store.add(format!("{name}.w_o"), kaiming_init(rng, vec![d, d], d)),
        }
    }
}

fn causal_mask<S: Scalar>(len: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = S::from_f64(MASKED_LOGIT);
        }
    }
    Tensor::from_vec(vec![len, len], data).expect("mask shape")
}

/// Standard multi-head attention; every head's probability matrix is
/// appended to `probs_out`.
#[allow(clippy::too_many_arguments)]
fn multi_head<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &AttentionParams,
    q_src: TensorRef,
    kv_src: TensorRef,
    heads: usize,
    causal: bool,
    probs_out: &mut Vec<TensorRef>,
) -> Result<TensorRef> {
    let d = tape.shape(q_src)[1];
    let dh = d / heads;
    let w_q = tape.param(store, params.w_q);
    let w_k = tape.param(store, params.w_k);
    let w_v = tape.param(store, params.w_v);
    let q = tape.matmul(q_src, w_q)?;
    let k = tape.matmul(kv_src, w_k)?;
    let v = tape.matmul(kv_src, w_v)?;
    let mask = causal.then(|| tape.value(causal_mask::<S>(tape.shape(q)[0])));
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let mut scaled = tape.scale(logits, scale);
        if let Some(m) = mask {
            scaled = tape.add(scaled, m)?;
        }
        let probs = tape.softmax_lastdim(scaled);
        probs_out.push(probs);
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let mut cat = head_outs[0];
    for &h in &head_outs[1..] {
        cat = tape.concat_cols(cat, h)?;
    }
    let w_o = tape.param(store, params.w_o);
    tape.matmul(cat, w_o)
}

struct DecoderBlock {
    self_attn: AttentionParams,
    cross_attn: AttentionParams,
    ln_self: LayerNorm,
    ln_cross: LayerNorm,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize) -> Self {
        DecoderBlock {
            self_attn: AttentionParams::new(store, rng, &format!("{name}.self"), d),
            cross_attn: AttentionParams::new(store, rng, &format!("{name}.cross"), d),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d),
        }
    }
}

/// Transformer decoder with causal self-attention, cross-attention to the
/// encoder memory, and an output projection to class logits.
pub struct Decoder {
    pub embedding: ParamId,
    blocks: Vec<DecoderBlock>,
    out_proj: Linear,
    d: usize,
    heads: usize,
    max_len: usize,
}

pub struct DecoderOutput {
    pub logits: TensorRef,
    /// Cross-attention of the final block, one (len×m) matrix per head.
    pub final_cross_attention: Vec<TensorRef>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        in_symbols: usize,
        classes: usize,
        d: usize,
        heads: usize,
        n_blocks: usize,
        max_len: usize,
    ) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        let embedding = store.add("dec.embedding", kaiming_init(rng, vec![in_symbols, d], d));
        let blocks = (0..n_blocks)
            .map(|i| DecoderBlock::new(store, rng, &format!("dec.{i}"), d))
            .collect();
        let out_proj = Linear::new(store, rng, "dec.out", d, classes, true);
        Ok(Decoder { embedding, blocks, out_proj, d, heads, max_len })
    }

    /// Decode `input_ids` (⟨sos⟩-shifted) against the encoder memory.
    /// When a gate and visual text representations are supplied, each
    /// embedding row t is fused with VTR row t before entering the blocks.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input_ids: &[usize],
        memory: TensorRef,
        vtr_and_gate: Option<(TensorRef, &GateUnit)>,
        trace: &mut AttentionTrace,
    ) -> Result<DecoderOutput> {
        let len = input_ids.len();
        if len == 0 || len > self.max_len {
            return Err(Error::Usage(format!(
                "decoder input length {len} outside 1..={}",
                self.max_len
            )));
        }
        let table = tape.param(store, self.embedding);
        let emb = tape.embed(table, input_ids)?;
        let fused = match vtr_and_gate {
            Some((vtr, gate)) => {
                let vtr_rows = if tape.shape(vtr)[0] == len {
                    vtr
                } else {
                    tape.slice_rows(vtr, 0, len)?
                };
                gate.fuse(tape, store, vtr_rows, emb)?
            }
            None => emb,
        };
        let pe_full = tape.value(sinusoidal_1d::<S>(self.max_len, self.d));
        let pe = tape.slice_rows(pe_full, 0, len)?;
        let mut x = tape.add(fused, pe)?;
        let mut final_cross = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let normed = block.ln_self.apply(tape, store, x)?;
            let mut self_probs = Vec::new();
            let sa = multi_head(tape, store, &block.self_attn, normed, normed, self.heads, true, &mut self_probs)?;
            for (h, p) in self_probs.iter().enumerate() {
                trace.push((format!("dec.{i}.self.h{h}"), *p));
            }
            x = tape.add(x, sa)?;

            let normed = block.ln_cross.apply(tape, store, x)?;
            let mut cross_probs = Vec::new();
            let ca = multi_head(tape, store, &block.cross_attn, normed, memory, self.heads, false, &mut cross_probs)?;
            for (h, p) in cross_probs.iter().enumerate() {
                trace.push((format!("dec.{i}.cross.h{h}"), *p));
            }
            if i + 1 == self.blocks.len() {
                final_cross = cross_probs;
            }
            x = tape.add(x, ca)?;

            let normed = block.ln_ffn.apply(tape, store, x)?;
            let ff = block.ffn.apply(tape, store, normed)?;
            x = tape.add(x, ff)?;
        }
        let logits = self.out_proj.apply(tape, store, x)?;
        Ok(DecoderOutput { logits, final_cross_attention: final_cross })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_init(&mut rng, shape, 1.0)
    }

    fn zero_param(store: &mut ParamStore<f64>, name: &str) {
        let id = store.find(name).unwrap_or_else(|| panic!("missing {name}"));
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(shape);
    }

    #[test]
    fn single_element_attention_is_identity_times_wv() {
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = EncoderBlock::new(&mut store, &mut rng, "blk", d);
        let mut tape = Tape::new();
        let f = tape.value(rand_t(2, vec![d, 1, 1]));
        let (out, probs) = block.local_qk_attention(&mut tape, &store, f).unwrap();
        assert_eq!(tape.data(probs), &[1.0]);
        // output must equal f_1 · W_V exactly
        let rows = tape.flatten_chw(f).unwrap();
        let wv = tape.param(&store, block.w_v);
        let direct = tape.matmul(rows, wv).unwrap();
        assert_eq!(tape.data(out), tape.data(direct));
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = EncoderBlock::new(&mut store, &mut rng, "blk", d);
        zero_param(&mut store, "blk.w_q");
        let mut tape = Tape::new();
        let f = tape.value(rand_t(3, vec![d, 2, 3]));
        let (out, probs) = block.local_qk_attention(&mut tape, &store, f).unwrap();
        let m = 6;
        for &p in tape.data(probs) {
            assert!((p - 1.0 / m as f64).abs() < 1e-12);
        }
        // uniform attention averages the value rows
        let rows = tape.flatten_chw(f).unwrap();
        let wv = tape.param(&store, block.w_v);
        let v = tape.matmul(rows, wv).unwrap();
        let vd = tape.data(v);
        for j in 0..d {
            let mean: f64 = (0..m).map(|i| vd[i * d + j]).sum::<f64>() / m as f64;
            for i in 0..m {
                assert!((tape.data(out)[i * d + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_attention_matches_naive_oracle() {
        let d = 5;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = EncoderBlock::new(&mut store, &mut rng, "blk", d);
        for seed in 0..10u64 {
            let mut tape = Tape::new();
            let f = tape.value(rand_t(50 + seed, vec![d, 3, 4]));
            let (out, _) = block.local_qk_attention(&mut tape, &store, f).unwrap();
            // naive O(m^2) oracle from the staged q/k/v values
            let fq = block.f_conv.apply(&mut tape, &store, f).unwrap();
            let gk = block.g_conv.apply(&mut tape, &store, f).unwrap();
            let q_src = tape.flatten_chw(fq).unwrap();
            let k_src = tape.flatten_chw(gk).unwrap();
            let x_rows = tape.flatten_chw(f).unwrap();
            let (wq, wk, wv) = (
                tape.param(&store, block.w_q),
                tape.param(&store, block.w_k),
                tape.param(&store, block.w_v),
            );
            let q = tape.matmul(q_src, wq).unwrap();
            let k = tape.matmul(k_src, wk).unwrap();
            let v = tape.matmul(x_rows, wv).unwrap();
            let (qd, kd, vd) = (
                tape.tensor(q),
                tape.tensor(k),
                tape.tensor(v),
            );
            let m = 12;
            let mut expect = vec![0.0f64; m * d];
            for i in 0..m {
                let mut logits = vec![0.0f64; m];
                for j in 0..m {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += qd.at2(i, c) * kd.at2(j, c);
                    }
                    logits[j] = dot / (d as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..m {
                    for c in 0..d {
                        expect[i * d + c] += exps[j] / z * vd.at2(j, c);
                    }
                }
            }
            let got = tape.data(out);
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-10, "seed {seed}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let d = 6;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&mut store, &mut rng, d, 2);
        let run = || {
            let mut tape = Tape::new();
            let f = tape.value(rand_t(5, vec![d, 4, 8]));
            let mut trace = Vec::new();
            let v = enc.encode(&mut tape, &store, f, &mut trace).unwrap();
            assert_eq!(tape.shape(v), &[32, d]);
            assert_eq!(trace.len(), 2);
            tape.data(v).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_residual_path_with_zeroed_sublayers() {
        // with W_V and both FFN contractions zeroed, each block is the
        // identity, so the output is exactly input rows + positional code
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&mut store, &mut rng, d, 2);
        for i in 0..2 {
            zero_param(&mut store, &format!("enc.{i}.w_v"));
            zero_param(&mut store, &format!("enc.{i}.ffn.contract.weight"));
        }
        let mut tape = Tape::new();
        let f = tape.value(rand_t(7, vec![d, 2, 4]));
        let mut trace = Vec::new();
        let v = enc.encode(&mut tape, &store, f, &mut trace).unwrap();
        let rows = tape.flatten_chw(f).unwrap();
        let pe = tape.value(sinusoidal_2d::<f64>(2, 4, d));
        let expect = tape.add(rows, pe).unwrap();
        assert_eq!(tape.data(v), tape.data(expect));
    }

    #[test]
    fn gate_zero_weights_average_inputs() {
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gate = GateUnit::new(&mut store, &mut rng, "gate", d);
        zero_param(&mut store, "gate.w_z");
        let mut tape = Tape::new();
        let y = tape.value(rand_t(9, vec![3, d]));
        let e = tape.value(rand_t(10, vec![3, d]));
        let out = gate.fuse(&mut tape, &store, y, e).unwrap();
        let (yd, ed, od) = (tape.data(y), tape.data(e), tape.data(out));
        for i in 0..od.len() {
            assert!((od[i] - 0.5 * (yd[i] + ed[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_equal_inputs_pass_through() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gate = GateUnit::new(&mut store, &mut rng, "gate", d);
        let mut tape = Tape::new();
        let y = tape.value(rand_t(12, vec![2, d]));
        let out = gate.fuse(&mut tape, &store, y, y).unwrap();
        assert_eq!(tape.data(out), tape.data(y));
    }

    #[test]
    fn gate_output_is_elementwise_between_inputs() {
        let d = 5;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gate = GateUnit::new(&mut store, &mut rng, "gate", d);
        for seed in 0..10u64 {
            let mut tape = Tape::new();
            let y = tape.value(rand_t(200 + seed, vec![4, d]));
            let e = tape.value(rand_t(300 + seed, vec![4, d]));
            let out = gate.fuse(&mut tape, &store, y, e).unwrap();
            let (yd, ed, od) = (tape.data(y), tape.data(e), tape.data(out));
            for i in 0..od.len() {
                let (lo, hi) = (yd[i].min(ed[i]), yd[i].max(ed[i]));
                assert!(od[i] >= lo - 1e-12 && od[i] <= hi + 1e-12);
            }
        }
    }

    fn tiny_decoder(seed: u64) -> (ParamStore<f64>, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(&mut store, &mut rng, 13, 12, 8, 2, 2, 6).unwrap();
        (store, dec)
    }

    #[test]
    fn decoder_causality_under_input_perturbation() {
        let (store, dec) = tiny_decoder(20);
        let mut tape = Tape::new();
        let memory = tape.value(rand_t(21, vec![10, 8]));
        let ids_a = [12usize, 0, 1, 2, 3, 4];
        let ids_b = [12usize, 0, 1, 2, 3, 9]; // differs at position 5
        let mut trace = Vec::new();
        let out_a = dec.forward(&mut tape, &store, &ids_a, memory, None, &mut trace).unwrap();
        let out_b = dec.forward(&mut tape, &store, &ids_b, memory, None, &mut trace).unwrap();
        let (la, lb) = (tape.data(out_a.logits), tape.data(out_b.logits));
        let k = 12;
        for pos in 0..5 {
            assert_eq!(&la[pos * k..(pos + 1) * k], &lb[pos * k..(pos + 1) * k], "position {pos} leaked");
        }
        assert_ne!(&la[5 * k..6 * k], &lb[5 * k..6 * k]);
    }

    #[test]
    fn decoder_attention_rows_sum_to_one() {
        let (store, dec) = tiny_decoder(22);
        let mut tape = Tape::new();
        let memory = tape.value(rand_t(23, vec![10, 8]));
        let mut trace = Vec::new();
        let _ = dec.forward(&mut tape, &store, &[12, 0, 1, 2], memory, None, &mut trace).unwrap();
        assert!(!trace.is_empty());
        for (name, probs) in &trace {
            let shape = tape.shape(*probs).to_vec();
            for row in tape.data(*probs).chunks_exact(shape[1]) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "{name} row sums to {sum}");
            }
        }
    }

    #[test]
    fn decoder_rejects_overlong_input() {
        let (store, dec) = tiny_decoder(24);
        let mut tape = Tape::new();
        let memory = tape.value(rand_t(25, vec![4, 8]));
        let ids = vec![12usize; 7]; // max_len is 6
        let mut trace = Vec::new();
        assert!(dec.forward(&mut tape, &store, &ids, memory, None, &mut trace).is_err());
    }

    #[test]
    fn positional_encodings_are_bounded_and_distinct() {
        let pe: Tensor<f64> = sinusoidal_1d(10, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let row = |i: usize| &pe.data()[i * 8..(i + 1) * 8];
        assert_ne!(row(0), row(1));

        let pe2: Tensor<f64> = sinusoidal_2d(3, 4, 6);
        assert_eq!(pe2.shape(), &[12, 6]);
        // distinct grid positions get distinct codes
        let r = |i: usize| &pe2.data()[i * 6..(i + 1) * 6];
        assert_ne!(r(0), r(1));
        assert_ne!(r(0), r(4));
    }
}
