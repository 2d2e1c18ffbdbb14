//! Multiscale convolutional feature extractor.
//!
//! A stem plus residual blocks emit three feature stages tapped from the
//! last three blocks. With the default configuration the taps sit at 1/8,
//! 1/16, and 1/32 of the input scale and the deepest stage has a channel
//! count divisible by 3, so each of the three aggregators contributes an
//! equal share of the primitive representation width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Residual stages; the pyramid taps the last three.
    pub stages: Vec<StageConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Cumulative stride 32 with taps at 1/8, 1/16, 1/32.
        BackboneConfig {
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![
                StageConfig { channels: 16, stride: 1 },
                StageConfig { channels: 24, stride: 2 },
                StageConfig { channels: 32, stride: 2 },
                StageConfig { channels: 40, stride: 2 },
                StageConfig { channels: 48, stride: 2 },
            ],
        }
    }
}

impl BackboneConfig {
    /// Scaled-down counterpart of the default, same shape contract. The
    /// channel ladder (8..24) trains in minutes on one CPU core.
    pub fn small() -> Self {
        BackboneConfig {
            stem_channels: 8,
            stem_stride: 2,
            stages: vec![
                StageConfig { channels: 8, stride: 1 },
                StageConfig { channels: 12, stride: 2 },
                StageConfig { channels: 16, stride: 2 },
                StageConfig { channels: 20, stride: 2 },
                StageConfig { channels: 24, stride: 2 },
            ],
        }
    }

    /// Minimal configuration for gradient checks on 8x16 images.
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![
                StageConfig { channels: 4, stride: 1 },
                StageConfig { channels: 4, stride: 1 },
                StageConfig { channels: 6, stride: 1 },
                StageConfig { channels: 6, stride: 2 },
                StageConfig { channels: 6, stride: 2 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 3 {
            return Err(Error::Config("backbone needs at least three stages for the pyramid taps".into()));
        }
        if self.stem_stride == 0 || self.stages.iter().any(|s| s.stride == 0) {
            return Err(Error::Config("backbone strides must be >= 1".into()));
        }
        if self.stem_channels == 0 || self.stages.iter().any(|s| s.channels == 0) {
            return Err(Error::Config("backbone channel counts must be >= 1".into()));
        }
        let (d3, d5, d7) = self.tap_channels();
        if d7 % 3 != 0 {
            return Err(Error::Config(format!(
                "deepest tap must have channels divisible by 3, got {d7}"
            )));
        }
        if !(d3 <= d5 && d5 <= d7) {
            return Err(Error::Config(format!(
                "tap channels must be non-decreasing, got {d3}, {d5}, {d7}"
            )));
        }
        let n = self.stages.len();
        let (s3, s5, s7) = (self.tap_stride(n - 3), self.tap_stride(n - 2), self.tap_stride(n - 1));
        if s5 != 2 * s3 || s7 != 2 * s5 {
            return Err(Error::Config(format!(
                "pyramid taps must halve resolution stage to stage, got strides {s3}, {s5}, {s7}"
            )));
        }
        Ok(())
    }

    /// Channel counts of the three pyramid taps (shallow to deep).
    pub fn tap_channels(&self) -> (usize, usize, usize) {
        let n = self.stages.len();
        (
            self.stages[n - 3].channels,
            self.stages[n - 2].channels,
            self.stages[n - 1].channels,
        )
    }

    /// Width of the fused map and of the primitive representations.
    pub fn feature_dim(&self) -> usize {
        self.tap_channels().2
    }

    fn tap_stride(&self, stage_idx: usize) -> usize {
        self.stem_stride * self.stages[..=stage_idx].iter().map(|s| s.stride).product::<usize>()
    }

    /// Cumulative stride of the deepest tap; inputs must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.tap_stride(self.stages.len() - 1)
    }

    /// Strides of the three taps (shallow to deep).
    pub fn tap_strides(&self) -> (usize, usize, usize) {
        let n = self.stages.len();
        (self.tap_stride(n - 3), self.tap_stride(n - 2), self.tap_stride(n - 1))
    }
}

/// Feature maps tapped at three scales plus, for the 2D models, their
/// fused single-resolution combination.
pub struct FeaturePyramid {
    pub f3: TensorRef,
    pub f5: TensorRef,
    pub f7: TensorRef,
}

/// Convolution followed by per-channel spatial normalization; the
/// normalization keeps activation scales stable through the residual
/// stack without introducing any cross-sample state.
struct NormedConv {
    conv: Conv2d,
    gain: ParamId,
    bias: ParamId,
}

impl NormedConv {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let conv = Conv2d::new(store, rng, name, c_in, c_out, k, stride, pad);
        let gain = store.add(format!("{name}.norm.gain"), crate::tensor::Tensor::full(vec![c_out], S::one()));
        let bias = store.add(format!("{name}.norm.bias"), crate::tensor::Tensor::zeros(vec![c_out]));
        NormedConv { conv, gain, bias }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: TensorRef) -> Result<TensorRef> {
        let y = self.conv.apply(tape, store, x)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.channel_norm(y, g, b)
    }
}

struct ResidualBlock {
    conv_a: NormedConv,
    conv_b: NormedConv,
    skip: Option<NormedConv>,
}

impl ResidualBlock {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv_a = NormedConv::new(store, rng, &format!("{name}.a"), c_in, c_out, 3, stride, 1);
        let conv_b = NormedConv::new(store, rng, &format!("{name}.b"), c_out, c_out, 3, 1, 1);
        let skip = (stride != 1 || c_in != c_out)
            .then(|| NormedConv::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, stride, 0));
        ResidualBlock { conv_a, conv_b, skip }
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let a = self.conv_a.apply(tape, store, x)?;
        let a = tape.swish(a);
        let b = self.conv_b.apply(tape, store, a)?;
        let skip = match &self.skip {
            Some(conv) => conv.apply(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(b, skip)?;
        Ok(tape.swish(sum))
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: NormedConv,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = NormedConv::new(store, rng, "backbone.stem", 1, cfg.stem_channels, 3, cfg.stem_stride, 1);
        let mut blocks = Vec::with_capacity(cfg.stages.len());
        let mut c_in = cfg.stem_channels;
        for (i, stage) in cfg.stages.iter().enumerate() {
            blocks.push(ResidualBlock::new(
                store,
                rng,
                &format!("backbone.block{i}"),
                c_in,
                stage.channels,
                stage.stride,
            ));
            c_in = stage.channels;
        }
        Ok(Backbone { cfg: cfg.clone(), stem, blocks })
    }

    /// Run the backbone on a 1×H×W image staged on the tape.
    ///
    /// H and W must be multiples of the cumulative stride; callers
    /// normalize images before reaching this point.
    pub fn extract_pyramid<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        image: TensorRef,
    ) -> Result<FeaturePyramid> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape("extract_pyramid", format!("expected 1xHxW image, got {shape:?}")));
        }
        let stride = self.cfg.total_stride();
        if shape[1] % stride != 0 || shape[2] % stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by backbone stride {stride}",
                shape[1], shape[2]
            )));
        }
        let x = self.stem.apply(tape, store, image)?;
        let mut x = tape.swish(x);
        let mut taps = Vec::with_capacity(3);
        let first_tap = self.blocks.len() - 3;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x)?;
            if i >= first_tap {
                taps.push(x);
            }
        }
        Ok(FeaturePyramid { f3: taps[0], f5: taps[1], f7: taps[2] })
    }
}

/// Bridges the shallower taps to the deepest channel count and merges all
/// three scales at the shallow tap's resolution: d × H/8 × W/8 under the
/// default configuration.
pub struct PyramidFusion {
    bridge5: Conv2d,
    bridge3: Conv2d,
}

impl PyramidFusion {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, cfg: &BackboneConfig) -> Self {
        let (d3, d5, d) = cfg.tap_channels();
        let bridge5 = Conv2d::new(store, rng, "fuse.bridge5", d5, d, 1, 1, 0);
        let bridge3 = Conv2d::new(store, rng, "fuse.bridge3", d3, d, 1, 1, 0);
        PyramidFusion { bridge5, bridge3 }
    }

    /// Upsample-and-add from the deepest tap outward. No activation: the
    /// fusion is linear in every pyramid level.
    pub fn fuse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        p: &FeaturePyramid,
    ) -> Result<TensorRef> {
        let up7 = tape.upsample_nearest(p.f7, 2)?;
        let b5 = self.bridge5.apply(tape, store, p.f5)?;
        let mid = tape.add(up7, b5)?;
        let up5 = tape.upsample_nearest(mid, 2)?;
        let b3 = self.bridge3.apply(tape, store, p.f3)?;
        tape.add(up5, b3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &BackboneConfig) -> (ParamStore<f64>, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, &mut rng, cfg).unwrap();
        (store, bb)
    }

    #[test]
    fn default_taps_are_eighth_sixteenth_thirtysecond() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.tap_strides(), (8, 16, 32));
        assert_eq!(cfg.total_stride(), 32);
        assert_eq!(cfg.tap_channels(), (32, 40, 48));
        cfg.validate().unwrap();
    }

    #[test]
    fn horizontal_input_pyramid_shapes() {
        let (store, bb) = build(&BackboneConfig::default());
        let mut tape = Tape::new();
        let img = tape.value(Tensor::zeros(vec![1, 64, 256]));
        let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
        assert_eq!(tape.shape(p.f3), &[32, 8, 32]);
        assert_eq!(tape.shape(p.f5), &[40, 4, 16]);
        assert_eq!(tape.shape(p.f7), &[48, 2, 8]);
    }

    #[test]
    fn vertical_input_pyramid_shapes() {
        let (store, bb) = build(&BackboneConfig::default());
        let mut tape = Tape::new();
        let img = tape.value(Tensor::zeros(vec![1, 256, 64]));
        let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
        assert_eq!(tape.shape(p.f3), &[32, 32, 8]);
        assert_eq!(tape.shape(p.f5), &[40, 16, 4]);
        assert_eq!(tape.shape(p.f7), &[48, 8, 2]);
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_pyramid() {
        let (store, bb) = build(&BackboneConfig::tiny());
        // biases are zero-initialized, so a zero image stays exactly zero
        let mut tape = Tape::new();
        let img = tape.value(Tensor::zeros(vec![1, 8, 16]));
        let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
        for r in [p.f3, p.f5, p.f7] {
            assert!(tape.data(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let (store, bb) = build(&BackboneConfig::default());
        let mut tape = Tape::new();
        let img = tape.value(Tensor::zeros(vec![1, 60, 250]));
        assert!(matches!(
            bb.extract_pyramid(&mut tape, &store, img),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stride_contract_over_random_valid_sizes() {
        let cfg = BackboneConfig::default();
        let (store, bb) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..6 {
            let h = 32 * rng.gen_range(1..=4usize);
            let w = 32 * rng.gen_range(1..=8usize);
            let mut tape = Tape::new();
            let img = tape.value(Tensor::zeros(vec![1, h, w]));
            let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
            assert_eq!(&tape.shape(p.f3)[1..], &[h / 8, w / 8]);
            assert_eq!(&tape.shape(p.f5)[1..], &[h / 16, w / 16]);
            assert_eq!(&tape.shape(p.f7)[1..], &[h / 32, w / 32]);
        }
    }

    #[test]
    fn fused_map_shape_and_zero_case() {
        let cfg = BackboneConfig::default();
        let (mut store, bb) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fuse = PyramidFusion::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let img = tape.value(Tensor::zeros(vec![1, 64, 256]));
        let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
        let f = fuse.fuse(&mut tape, &store, &p).unwrap();
        assert_eq!(tape.shape(f), &[48, 8, 32]);
        // zero pyramid + zero bridge biases -> zero fused map
        assert!(tape.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_reduces_to_double_upsample_when_bridges_are_zeroed() {
        let cfg = BackboneConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(&mut store, &mut rng, &cfg).unwrap();
        let fuse = PyramidFusion::new(&mut store, &mut rng, &cfg);
        for name in ["fuse.bridge5.kernel", "fuse.bridge3.kernel"] {
            let id = store.find(name).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(shape);
        }
        let mut tape = Tape::new();
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            tape.value(crate::params::uniform_init(&mut rng, vec![1, 8, 16], 1.0))
        };
        let p = bb.extract_pyramid(&mut tape, &store, img).unwrap();
        let f = fuse.fuse(&mut tape, &store, &p).unwrap();
        // oracle: compose the upsampling op twice on f7 directly
        let once = tape.upsample_nearest(p.f7, 2).unwrap();
        let twice = tape.upsample_nearest(once, 2).unwrap();
        assert_eq!(tape.data(f), tape.data(twice));
    }

    #[test]
    fn fusion_is_additive_per_level() {
        // linearity: fuse(a + b) = fuse(a) + fuse(b) when biases are zero
        let cfg = BackboneConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _bb = Backbone::new(&mut store, &mut rng, &cfg).unwrap();
        let fuse = PyramidFusion::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape<f64>, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            FeaturePyramid {
                f3: tape.value(crate::params::uniform_init(&mut rng, vec![6, 8, 16], 1.0)),
                f5: tape.value(crate::params::uniform_init(&mut rng, vec![6, 4, 8], 1.0)),
                f7: tape.value(crate::params::uniform_init(&mut rng, vec![6, 2, 4], 1.0)),
            }
        };
        let pa = mk(&mut tape, 10);
        let pb = mk(&mut tape, 11);
        let sum = FeaturePyramid {
            f3: tape.add(pa.f3, pb.f3).unwrap(),
            f5: tape.add(pa.f5, pb.f5).unwrap(),
            f7: tape.add(pa.f7, pb.f7).unwrap(),
        };
        let fa = fuse.fuse(&mut tape, &store, &pa).unwrap();
        let fb = fuse.fuse(&mut tape, &store, &pb).unwrap();
        let fsum = fuse.fuse(&mut tape, &store, &sum).unwrap();
        let direct = tape.add(fa, fb).unwrap();
        let diff = tape.tensor(fsum).max_abs_diff(&tape.tensor(direct));
        assert!(diff < 1e-9, "fusion not additive: {diff}");
    }
}
