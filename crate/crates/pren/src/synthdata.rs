//! Procedural glyph corpus: deterministic text images with no external
//! fonts or data files.
//!
//! Ten glyphs are drawn from explicit stroke lists in a unit box and laid
//! out along the main axis of a 64×256 (horizontal) or 256×64 (vertical)
//! canvas with jittered spacing and scale, optional shear, and additive
//! noise. Rendering uses only +, −, ×, ÷ and sqrt, so pixel output is
//! bit-exact across platforms for a fixed seed.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

pub const HORIZONTAL_CANVAS: (usize, usize) = (64, 256);
pub const VERTICAL_CANVAS: (usize, usize) = (256, 64);

/// Stroke half-width in glyph-box units.
const STROKE_HALFWIDTH: f64 = 0.15;

/// Per-glyph stroke lists in a unit box, y pointing down.
/// Shapes are chosen for mutual pixel-level separability, not legibility.
const GLYPH_STROKES: [&[(f64, f64, f64, f64)]; 10] = [
    // a: double vertical bars
    &[(0.3, 0.12, 0.3, 0.88), (0.7, 0.12, 0.7, 0.88)],
    // b: double horizontal bars
    &[(0.12, 0.3, 0.88, 0.3), (0.12, 0.7, 0.88, 0.7)],
    // c: cross
    &[(0.5, 0.12, 0.5, 0.88), (0.12, 0.5, 0.88, 0.5)],
    // d: two crossing diagonals
    &[(0.15, 0.15, 0.85, 0.85), (0.85, 0.15, 0.15, 0.85)],
    // e: box outline
    &[
        (0.15, 0.15, 0.85, 0.15),
        (0.85, 0.15, 0.85, 0.85),
        (0.85, 0.85, 0.15, 0.85),
        (0.15, 0.85, 0.15, 0.15),
    ],
    // f: corner
    &[(0.2, 0.12, 0.2, 0.85), (0.2, 0.85, 0.85, 0.85)],
    // g: top bar with stem
    &[(0.12, 0.18, 0.88, 0.18), (0.5, 0.18, 0.5, 0.88)],
    // h: zigzag
    &[(0.15, 0.18, 0.85, 0.18), (0.85, 0.18, 0.15, 0.82), (0.15, 0.82, 0.85, 0.82)],
    // i: diamond outline
    &[
        (0.5, 0.1, 0.9, 0.5),
        (0.9, 0.5, 0.5, 0.9),
        (0.5, 0.9, 0.1, 0.5),
        (0.1, 0.5, 0.5, 0.1),
    ],
    // j: double parallel diagonals
    &[(0.1, 0.68, 0.68, 0.1), (0.32, 0.9, 0.9, 0.32)],
];

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
    /// Horizontal canvas with the whole word sheared.
    Skewed,
}

impl Orientation {
    /// Canvas extents (height, width) for this orientation.
    pub fn canvas(self) -> (usize, usize) {
        match self {
            Orientation::Horizontal | Orientation::Skewed => HORIZONTAL_CANVAS,
            Orientation::Vertical => VERTICAL_CANVAS,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
            Orientation::Skewed => "skewed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSample<S> {
    pub image: Tensor<S>,
    pub text: String,
    pub orientation: Orientation,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probabilities of horizontal / vertical / skewed, summing to 1.
    pub orientation_mix: [f64; 3],
    /// Additive uniform noise amplitude in [0, 1].
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_count: 2000,
            test_count: 200,
            min_len: 1,
            max_len: 8,
            orientation_mix: [0.5, 0.5, 0.0],
            noise: 0.05,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 || self.min_len > self.max_len || self.max_len > MAX_RENDER_LEN {
            return Err(Error::Config(format!(
                "invalid text length range {}..={} (renderable up to {MAX_RENDER_LEN})",
                self.min_len, self.max_len
            )));
        }
        if self.orientation_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("orientation mix entries must be non-negative".into()));
        }
        let sum: f64 = self.orientation_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("orientation mix must sum to 1, got {sum}")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

pub struct Corpus<S> {
    pub train: Vec<LabeledSample<S>>,
    pub test: Vec<LabeledSample<S>>,
}

fn dist_to_segment(px: f64, py: f64, seg: (f64, f64, f64, f64)) -> f64 {
    let (ax, ay, bx, by) = seg;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    let (ex, ey) = (px - cx, py - cy);
    (ex * ex + ey * ey).sqrt()
}

/// Soft stroke coverage of one point in glyph-box units; the edge ramp is
/// about one canvas pixel wide.
fn glyph_coverage(u: f64, v: f64, glyph: usize, box_px: f64) -> f64 {
    let mut best: f64 = 0.0;
    for &seg in GLYPH_STROKES[glyph] {
        let d = dist_to_segment(u, v, seg);
        let cov = ((STROKE_HALFWIDTH - d) * box_px + 0.5).clamp(0.0, 1.0);
        best = best.max(cov);
    }
    best
}

/// Rasterize one glyph at `size`×`size` with no jitter; used by the
/// separability check and nowhere in the training pipeline.
pub fn rasterize_glyph(glyph: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let u = (px as f64 + 0.5) / size as f64;
            let v = (py as f64 + 0.5) / size as f64;
            out[py * size + px] = glyph_coverage(u, v, glyph, size as f64);
        }
    }
    out
}

struct GlyphPlacement {
    glyph: usize,
    x0: f64,
    y0: f64,
    box_px: f64,
    shear: f64,
}

fn paint(canvas: &mut [f64], width: usize, height: usize, g: &GlyphPlacement) {
    let reach = g.shear.abs() * g.box_px + 2.0;
    let px_lo = ((g.x0 - reach).floor().max(0.0)) as usize;
    let px_hi = ((g.x0 + g.box_px + reach).ceil().min(width as f64)) as usize;
    let py_lo = ((g.y0 - 2.0).floor().max(0.0)) as usize;
    let py_hi = ((g.y0 + g.box_px + 2.0).ceil().min(height as f64)) as usize;
    let cy = g.y0 + g.box_px / 2.0;
    for py in py_lo..py_hi {
        let fy = py as f64 + 0.5;
        let v = (fy - g.y0) / g.box_px;
        if !(-0.05..=1.05).contains(&v) {
            continue;
        }
        for px in px_lo..px_hi {
            let fx = px as f64 + 0.5;
            let gx = fx - g.shear * (fy - cy);
            let u = (gx - g.x0) / g.box_px;
            if !(-0.05..=1.05).contains(&u) {
                continue;
            }
            let cov = glyph_coverage(u, v, g.glyph, g.box_px);
            let cell = &mut canvas[py * width + px];
            if cov > *cell {
                *cell = cov;
            }
        }
    }
}

/// Longest renderable text: below this the glyph cells on the 256-pixel
/// main axis stay at least 16 pixels wide.
pub const MAX_RENDER_LEN: usize = 16;

/// Deterministically render one labeled sample.
pub fn render_sample<S: Scalar>(
    text: &str,
    orientation: Orientation,
    noise: f64,
    seed: u64,
) -> Result<LabeledSample<S>> {
    let vocab = Vocabulary::toy();
    let glyphs = vocab.encode(text)?;
    if glyphs.len() > MAX_RENDER_LEN {
        return Err(Error::Usage(format!(
            "text of length {} exceeds the renderable maximum {MAX_RENDER_LEN}",
            glyphs.len()
        )));
    }
    let (height, width) = orientation.canvas();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let shear = if orientation == Orientation::Skewed {
        let mag = rng.gen_range(0.15..=0.27);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    } else {
        0.0
    };

    let vertical = orientation == Orientation::Vertical;
    let (main_extent, cross_extent) = if vertical {
        (height as f64, width as f64)
    } else {
        (width as f64, height as f64)
    };

    let mut canvas = vec![0.0f64; width * height];
    if !glyphs.is_empty() {
        // fixed pitch, left-anchored: a character's position depends only
        // weakly on text length, the way tight crops of real text behave
        let cell = main_extent / glyphs.len().max(4) as f64;
        for (i, &glyph) in glyphs.iter().enumerate() {
            let scale = rng.gen_range(0.85..=1.0);
            let jitter_main = rng.gen_range(-0.10..=0.10) * cell;
            let jitter_cross = rng.gen_range(-0.08..=0.08) * cross_extent;
            let box_px = (cell.min(cross_extent * 0.98)) * scale;
            let main0 = ((i as f64 + 0.5) * cell - box_px / 2.0 + jitter_main)
                .clamp(0.0, main_extent - box_px);
            let cross0 = ((cross_extent - box_px) / 2.0 + jitter_cross).clamp(0.0, cross_extent - box_px);
            let (x0, y0) = if vertical { (cross0, main0) } else { (main0, cross0) };
            paint(&mut canvas, width, height, &GlyphPlacement { glyph, x0, y0, box_px, shear });
        }
    }

    if noise > 0.0 {
        for cell in canvas.iter_mut() {
            *cell = (*cell + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }

    let data = canvas.into_iter().map(S::from_f64).collect();
    Ok(LabeledSample {
        image: Tensor::from_vec(vec![1, height, width], data)?,
        text: text.to_string(),
        orientation,
        seed,
    })
}

/// Re-render the same text in another orientation. This is a fresh layout
/// pass, not a pixel rotation.
pub fn orient_variant<S: Scalar>(
    sample: &LabeledSample<S>,
    target: Orientation,
    noise: f64,
) -> Result<LabeledSample<S>> {
    render_sample(&sample.text, target, noise, sample.seed)
}

fn pick_orientation(mix: &[f64; 3], u: f64) -> Orientation {
    if u < mix[0] {
        Orientation::Horizontal
    } else if u < mix[0] + mix[1] {
        Orientation::Vertical
    } else {
        Orientation::Skewed
    }
}

fn random_text<R: Rng>(rng: &mut R, vocab: &Vocabulary, min_len: usize, max_len: usize) -> String {
    let len = rng.gen_range(min_len..=max_len);
    (0..len)
        .map(|_| vocab.char_at(rng.gen_range(0..vocab.alphabet_len())).expect("index in range"))
        .collect()
}

/// Generate the train/test corpus. Test texts avoid train texts whenever
/// the string space allows it (short lengths can exhaust their space).
pub fn make_dataset<S: Scalar>(cfg: &CorpusConfig) -> Result<Corpus<S>> {
    cfg.validate()?;
    let vocab = Vocabulary::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.train_count);
    let mut train_texts: HashSet<String> = HashSet::new();
    for _ in 0..cfg.train_count {
        let text = random_text(&mut rng, &vocab, cfg.min_len, cfg.max_len);
        let orientation = pick_orientation(&cfg.orientation_mix, rng.gen_range(0.0..1.0));
        let sample_seed = rng.gen::<u64>();
        train_texts.insert(text.clone());
        train.push(render_sample(&text, orientation, cfg.noise, sample_seed)?);
    }
    let mut test = Vec::with_capacity(cfg.test_count);
    for _ in 0..cfg.test_count {
        let mut text = random_text(&mut rng, &vocab, cfg.min_len, cfg.max_len);
        for _ in 0..64 {
            if !train_texts.contains(&text) {
                break;
            }
            text = random_text(&mut rng, &vocab, cfg.min_len, cfg.max_len);
        }
        let orientation = pick_orientation(&cfg.orientation_mix, rng.gen_range(0.0..1.0));
        let sample_seed = rng.gen::<u64>();
        test.push(render_sample(&text, orientation, cfg.noise, sample_seed)?);
    }
    Ok(Corpus { train, test })
}

/// Write samples as 8-bit PGM files plus a `labels.tsv` manifest with one
/// `filename<TAB>text` line per sample.
pub fn dump_samples<S: Scalar>(dir: &Path, samples: &[LabeledSample<S>]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(samples.len());
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}_{}.pgm", sample.orientation.label());
        let img = pgm::from_tensor(&sample.image)?;
        pgm::write_file(&dir.join(&name), &img)?;
        manifest.push_str(&format!("{name}\t{}\n", sample.text));
        names.push(name);
    }
    std::fs::write(dir.join("labels.tsv"), manifest).map_err(|e| Error::io(dir.join("labels.tsv"), e))?;
    Ok(names)
}

/// Parse a labels manifest: one `filename<TAB>text` line per sample.
/// Blank lines are skipped; a line without a tab is an error.
pub fn parse_labels(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((name, label)) = line.split_once('\t') else {
            return Err(Error::format(
                "labels file",
                format!("line {}: expected filename<TAB>text", lineno + 1),
            ));
        };
        if name.is_empty() {
            return Err(Error::format("labels file", format!("line {}: empty filename", lineno + 1)));
        }
        out.push((name.to_string(), label.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let a: LabeledSample<f32> = render_sample("abc", Orientation::Horizontal, 0.05, 42).unwrap();
        let b: LabeledSample<f32> = render_sample("abc", Orientation::Horizontal, 0.05, 42).unwrap();
        assert_eq!(a.image, b.image);
        let c: LabeledSample<f32> = render_sample("abc", Orientation::Horizontal, 0.05, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn canvas_shapes_follow_orientation() {
        let h: LabeledSample<f64> = render_sample("abc", Orientation::Horizontal, 0.0, 1).unwrap();
        assert_eq!(h.image.shape(), &[1, 64, 256]);
        let v: LabeledSample<f64> = render_sample("abc", Orientation::Vertical, 0.0, 1).unwrap();
        assert_eq!(v.image.shape(), &[1, 256, 64]);
        let s: LabeledSample<f64> = render_sample("abc", Orientation::Skewed, 0.0, 1).unwrap();
        assert_eq!(s.image.shape(), &[1, 64, 256]);
    }

    #[test]
    fn pixel_values_stay_in_unit_interval() {
        let s: LabeledSample<f64> = render_sample("abcdefgh", Orientation::Skewed, 0.3, 5).unwrap();
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn single_glyph_coverage_bounds() {
        // every glyph alone covers more than 5% and less than 60% of the
        // canvas at zero noise
        for (i, ch) in ('a'..='j').enumerate() {
            for seed in 0..3u64 {
                let s: LabeledSample<f64> =
                    render_sample(&ch.to_string(), Orientation::Horizontal, 0.0, 1000 + seed).unwrap();
                let lit = s.image.data().iter().filter(|&&v| v > 0.5).count();
                let frac = lit as f64 / s.image.len() as f64;
                assert!(
                    frac > 0.05 && frac < 0.60,
                    "glyph {i} ({ch}) covers {frac:.4} of the canvas"
                );
            }
        }
    }

    #[test]
    fn glyph_pairs_are_separable_at_16x16() {
        // any two glyphs differ in at least 20% of their covered pixels
        let masks: Vec<Vec<bool>> = (0..10)
            .map(|g| rasterize_glyph(g, 16).iter().map(|&v| v > 0.5).collect())
            .collect();
        for a in 0..10 {
            for b in (a + 1)..10 {
                let mut sym_diff = 0usize;
                let mut union = 0usize;
                for (&x, &y) in masks[a].iter().zip(&masks[b]) {
                    union += usize::from(x || y);
                    sym_diff += usize::from(x != y);
                }
                let ratio = sym_diff as f64 / union.max(1) as f64;
                assert!(ratio >= 0.20, "glyphs {a} and {b} overlap too much: {ratio:.3}");
            }
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let cfg = CorpusConfig {
            train_count: 100,
            test_count: 10,
            seed: 3,
            ..CorpusConfig::default()
        };
        let a: Corpus<f32> = make_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), 100);
        assert_eq!(a.test.len(), 10);
        let b: Corpus<f32> = make_dataset(&cfg).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn different_seeds_give_different_texts() {
        let base = CorpusConfig { train_count: 40, test_count: 0, ..CorpusConfig::default() };
        let a: Corpus<f32> = make_dataset(&base).unwrap();
        let b: Corpus<f32> = make_dataset(&CorpusConfig { seed: base.seed + 1, ..base }).unwrap();
        let texts = |c: &Corpus<f32>| c.train.iter().map(|s| s.text.clone()).collect::<Vec<_>>();
        assert_ne!(texts(&a), texts(&b));
    }

    #[test]
    fn orientation_mix_extremes() {
        let cfg = CorpusConfig {
            train_count: 30,
            test_count: 0,
            orientation_mix: [1.0, 0.0, 0.0],
            ..CorpusConfig::default()
        };
        let c: Corpus<f32> = make_dataset(&cfg).unwrap();
        assert!(c.train.iter().all(|s| s.orientation == Orientation::Horizontal));
    }

    #[test]
    fn split_is_text_disjoint_for_long_strings() {
        let cfg = CorpusConfig {
            train_count: 300,
            test_count: 50,
            min_len: 4,
            max_len: 8,
            ..CorpusConfig::default()
        };
        let c: Corpus<f32> = make_dataset(&cfg).unwrap();
        let train_texts: HashSet<_> = c.train.iter().map(|s| s.text.as_str()).collect();
        for s in &c.test {
            assert!(!train_texts.contains(s.text.as_str()), "leaked {:?}", s.text);
        }
    }

    #[test]
    fn orient_variant_preserves_label_and_identity() {
        let s: LabeledSample<f64> = render_sample("fgh", Orientation::Horizontal, 0.02, 9).unwrap();
        let v = orient_variant(&s, Orientation::Vertical, 0.02).unwrap();
        assert_eq!(v.image.shape(), &[1, 256, 64]);
        assert_eq!(v.text, s.text);
        let same = orient_variant(&s, Orientation::Horizontal, 0.02).unwrap();
        assert_eq!(same.image, s.image);
    }

    #[test]
    fn labels_round_trip_through_vocabulary() {
        let cfg = CorpusConfig { train_count: 50, test_count: 0, ..CorpusConfig::default() };
        let c: Corpus<f32> = make_dataset(&cfg).unwrap();
        let vocab = Vocabulary::toy();
        for s in &c.train {
            let encoded = vocab.encode(&s.text).unwrap();
            assert_eq!(vocab.decode(&encoded), s.text);
        }
    }

    #[test]
    fn overlong_and_out_of_alphabet_texts_are_rejected() {
        let long = "a".repeat(MAX_RENDER_LEN + 1);
        assert!(render_sample::<f64>(&long, Orientation::Horizontal, 0.0, 1).is_err());
        assert!(render_sample::<f64>("kk", Orientation::Horizontal, 0.0, 1).is_err());
    }

    #[test]
    fn labels_parser_accepts_tabs_rejects_garbage() {
        let parsed = parse_labels("a.pgm\tabc\n\nb.pgm\tde\n").unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1], ("b.pgm".to_string(), "de".to_string()));
        assert!(parse_labels("no-tab-here\n").is_err());
        assert!(parse_labels("\tmissing-name\n").is_err());
    }
}
