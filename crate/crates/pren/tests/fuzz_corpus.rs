//! Replays the checked-in fuzz corpus seeds through the same entry
//! points the fuzz targets call, so `cargo test` keeps them honest even
//! where the libFuzzer toolchain is unavailable.

use std::path::{Path, PathBuf};

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("missing corpus dir {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    assert!(!entries.is_empty(), "no seeds checked in for {target}");
    entries
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect()
}

#[test]
fn checkpoint_decode_seeds() {
    let mut valid = 0;
    for (path, bytes) in seeds("checkpoint_decode") {
        if pren::checkpoint::decode(&bytes).is_ok() {
            valid += 1;
        } else {
            assert!(
                path.file_name().unwrap().to_string_lossy().contains("invalid"),
                "seed {} no longer parses",
                path.display()
            );
        }
    }
    assert!(valid >= 1, "at least one valid checkpoint seed expected");
}

#[test]
fn pgm_decode_seeds() {
    let mut valid = 0;
    for (path, bytes) in seeds("pgm_decode") {
        if let Ok(img) = pren::pgm::decode(&bytes) {
            valid += 1;
            let again = pren::pgm::decode(&pren::pgm::encode(&img)).unwrap();
            assert_eq!(again, img, "round trip failed for {}", path.display());
        }
    }
    assert!(valid >= 1);
}

#[test]
fn config_parse_seeds() {
    let mut valid = 0;
    for (_, bytes) in seeds("config_parse") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            if let Ok(cfg) = pren::config::RunConfig::from_json_str(text) {
                valid += 1;
                pren::config::RunConfig::from_json_str(&cfg.to_json()).unwrap();
            }
        }
    }
    assert!(valid >= 1);
}

#[test]
fn labels_parse_seeds() {
    let mut valid = 0;
    for (_, bytes) in seeds("labels_parse") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            if pren::synthdata::parse_labels(text).is_ok() {
                valid += 1;
            }
        }
    }
    assert!(valid >= 1);
}

/// Regenerates the corpus seed files. Run explicitly when formats change:
/// `cargo test --test fuzz_corpus regenerate_seeds -- --ignored`
#[test]
#[ignore]
fn regenerate_seeds() {
    use pren::model::{Model, ModelConfig, ModelKind};
    use pren::vocab::Vocabulary;

    // checkpoint: a real tiny-model snapshot plus a corrupted variant
    let dir = corpus_dir("checkpoint_decode");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = pren::config::RunConfig {
        model: ModelConfig::tiny(ModelKind::Pren),
        ..Default::default()
    };
    let model: Model<f32> = Model::new(cfg.model.clone(), Vocabulary::toy(), 1).unwrap();
    let snap = pren::checkpoint::snapshot(cfg.to_json(), &model.store, None);
    let bytes = pren::checkpoint::encode(&snap);
    std::fs::write(dir.join("tiny_pren.ckpt"), &bytes).unwrap();
    let mut broken = bytes.clone();
    broken.truncate(bytes.len() / 2);
    std::fs::write(dir.join("invalid_truncated.ckpt"), &broken).unwrap();

    // pgm: a rendered sample and a comment-heavy header
    let dir = corpus_dir("pgm_decode");
    std::fs::create_dir_all(&dir).unwrap();
    let sample = pren::synthdata::render_sample::<f32>(
        "abc",
        pren::synthdata::Orientation::Horizontal,
        0.05,
        7,
    )
    .unwrap();
    let img = pren::pgm::from_tensor(&sample.image).unwrap();
    std::fs::write(dir.join("sample.pgm"), pren::pgm::encode(&img)).unwrap();
    std::fs::write(dir.join("comments.pgm"), b"P5 # c\n# d\n2 2\n255\n\x00\x40\x80\xff").unwrap();

    // config: the default document and a sparse one
    let dir = corpus_dir("config_parse");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("default.json"), pren::config::RunConfig::default().to_json_pretty()).unwrap();
    std::fs::write(dir.join("partial.json"), br#"{"model":{"kind":"pren2d"}}"#).unwrap();

    // labels
    let dir = corpus_dir("labels_parse");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("labels.tsv"), b"sample_00000_horizontal.pgm\tabc\nsample_00001_vertical.pgm\tde\n").unwrap();
}
