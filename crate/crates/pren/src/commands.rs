//! Command implementations behind the CLI: train, eval, infer,
//! visualize, bench. The binary in `src/bin/pren.rs` only parses
//! arguments and maps errors to exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::pgm;
use crate::synthdata::{make_dataset, CorpusConfig, Orientation};
use crate::tensor::Tensor;
use crate::training::{
    evaluate, make_targets, train_epoch, AdaDelta, EvalReport, LrSchedule, StepRecord, TrainConfig,
};

/// Construct a model and optimizer from a parsed run configuration.
fn build_model(cfg: &RunConfig) -> Result<Model<f32>> {
    Model::new(cfg.model.clone(), cfg.vocabulary(), cfg.train.seed)
}

/// Rebuild the model a checkpoint was saved from and restore its weights.
pub fn load_model(ckpt_path: &Path) -> Result<(Model<f32>, RunConfig, Checkpoint)> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = RunConfig::from_json_str(&ckpt.config_json)?;
    let mut model = build_model(&cfg)?;
    checkpoint::restore_into(&ckpt, &mut model.store)?;
    Ok((model, cfg, ckpt))
}

fn format_metrics_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,loss,lr,accuracy\n");
    for r in records {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.loss, r.lr, acc);
    }
    out
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epochs_run: usize,
    pub last_accuracy: f64,
}

/// Full training drive: corpus, epochs with step-decay, per-epoch
/// evaluation and checkpointing, metrics CSV. Deterministic for a fixed
/// configuration.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = make_dataset::<f32>(&cfg.data)?;
    if corpus.train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut model = build_model(cfg)?;
    let schedule = LrSchedule::new(cfg.train.lr_steps.clone())?;
    let prepared: Vec<_> = corpus
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            make_targets(&s.text, &model.vocab, cfg.model.max_len)
                .map(|t| (s.clone(), t))
                .map_err(|e| Error::Usage(format!("sample {i}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut optimizer = AdaDelta::new(&model.store, cfg.train.rho, cfg.train.eps);
    let config_json = cfg.to_json();

    let mut records: Vec<StepRecord> = Vec::new();
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;
    let mut last_accuracy = 0.0f64;
    for epoch in 0..cfg.train.epochs {
        let lr = schedule.lr_at(epoch);
        let stats = train_epoch(
            &mut model,
            &mut optimizer,
            &prepared,
            &cfg.train,
            epoch,
            lr,
            &mut records,
            &mut global_step,
        )?;
        epochs_run = epoch + 1;
        let accuracy = if corpus.test.is_empty() {
            None
        } else {
            let report = evaluate(&model, &corpus.test)?;
            Some(report.accuracy())
        };
        if let Some(acc) = accuracy {
            last_accuracy = acc;
            // epoch-end row: mean loss over the epoch plus test accuracy
            records.push(StepRecord { epoch, step: global_step, loss: stats.mean_loss, lr, accuracy: Some(acc) });
        }
        let snap = checkpoint::snapshot(config_json.clone(), &model.store, Some(optimizer.export_state()));
        checkpoint::save(&out_dir.join(format!("epoch_{epoch:03}.ckpt")), &snap)?;
        if let Some(target) = cfg.train.target_accuracy {
            if accuracy.is_some_and(|a| a >= target) {
                break;
            }
        }
    }
    let snap = checkpoint::snapshot(config_json, &model.store, Some(optimizer.export_state()));
    let final_checkpoint = out_dir.join("final.ckpt");
    checkpoint::save(&final_checkpoint, &snap)?;
    let metrics_csv = out_dir.join("metrics.csv");
    std::fs::write(&metrics_csv, format_metrics_csv(&records)).map_err(|e| Error::io(&metrics_csv, e))?;
    Ok(TrainOutcome { final_checkpoint, metrics_csv, epochs_run, last_accuracy })
}

pub struct EvalSummary {
    pub model: String,
    pub report: EvalReport,
}

impl EvalSummary {
    /// The exact `model,horizontal,vertical,average` row, percentages
    /// with two decimals; absent orientations print empty cells.
    pub fn csv(&self) -> String {
        let cell = |o: Orientation| {
            self.report
                .orientation_accuracy(o)
                .map(|a| format!("{:.2}", a * 100.0))
                .unwrap_or_default()
        };
        format!(
            "model,horizontal,vertical,average\n{},{},{},{:.2}\n",
            self.model,
            cell(Orientation::Horizontal),
            cell(Orientation::Vertical),
            self.report.average_hv() * 100.0
        )
    }
}

/// Evaluate a checkpoint on a freshly generated corpus's test split.
pub fn cmd_eval(ckpt_path: &Path, data_cfg: &CorpusConfig, csv_out: Option<&Path>) -> Result<EvalSummary> {
    let (model, _, _) = load_model(ckpt_path)?;
    let corpus = make_dataset::<f32>(data_cfg)?;
    if corpus.test.is_empty() {
        return Err(Error::Config("dataset config has no test samples".into()));
    }
    let report = evaluate(&model, &corpus.test)?;
    let summary = EvalSummary { model: model.kind().label().to_string(), report };
    if let Some(path) = csv_out {
        std::fs::write(path, summary.csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(summary)
}

/// Read one PGM image and check it is usable by the given model.
fn load_image(model: &Model<f32>, path: &Path) -> Result<Tensor<f32>> {
    let img = pgm::read_file(path)?;
    let tensor = pgm::to_tensor::<f32>(&img);
    let stride = model.cfg.backbone.total_stride();
    if img.height % stride != 0 || img.width % stride != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by backbone stride {stride}",
            img.height, img.width
        )));
    }
    Ok(tensor)
}

/// Per-file recognition results; errors are reported per path and do not
/// abort the batch.
pub fn cmd_infer(ckpt_path: &Path, files: &[PathBuf]) -> Result<Vec<(PathBuf, Result<String>)>> {
    let (model, _, _) = load_model(ckpt_path)?;
    let mut results = Vec::with_capacity(files.len());
    for path in files {
        let outcome = load_image(&model, path).and_then(|img| model.predict(&img));
        results.push((path.clone(), outcome));
    }
    Ok(results)
}

/// Write aggregator heatmaps, pre-pool response maps, and (for pren2d)
/// per-character cross-attention maps as min-max normalized PGM files.
pub fn cmd_visualize(ckpt_path: &Path, image_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (model, _, _) = load_model(ckpt_path)?;
    let image = load_image(&model, image_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    if model.kind() != ModelKind::Baseline2d {
        let (heatmaps, pre_pool) = model.visual_artifacts(&image)?;
        for (level, heat) in heatmaps.iter().enumerate() {
            let (n, h, w) = (heat.shape()[0], heat.shape()[1], heat.shape()[2]);
            for i in 0..n {
                let plane = &heat.data()[i * h * w..(i + 1) * h * w];
                let img = pgm::normalized_map(plane, w, h)?;
                let path = out_dir.join(format!("heatmap_level{level}_p{i}.pgm"));
                pgm::write_file(&path, &img)?;
                written.push(path);
            }
        }
        for (level, pre) in pre_pool.iter().enumerate() {
            let (c, h, w) = (pre.shape()[0], pre.shape()[1], pre.shape()[2]);
            let n = model.cfg.n_primitives;
            let group = c / n;
            // channel-mean map per primitive group
            for i in 0..n {
                let mut mean = vec![0.0f32; h * w];
                for ch in i * group..(i + 1) * group {
                    for (m, &v) in mean.iter_mut().zip(&pre.data()[ch * h * w..(ch + 1) * h * w]) {
                        *m += v / group as f32;
                    }
                }
                let img = pgm::normalized_map(&mean, w, h)?;
                let path = out_dir.join(format!("prepool_level{level}_p{i}.pgm"));
                pgm::write_file(&path, &img)?;
                written.push(path);
            }
        }
    }

    match model.kind() {
        ModelKind::Pren2d | ModelKind::Baseline2d => {
            let (text, maps) = model.decode_recursive(&image, true)?;
            for (step, map) in maps.iter().enumerate() {
                let (h, w) = (map.shape()[0], map.shape()[1]);
                let img = pgm::normalized_map(map.data(), w, h)?;
                let label = text.chars().nth(step).map(String::from).unwrap_or_else(|| "eos".into());
                let path = out_dir.join(format!("attention_step{step}_{label}.pgm"));
                pgm::write_file(&path, &img)?;
                written.push(path);
            }
        }
        ModelKind::Pren => {
            // attention maps require the 2D decoder; not an error, the
            // remaining artifacts were still produced
            eprintln!("note: cross-attention maps need a pren2d checkpoint; skipping");
        }
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub images: usize,
    pub warmup: usize,
    pub pren_mean_ms: f64,
    pub pren_std_ms: f64,
    pub pren2d_mean_ms: f64,
    pub pren2d_std_ms: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.pren2d_mean_ms / self.pren_mean_ms
    }

    pub fn text(&self) -> String {
        format!(
            "images: {} (after {} warmup)\n\
             pren:   mean {:.3} ms, std {:.3} ms\n\
             pren2d: mean {:.3} ms, std {:.3} ms\n\
             ratio pren2d/pren: {:.2}\n",
            self.images, self.warmup, self.pren_mean_ms, self.pren_std_ms, self.pren2d_mean_ms,
            self.pren2d_std_ms,
            self.ratio()
        )
    }
}

fn time_model(model: &Model<f32>, images: &[Tensor<f32>], warmup: usize) -> Result<(f64, f64)> {
    for img in images.iter().take(warmup) {
        model.predict(img)?;
    }
    let mut samples_ms = Vec::with_capacity(images.len());
    for img in images {
        let t = Instant::now();
        model.predict(img)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
    let var = samples_ms.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / samples_ms.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Mean per-image inference latency of a parallel-decoding checkpoint
/// against a recursive-decoding one, on the same generated image set.
pub fn cmd_bench(
    pren_ckpt: &Path,
    pren2d_ckpt: &Path,
    data_cfg: &CorpusConfig,
    images: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let (pren, _, _) = load_model(pren_ckpt)?;
    if pren.kind() != ModelKind::Pren {
        return Err(Error::Usage(format!("--pren checkpoint is a {} model", pren.kind().label())));
    }
    let (pren2d, _, _) = load_model(pren2d_ckpt)?;
    if pren2d.kind() != ModelKind::Pren2d {
        return Err(Error::Usage(format!(
            "--pren2d checkpoint is a {} model",
            pren2d.kind().label()
        )));
    }
    let mut cfg = data_cfg.clone();
    cfg.train_count = images;
    cfg.test_count = 0;
    let corpus = make_dataset::<f32>(&cfg)?;
    let imgs: Vec<Tensor<f32>> = corpus.train.iter().map(|s| s.image.clone()).collect();
    let (pren_mean_ms, pren_std_ms) = time_model(&pren, &imgs, warmup)?;
    let (pren2d_mean_ms, pren2d_std_ms) = time_model(&pren2d, &imgs, warmup)?;
    Ok(BenchReport {
        images: imgs.len(),
        warmup,
        pren_mean_ms,
        pren_std_ms,
        pren2d_mean_ms,
        pren2d_std_ms,
    })
}
