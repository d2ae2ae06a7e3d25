//! Command-line pipeline: `prepare`, `train`, `predict`, `evaluate`, `report`.

use std::path::{Path, PathBuf};

use clap::Parser;

use crate::dataio::raster::{write_mask_png, write_png};
use crate::dataio::{
    load_drive_layout, load_image, load_manifest, load_mask, read_checkpoint, DatasetManifest,
    ManifestEntry, Split, DEFAULT_MASK_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::evaluate::{binarize, evaluate_manifest, EvaluationReport, Model, ProbabilityMap};
use crate::labelgen::{
    build_class_map, weights_from_frequencies, write_class_map_png, NUM_CLASSES,
};
use crate::preprocess::to_gray_clahe;
use crate::training::{train, TrainConfig, TrainOptions, TrainOutcome};

/// Flags shared by every subcommand.
#[derive(Parser, Debug, Clone, PartialEq)]
#[command(name = "vseg", version, about = "Retinal vessel segmentation pipeline")]
pub struct RunArgs {
    #[arg(value_enum)]
    pub command: CommandName,
    /// Manifest CSV, or a DRIVE-style folder with images/, 1st_manual/ and mask/.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Model checkpoint; defaults to <out>/model.vseg.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandName {
    Prepare,
    Train,
    Predict,
    Evaluate,
    Report,
}

/// Resolved invocation: the subcommand plus everything it reads.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: CommandName,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads the config file, applies `--set` overrides then `--seed`, and
    /// creates the output directory.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut train = match &args.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        for kv in &args.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("override {kv:?} is not key=value")))?;
            train.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = args.seed {
            train.seed = seed;
        }
        train.validate()?;
        std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        Ok(Self {
            command: args.command,
            manifest: args.manifest.clone(),
            out: args.out.clone(),
            checkpoint: args.checkpoint.clone(),
            train,
        })
    }

    fn manifest(&self, split: Split) -> Result<DatasetManifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Argument("--manifest is required".into()))?;
        if path.is_dir() {
            load_drive_layout(path, split)
        } else {
            load_manifest(path)
        }
    }

    fn model(&self) -> Result<Model> {
        let path = self
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.vseg"));
        Model::from_checkpoint(&read_checkpoint(path)?, &self.train.network())
    }
}

/// Files written by [`cmd_prepare`].
#[derive(Clone, Debug)]
pub struct PrepareSummary {
    pub class_maps: Vec<PathBuf>,
    pub weights: PathBuf,
    /// Pixel count per class over every map.
    pub histogram: Vec<u64>,
}

/// Labels every manifest entry and derives inverse-frequency class weights from the train split.
pub fn cmd_prepare(
    manifest: &DatasetManifest,
    band_radius: usize,
    out: &Path,
) -> Result<PrepareSummary> {
    if manifest.entries.is_empty() {
        return Err(Error::Argument("manifest lists no images".into()));
    }
    let dir = out.join("labels");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut class_maps = Vec::new();
    let mut train_maps = Vec::new();
    let mut other_maps = Vec::new();
    let mut histogram = vec![0u64; NUM_CLASSES];
    for entry in &manifest.entries {
        let gt = load_mask(&entry.ground_truth, DEFAULT_MASK_THRESHOLD)?;
        let map = build_class_map(&gt, band_radius)?;
        let path = dir.join(format!("{}.png", entry.id()));
        write_class_map_png(&path, &map)?;
        for (h, n) in histogram.iter_mut().zip(map.histogram(NUM_CLASSES)) {
            *h += n;
        }
        class_maps.push(path);
        if entry.split == Split::Train {
            train_maps.push(map);
        } else {
            other_maps.push(map);
        }
    }
    if train_maps.is_empty() {
        train_maps = other_maps;
    }
    let weights = weights_from_frequencies(&train_maps, &[1.0; NUM_CLASSES])?;
    let weights_path = out.join("class_weights.txt");
    std::fs::write(&weights_path, weights.to_line() + "\n")
        .map_err(|e| Error::io(&weights_path, e))?;
    Ok(PrepareSummary {
        class_maps,
        weights: weights_path,
        histogram,
    })
}

/// Trains on the train split, writing checkpoints and logs under `out`.
pub fn cmd_train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out: &Path,
    verbose: bool,
) -> Result<TrainOutcome> {
    let mut print = |r: &crate::training::EpochRecord| {
        if verbose {
            eprintln!(
                "epoch {:>4}  lr {:.2e}  loss {:.5}  {:.1}s",
                r.epoch, r.lr, r.total, r.seconds
            );
        }
    };
    train(
        manifest,
        cfg,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume: None,
            progress: Some(&mut print),
        },
    )
}

fn probability_gray(p: &ProbabilityMap) -> Vec<u8> {
    p.vessel_scores()
        .iter()
        .map(|s| (s.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes `<id>_prob.png` and `<id>_mask.png` under `out/predictions` for each entry.
pub fn cmd_predict(
    manifest: &DatasetManifest,
    model: &Model,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if manifest.entries.is_empty() {
        return Err(Error::Argument("manifest lists no images".into()));
    }
    let dir = out.join("predictions");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for entry in &manifest.entries {
        let input = to_gray_clahe(&load_image(&entry.image)?, &cfg.clahe)?;
        let probs = model.predict(&input, cfg.patch_size, cfg.inference_stride)?;
        let prob_path = dir.join(format!("{}_prob.png", entry.id()));
        write_png(
            &prob_path,
            probs.width(),
            probs.height(),
            1,
            &probability_gray(&probs),
        )?;
        let mask_path = dir.join(format!("{}_mask.png", entry.id()));
        write_mask_png(&mask_path, &binarize(&probs))?;
        written.extend([prob_path, mask_path]);
    }
    Ok(written)
}

/// Scores the test split, writes `metrics.csv` and returns the report.
pub fn cmd_evaluate(
    manifest: &DatasetManifest,
    model: &Model,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<EvaluationReport> {
    let report = evaluate_manifest(
        model,
        manifest,
        Split::Test,
        &cfg.clahe,
        cfg.patch_size,
        cfg.inference_stride,
    )?;
    let path = out.join("metrics.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Black to red to yellow to white.
fn heat(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(t), ch(t - 1.0), ch(t - 2.0)]
}

pub const FALSE_NEGATIVE_RGB: [u8; 3] = [0, 0, 255];
pub const FALSE_POSITIVE_RGB: [u8; 3] = [255, 0, 0];

/// Report images of one entry under `out/report/<id>/`: `heatmap.png`,
/// `side1.png`.. (deepest first), `mask.png` and `overlay.png`, where missed
/// vessel pixels are blue and false detections red over the gray input.
pub fn cmd_report(
    entry: &ManifestEntry,
    model: &Model,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = out.join("report").join(entry.id());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let input = to_gray_clahe(&load_image(&entry.image)?, &cfg.clahe)?;
    let gt = load_mask(&entry.ground_truth, DEFAULT_MASK_THRESHOLD)?;
    let fov = entry
        .fov
        .as_ref()
        .map(|p| load_mask(p, DEFAULT_MASK_THRESHOLD))
        .transpose()?;
    let pred = model.predict_all(&input, cfg.patch_size, cfg.inference_stride)?;
    let (w, h) = (input.width(), input.height());
    if gt.width() != w || gt.height() != h {
        return Err(Error::Shape(format!(
            "{}: ground truth {}x{} vs image {w}x{h}",
            entry.id(),
            gt.width(),
            gt.height()
        )));
    }
    let mut written = Vec::new();

    let heatmap: Vec<u8> = pred
        .fused
        .vessel_scores()
        .iter()
        .flat_map(|&s| heat(s))
        .collect();
    let path = dir.join("heatmap.png");
    write_png(&path, w, h, 3, &heatmap)?;
    written.push(path);

    for (i, side) in pred.sides.iter().enumerate() {
        let path = dir.join(format!("side{}.png", i + 1));
        write_png(&path, w, h, 1, &probability_gray(side))?;
        written.push(path);
    }

    let mask = binarize(&pred.fused);
    let path = dir.join("mask.png");
    write_mask_png(&path, &mask)?;
    written.push(path);

    let gray = input.to_u8();
    let mut overlay = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        let inside = fov.as_ref().is_none_or(|f| f.data()[i]);
        let rgb = match (inside, mask.data()[i], gt.data()[i]) {
            (true, false, true) => FALSE_NEGATIVE_RGB,
            (true, true, false) => FALSE_POSITIVE_RGB,
            // Keep plain pixels off the two marker colours.
            _ => [gray[i], gray[i], gray[i]],
        };
        overlay.extend_from_slice(&rgb);
    }
    let path = dir.join("overlay.png");
    write_png(&path, w, h, 3, &overlay)?;
    written.push(path);
    Ok(written)
}

/// Runs one invocation; returns the text to print on success.
pub fn run(args: &RunArgs) -> Result<String> {
    let run = RunConfig::resolve(args)?;
    let cfg = &run.train;
    match run.command {
        CommandName::Prepare => {
            let band = match cfg.labels {
                crate::labelgen::LabelScheme::EdgeAware { band_radius } => band_radius,
                crate::labelgen::LabelScheme::Binary => crate::labelgen::DEFAULT_BAND_RADIUS,
            };
            let summary = cmd_prepare(&run.manifest(Split::Train)?, band, &run.out)?;
            let total: u64 = summary.histogram.iter().sum();
            let mut text = format!(
                "{} class maps, weights in {}\n",
                summary.class_maps.len(),
                summary.weights.display()
            );
            for (c, n) in summary.histogram.iter().enumerate() {
                text += &format!(
                    "class {c}: {n} pixels ({:.2}%)\n",
                    100.0 * *n as f64 / total.max(1) as f64
                );
            }
            Ok(text)
        }
        CommandName::Train => {
            let outcome = cmd_train(&run.manifest(Split::Train)?, cfg, &run.out, true)?;
            let last = outcome.log.records.last().map_or(f64::NAN, |r| r.total);
            Ok(format!(
                "trained {} epochs, final loss {last:.5}, model in {}\n",
                outcome.log.records.len(),
                run.out.join("model.vseg").display()
            ))
        }
        CommandName::Predict => {
            let written = cmd_predict(&run.manifest(Split::Test)?, &run.model()?, cfg, &run.out)?;
            Ok(format!(
                "wrote {} files under {}\n",
                written.len(),
                run.out.join("predictions").display()
            ))
        }
        CommandName::Evaluate => {
            let report = cmd_evaluate(&run.manifest(Split::Test)?, &run.model()?, cfg, &run.out)?;
            Ok(report.to_table())
        }
        CommandName::Report => {
            let manifest = run.manifest(Split::Test)?;
            let model = run.model()?;
            let mut count = 0;
            for (_, entry) in manifest.split(Split::Test) {
                count += cmd_report(entry, &model, cfg, &run.out)?.len();
            }
            if count == 0 {
                return Err(Error::Argument(
                    "manifest has no test entries to report".into(),
                ));
            }
            Ok(format!(
                "wrote {count} images under {}\n",
                run.out.join("report").display()
            ))
        }
    }
}
