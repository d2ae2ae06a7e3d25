use std::fmt::Write as _;

use super::inference::{binarize, Model};
use super::metrics::{confusion, roc_auc, stratified_auc_scores, ConfusionCounts};
use crate::dataio::{load_image, load_mask, DatasetManifest, Split, DEFAULT_MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::labelgen::{build_class_map, DEFAULT_BAND_RADIUS};
use crate::preprocess::{to_gray_clahe, ClaheConfig};

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub acc: f64,
    pub sp: f64,
    pub se: f64,
    pub auc: f64,
    pub auc_thick: f64,
    pub auc_thin: f64,
}

/// Per-image rows plus one row pooling every evaluated pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub images: Vec<ImageMetrics>,
    pub pooled: ImageMetrics,
    /// Seconds per image spent in [`Model::predict`].
    pub seconds_per_image: f64,
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvaluationReport {
    /// `id,Acc,Sp,Se,AUC,AUC_thick,AUC_thin`, per image then the pooled row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,Acc,Sp,Se,AUC,AUC_thick,AUC_thin\n");
        for m in self.images.iter().chain([&self.pooled]) {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.id, m.acc, m.sp, m.se, m.auc, m.auc_thick, m.auc_thin
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<16} | {:>6} | {:>6} | {:>6} | {:>6} | {:>9} | {:>8}",
            "image", "Acc", "Sp", "Se", "AUC", "AUC thick", "AUC thin"
        )
        .unwrap();
        writeln!(out, "{}", "-".repeat(76)).unwrap();
        for m in self.images.iter().chain([&self.pooled]) {
            writeln!(
                out,
                "{:<16} | {:>6} | {:>6} | {:>6} | {:>6} | {:>9} | {:>8}",
                m.id,
                cell(m.acc),
                cell(m.sp),
                cell(m.se),
                cell(m.auc),
                cell(m.auc_thick),
                cell(m.auc_thin)
            )
            .unwrap();
        }
        out
    }
}

/// Predicts every `split` image of the manifest and scores it against its ground truth,
/// inside the FOV mask when one is listed.
pub fn evaluate_manifest(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    clahe: &ClaheConfig,
    patch: usize,
    stride: usize,
) -> Result<EvaluationReport> {
    let mut images = Vec::new();
    let mut counts = ConfusionCounts::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let mut strat_scores = Vec::new();
    let mut strat_labels = Vec::new();
    let mut seconds = 0.0;
    for (_, entry) in manifest.split(split) {
        let image = load_image(&entry.image)?;
        let gt = load_mask(&entry.ground_truth, DEFAULT_MASK_THRESHOLD)?;
        let fov = entry
            .fov
            .as_ref()
            .map(|p| load_mask(p, DEFAULT_MASK_THRESHOLD))
            .transpose()?;
        let input = to_gray_clahe(&image, clahe)?;
        let clock = std::time::Instant::now();
        let probs = model.predict(&input, patch, stride)?;
        seconds += clock.elapsed().as_secs_f64();
        let c = confusion(&binarize(&probs), &gt, fov.as_ref())?;
        counts.add(&c);
        let vessel_scores = probs.vessel_scores();
        let classes = build_class_map(&gt, DEFAULT_BAND_RADIUS)?;
        let strat = stratified_auc_scores(&vessel_scores, &classes, fov.as_ref())?;
        for (i, (&s, &g)) in vessel_scores.iter().zip(gt.data()).enumerate() {
            if fov.as_ref().is_some_and(|f| !f.data()[i]) {
                continue;
            }
            scores.push(s);
            labels.push(g);
            strat_scores.push(s);
            strat_labels.push(classes.data()[i]);
        }
        images.push(ImageMetrics {
            id: entry.id(),
            acc: c.accuracy(),
            sp: c.specificity(),
            se: c.sensitivity(),
            auc: strat.all,
            auc_thick: strat.thick,
            auc_thin: strat.thin,
        });
    }
    if images.is_empty() {
        return Err(Error::Argument(format!("manifest has no {split} entries")));
    }
    let pooled_map = crate::labelgen::ClassMap::new(strat_labels.len(), 1, strat_labels)?;
    let strat = stratified_auc_scores(&strat_scores, &pooled_map, None)?;
    let auc = if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        roc_auc(&scores, &labels)?.auc
    } else {
        f64::NAN
    };
    Ok(EvaluationReport {
        seconds_per_image: seconds / images.len() as f64,
        images,
        pooled: ImageMetrics {
            id: "all".into(),
            acc: counts.accuracy(),
            sp: counts.specificity(),
            se: counts.sensitivity(),
            auc,
            auc_thick: strat.thick,
            auc_thin: strat.thin,
        },
    })
}
