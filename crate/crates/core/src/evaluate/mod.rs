//! Whole-image inference, binary reduction, Sp/Se/Acc and ROC analysis.

pub mod inference;
pub mod metrics;
pub mod report;

pub use inference::{binarize, scheme_for_classes, Model, Prediction, ProbabilityMap};
pub use metrics::{
    confusion, roc_auc, stratified_auc_scores, ConfusionCounts, RocCurve, StratifiedAuc,
};
pub use report::{evaluate_manifest, EvaluationReport, ImageMetrics};

use crate::dataio::BinaryMask;
use crate::error::Result;
use crate::labelgen::ClassMap;

/// Thick/thin-stratified AUC of a probability map's vessel score.
pub fn stratified_auc(
    p: &ProbabilityMap,
    gt: &ClassMap,
    fov: Option<&BinaryMask>,
) -> Result<StratifiedAuc> {
    stratified_auc_scores(&p.vessel_scores(), gt, fov)
}
