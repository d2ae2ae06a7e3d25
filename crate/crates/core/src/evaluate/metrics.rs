use crate::dataio::BinaryMask;
use crate::error::{Error, Result};
use crate::labelgen::{ClassMap, THICK, THIN};

/// Pixel tallies of a binary segmentation against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    /// `TP / (TP + FN)`, NaN without positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`, NaN without negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// `(TP + TN) / total`, NaN for an empty evaluation region.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.fp += other.fp;
    }
}

fn check_size(a: &BinaryMask, b: &BinaryMask, what: &str) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} is {}x{}, prediction is {}x{}",
            b.width(),
            b.height(),
            a.width(),
            a.height()
        )))
    }
}

/// Counts over pixels inside `fov`, or over all pixels without one.
pub fn confusion(
    pred: &BinaryMask,
    gt: &BinaryMask,
    fov: Option<&BinaryMask>,
) -> Result<ConfusionCounts> {
    check_size(pred, gt, "ground truth")?;
    if let Some(f) = fov {
        check_size(pred, f, "FOV mask")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if fov.is_some_and(|f| !f.data()[i]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
        }
    }
    Ok(c)
}

/// ROC operating points from a descending threshold sweep, plus the area under them.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Trapezoidal ROC area with one operating point per distinct score.
///
/// Tied scores form a diagonal segment, so the area equals the Mann-Whitney
/// statistic with ties counted as one half. The area is accumulated in integers.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(format!(
            "ROC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: twice_area as f64 / (2 * pos as u128 * neg as u128) as f64,
    })
}

/// All-vessel, thick-only and thin-only AUC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StratifiedAuc {
    pub all: f64,
    pub thick: f64,
    pub thin: f64,
}

/// AUCs of `scores` against a five-class map: positives are classes {3,4}, {3}
/// or {4}; negatives are every non-vessel pixel. A stratum without positives is NaN.
pub fn stratified_auc_scores(
    scores: &[f64],
    gt: &ClassMap,
    fov: Option<&BinaryMask>,
) -> Result<StratifiedAuc> {
    if scores.len() != gt.data().len() {
        return Err(Error::Shape(format!(
            "{} scores for a {}x{} class map",
            scores.len(),
            gt.width(),
            gt.height()
        )));
    }
    if let Some(f) = fov {
        if (f.width(), f.height()) != (gt.width(), gt.height()) {
            return Err(Error::Shape("FOV mask and class map differ in size".into()));
        }
    }
    let auc_for = |positive: &[u8]| -> Result<f64> {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (i, &c) in gt.data().iter().enumerate() {
            if fov.is_some_and(|f| !f.data()[i]) {
                continue;
            }
            let vessel = c == THICK || c == THIN;
            if positive.contains(&c) || !vessel {
                s.push(scores[i]);
                l.push(vessel);
            }
        }
        let has_pos = l.iter().any(|&v| v);
        let has_neg = l.iter().any(|&v| !v);
        if !has_pos || !has_neg {
            return Ok(f64::NAN);
        }
        Ok(roc_auc(&s, &l)?.auc)
    };
    Ok(StratifiedAuc {
        all: auc_for(&[THICK, THIN])?,
        thick: auc_for(&[THICK])?,
        thin: auc_for(&[THIN])?,
    })
}
