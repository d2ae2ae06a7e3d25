//! Confusion-matrix metrics, ROC AUC and the thick/thin AUC split on a toy prediction.

use vesselseg::dataio::BinaryMask;
use vesselseg::evaluate::{confusion, roc_auc, stratified_auc_scores};
use vesselseg::labelgen::build_class_map;

fn main() -> vesselseg::Result<()> {
    let n = 32;
    // A 6-pixel-wide horizontal vessel and a 1-pixel-wide vertical one.
    let gt = BinaryMask::new(
        n,
        n,
        (0..n * n)
            .map(|i| (10..16).contains(&(i / n)) || i % n == 24)
            .collect(),
    )?;
    // Scores track the thick vessel well and the thin one poorly.
    let scores: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            if (10..16).contains(&r) {
                0.9
            } else if c == 24 {
                0.3
            } else {
                0.1 + 0.3 * ((r * 7 + c * 3) % 10) as f64 / 10.0
            }
        })
        .collect();
    let pred = BinaryMask::new(n, n, scores.iter().map(|&s| s >= 0.5).collect())?;
    let c = confusion(&pred, &gt, None)?;
    println!(
        "Acc {:.4}  Se {:.4}  Sp {:.4}",
        c.accuracy(),
        c.sensitivity(),
        c.specificity()
    );
    println!("AUC {:.4}", roc_auc(&scores, gt.data())?.auc);
    let strat = stratified_auc_scores(&scores, &build_class_map(&gt, 2)?, None)?;
    println!("AUC thick {:.4}  thin {:.4}", strat.thick, strat.thin);
    Ok(())
}
