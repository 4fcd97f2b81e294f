//! Threshold-free evaluation of membership scores: ROC curve, AUC and TPR at
//! fixed low false-positive rates.
//!
//! cargo run --example roc_metrics

use memlab::attack::{MembershipScore, Method};
use memlab::eval::{evaluate_scores, metrics, roc_from_scores};

fn main() -> memlab::Result<()> {
    let scores = [0.9, 0.8, 0.8, 0.7, 0.4, 0.3, 0.2, 0.1];
    let labels = [1, 1, 0, 1, 0, 1, 0, 0];
    let curve = roc_from_scores(&scores, &labels)?;
    for p in &curve.points {
        println!("threshold {:>6} -> fpr {:.2} tpr {:.2}", p.threshold.map_or("-".into(), |t| format!("{t:.2}")), p.fpr, p.tpr);
    }
    println!("AUC {:.4}, TPR@25%FPR {:.2}", curve.auc, curve.tpr_at_fpr(0.25)?);

    // The same through the score-file representation, for two methods.
    let mut rows = Vec::new();
    for (i, (&s, &l)) in scores.iter().zip(&labels).enumerate() {
        let id = format!("r{i}");
        rows.push(MembershipScore { record_id: id.clone(), method: Method::Loss, score: s, label: l });
        rows.push(MembershipScore { record_id: id, method: Method::Spv, score: -s, label: l });
    }
    let m = metrics(&evaluate_scores(&rows)?)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}
