//! Threshold-free evaluation: ROC curves, AUC and low-FPR operating points.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{MembershipScore, Method};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called members. `None` for the origin.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps the threshold from high to low; tied scores move together, so a
/// tie contributes one diagonal step.
pub fn roc_from_scores(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::config("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::config(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::config("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc2 = 0.0; // twice the area, in units of 1/(pos·neg)
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 { tp += 1 } else { fp += 1 }
            i += 1;
        }
        auc2 += ((fp - fp0) * (tp + tp0)) as f64;
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: Some(t) });
    }
    Ok(RocCurve { points, auc: auc2 / (2.0 * pos as f64 * neg as f64) })
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_from_scores(scores, labels)?.auc)
}

impl RocCurve {
    /// Highest TPR among operating points whose FPR does not exceed `target`.
    pub fn tpr_at_fpr(&self, target: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::FprOutOfRange(target));
        }
        Ok(self.points.iter().filter(|p| p.fpr <= target).map(|p| p.tpr).fold(0.0, f64::max))
    }

    /// Columns `fpr,tpr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            fpr: f64,
            tpr: f64,
        }
        let err = |e: csv::Error| Error::config(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for p in &self.points {
            w.serialize(Row { fpr: p.fpr, tpr: p.tpr }).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub auc: f64,
    pub tpr_at_1pct: f64,
    pub tpr_at_01pct: f64,
}

impl MethodMetrics {
    pub fn from_curve(curve: &RocCurve) -> Result<Self> {
        Ok(MethodMetrics { auc: curve.auc, tpr_at_1pct: curve.tpr_at_fpr(0.01)?, tpr_at_01pct: curve.tpr_at_fpr(0.001)? })
    }
}

/// Metrics per method, keyed by method name.
pub type Metrics = BTreeMap<Method, MethodMetrics>;

/// Groups scores by method and computes one curve each.
pub fn evaluate_scores(scores: &[MembershipScore]) -> Result<BTreeMap<Method, RocCurve>> {
    let mut by_method: BTreeMap<Method, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for s in scores {
        let e = by_method.entry(s.method).or_default();
        e.0.push(s.score);
        e.1.push(s.label);
    }
    if by_method.is_empty() {
        return Err(Error::EmptyBatch);
    }
    by_method.into_iter().map(|(m, (s, l))| Ok((m, roc_from_scores(&s, &l)?))).collect()
}

pub fn metrics(curves: &BTreeMap<Method, RocCurve>) -> Result<Metrics> {
    curves.iter().map(|(&m, c)| Ok((m, MethodMetrics::from_curve(c)?))).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Pairwise Mann-Whitney statistic with half credit for ties.
    fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_inverted_and_tied() {
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0, 0.0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0, 0.0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[1.0; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        // one member-nonmember tie among four pairs
        assert_eq!(roc_auc(&[2.0, 1.0, 1.0, 0.0], &[1, 1, 0, 0]).unwrap(), 0.875);
    }

    #[test]
    fn curve_shape() {
        let c = roc_from_scores(&[0.9, 0.8, 0.8, 0.1], &[1, 0, 1, 0]).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(c.points[2].threshold, Some(0.8));
        assert!(c.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn tpr_at_fpr_uses_points_not_interpolation() {
        let c = roc_from_scores(&[0.9, 0.8, 0.8, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.tpr_at_fpr(0.0).unwrap(), 0.5);
        assert_eq!(c.tpr_at_fpr(0.49).unwrap(), 0.5);
        assert_eq!(c.tpr_at_fpr(0.5).unwrap(), 1.0);
        assert!(matches!(c.tpr_at_fpr(1.5), Err(Error::FprOutOfRange(_))));
        assert!(matches!(c.tpr_at_fpr(-0.1), Err(Error::FprOutOfRange(_))));
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc_auc(&[1.0, 2.0], &[1, 1]), Err(Error::SingleClass)));
        assert!(matches!(roc_auc(&[1.0, 2.0], &[0, 0]), Err(Error::SingleClass)));
        assert!(roc_auc(&[1.0], &[1, 0]).is_err());
        assert!(roc_auc(&[f64::NAN, 1.0], &[1, 0]).is_err());
    }

    #[test]
    fn evaluate_groups_by_method() {
        let mk = |id: &str, m, score, label| MembershipScore { record_id: id.into(), method: m, score, label };
        let scores = vec![
            mk("a", Method::Loss, 1.0, 1),
            mk("b", Method::Loss, 0.0, 0),
            mk("a", Method::Spv, 0.0, 1),
            mk("b", Method::Spv, 1.0, 0),
        ];
        let m = metrics(&evaluate_scores(&scores).unwrap()).unwrap();
        assert_eq!(m[&Method::Loss].auc, 1.0);
        assert_eq!(m[&Method::Spv].auc, 0.0);
        assert_eq!(m[&Method::Loss].tpr_at_1pct, 1.0);
        assert_eq!(serde_json::to_value(&m).unwrap()["spv"]["tpr_at_01pct"], 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 3.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let auc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((auc - mann_whitney(&scores, &labels)).abs() < 1e-12);
        }
    }
}
