//! Threshold-free detection metrics.
//!
//! ID is the positive class and scores are oriented "higher = more ID".
//! AUROC is the rank statistic `P(s_id > s_ood) + P(s_id = s_ood) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::require_finite_slice;

fn validate(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::EmptyInput("ID scores"));
    }
    if ood.is_empty() {
        return Err(Error::EmptyInput("OOD scores"));
    }
    require_finite_slice(id)?;
    require_finite_slice(ood)
}

/// Rank-sum AUROC in `O(N log N)`. Ties between an ID and an OOD score
/// earn half credit.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    validate(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the Mann-Whitney U, kept in integers so the result is exact.
    let mut twice_u: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut id_tied, mut ood_tied) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                id_tied += 1;
            } else {
                ood_tied += 1;
            }
            j += 1;
        }
        twice_u += id_tied * (2 * ood_below + ood_tied);
        ood_below += ood_tied;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

/// Smallest ID count `m` with `m / n >= target`.
fn required_kept(n: usize, target: f64) -> usize {
    let nf = n as f64;
    let mut m = ((target * nf).ceil() as usize).clamp(1, n);
    while m > 1 && ((m - 1) as f64) / nf >= target {
        m -= 1;
    }
    while m < n && (m as f64) / nf < target {
        m += 1;
    }
    m
}

/// Threshold that keeps at least `tpr_target` of the ID scores: the largest
/// `tau` with `|{s_id >= tau}| / n_id >= tpr_target`.
pub fn threshold_at_tpr(id: &[f64], tpr_target: f64) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::EmptyInput("ID scores"));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::BadTarget(tpr_target));
    }
    require_finite_slice(id)?;
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[required_kept(id.len(), tpr_target) - 1])
}

/// Fraction of OOD scores at or above the TPR-target threshold
/// (inclusive ties).
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    validate(id, ood)?;
    let tau = threshold_at_tpr(id, tpr_target)?;
    let accepted = ood.iter().filter(|&&s| s >= tau).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// ROC curve from a sweep over distinct scores.
///
/// `thresholds` is strictly descending; `tpr[i + 1]`/`fpr[i + 1]` are the
/// rates at `thresholds[i]` (inclusive) and index 0 is the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) * 0.5)
            .sum()
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.fpr.iter().copied().zip(self.tpr.iter().copied())
    }
}

pub fn roc_curve(id: &[f64], ood: &[f64]) -> Result<RocCurve> {
    validate(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let mut curve = RocCurve {
        thresholds: Vec::new(),
        tpr: vec![0.0],
        fpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let tau = all[i].0;
        while i < all.len() && all[i].0 == tau {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(tau);
        curve.tpr.push(tp as f64 / n_id);
        curve.fpr.push(fp as f64 / n_ood);
    }
    Ok(curve)
}

pub const DEFAULT_TPR_TARGET: f64 = 0.95;

/// Metrics for one (method, ID set, OOD set) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_set: Option<String>,
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub tpr_target: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub curve: RocCurve,
}

impl DetectionReport {
    pub fn evaluate(method: &str, id: &[f64], ood: &[f64], tpr_target: f64) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            ood_set: None,
            auroc: auroc(id, ood)?,
            fpr_at_95: fpr_at_tpr(id, ood, tpr_target)?,
            tpr_target,
            n_id: id.len(),
            n_ood: ood.len(),
            curve: roc_curve(id, ood)?,
        })
    }

    pub fn with_ood_set(mut self, name: impl Into<String>) -> Self {
        self.ood_set = Some(name.into());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in id {
            for &b in ood {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[-1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 7]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[5.0, 6.0], &[1.0, 2.0], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[5.0, 6.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        // 0.95 * 4 = 3.8 -> all four ID scores kept, tau = 0.
        assert_eq!(threshold_at_tpr(&[3.0, 2.0, 1.0, 0.0], 0.95).unwrap(), 0.0);
        assert_eq!(
            fpr_at_tpr(&[3.0, 2.0, 1.0, 0.0], &[0.5, -1.0], 0.95).unwrap(),
            0.5
        );
        assert!(matches!(
            fpr_at_tpr(&[1.0], &[1.0], 0.0),
            Err(Error::BadTarget(_))
        ));
        assert!(matches!(
            fpr_at_tpr(&[1.0], &[1.0], 1.5),
            Err(Error::BadTarget(_))
        ));
        assert!(matches!(
            fpr_at_tpr(&[1.0], &[], 0.9),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn full_target_uses_min_id_score() {
        assert_eq!(threshold_at_tpr(&[4.0, -2.0, 7.0], 1.0).unwrap(), -2.0);
    }

    #[test]
    fn exact_fractions_are_kept_exactly() {
        // 0.95 * 20 = 19 exactly: 19 of 20 kept, not 20.
        let id: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(threshold_at_tpr(&id, 0.95).unwrap(), 1.0);
        assert_eq!(threshold_at_tpr(&id, 0.5).unwrap(), 10.0);
    }

    #[test]
    fn roc_examples() {
        let c = roc_curve(&[1.0], &[0.0]).unwrap();
        assert_eq!(
            c.points().collect::<Vec<_>>(),
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        );
        let c = roc_curve(&[2.0, 2.0], &[2.0]).unwrap();
        assert_eq!(c.points().collect::<Vec<_>>(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(c.area(), 0.5);
    }

    #[test]
    fn same_law_fpr_is_close_to_target() {
        let mut rng = crate::rng::stream(99, 0);
        let id = crate::rng::normals(&mut rng, 100_000);
        let ood = crate::rng::normals(&mut rng, 100_000);
        let f = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        assert!((f - 0.95).abs() < 0.01, "{f}");
    }

    fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        // Coarse grid forces frequent ties.
        let v = prop::collection::vec((-8i32..8).prop_map(|x| f64::from(x) * 0.5), 1..60);
        (v.clone(), v)
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force((id, ood) in scores()) {
            prop_assert_eq!(auroc(&id, &ood).unwrap(), brute_auroc(&id, &ood));
        }

        #[test]
        fn curve_area_matches_rank_statistic((id, ood) in scores()) {
            let c = roc_curve(&id, &ood).unwrap();
            prop_assert!((c.area() - auroc(&id, &ood).unwrap()).abs() < 1e-9);
            prop_assert_eq!(c.tpr.last().copied(), Some(1.0));
            prop_assert_eq!(c.fpr.last().copied(), Some(1.0));
            prop_assert!(c.thresholds.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(c.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn auroc_is_antisymmetric_without_ties(
            id in prop::collection::vec(-1e3f64..1e3, 1..40),
            ood in prop::collection::vec(-1e3f64..1e3, 1..40),
        ) {
            prop_assume!(id.iter().all(|a| ood.iter().all(|b| a != b)));
            let s = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auroc_invariant_under_monotone_map((id, ood) in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp() + x.powi(3)).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
        }
    }
}
