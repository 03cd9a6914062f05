//! Confidence scores computed from a logit matrix (`N x K`).
//!
//! All scores are oriented so that larger means "more in-distribution";
//! entropy is negated to fit that convention.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{entropy, logsumexp, require_finite, row_vec, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMethod {
    Msp,
    MaxLogit,
    Entropy,
    Energy,
}

impl LogitMethod {
    pub fn name(self) -> &'static str {
        match self {
            LogitMethod::Msp => "msp",
            LogitMethod::MaxLogit => "max_logit",
            LogitMethod::Entropy => "entropy",
            LogitMethod::Energy => "energy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScoreConfig {
    pub method: LogitMethod,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl LogitScoreConfig {
    pub fn new(method: LogitMethod) -> Self {
        Self {
            method,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn score(&self, logits: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self.method {
            LogitMethod::Msp => msp(logits),
            LogitMethod::MaxLogit => max_logit(logits),
            LogitMethod::Entropy => entropy_score(logits),
            LogitMethod::Energy => energy_score(logits, self.temperature),
        }
    }
}

fn check(logits: &DMatrix<f64>, min_classes: usize) -> Result<()> {
    if logits.ncols() < min_classes {
        return Err(Error::SingleClass(logits.ncols()));
    }
    require_finite(logits)
}

fn per_row(logits: &DMatrix<f64>, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..logits.nrows())
        .map(|i| f(&row_vec(logits, i)))
        .collect()
}

/// Maximum softmax probability.
pub fn msp(logits: &DMatrix<f64>) -> Result<Vec<f64>> {
    check(logits, 2)?;
    Ok(per_row(logits, |row| {
        softmax(row).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }))
}

pub fn max_logit(logits: &DMatrix<f64>) -> Result<Vec<f64>> {
    check(logits, 1)?;
    Ok(per_row(logits, |row| {
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Negative predictive entropy in nats.
pub fn entropy_score(logits: &DMatrix<f64>) -> Result<Vec<f64>> {
    check(logits, 2)?;
    Ok(per_row(logits, |row| -entropy(&softmax(row))))
}

/// Negative free energy `T * logsumexp(f(x) / T)`.
pub fn energy_score(logits: &DMatrix<f64>, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    check(logits, 1)?;
    Ok(per_row(logits, |row| {
        let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
        temperature * logsumexp(&scaled)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(row: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, row.len(), row)
    }

    #[test]
    fn msp_examples() {
        assert!((msp(&one(&[0.0, 0.0, 0.0])).unwrap()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((msp(&one(&[2.0, 1.0, 0.0])).unwrap()[0] - 0.665_240_955_774_821_9).abs() < 1e-6);
        assert!((msp(&one(&[10.0, 0.0, 0.0])).unwrap()[0] - 0.999_909_208_384_340_9).abs() < 1e-6);
    }

    #[test]
    fn msp_rejects_single_class() {
        assert!(matches!(msp(&one(&[1.0])), Err(Error::SingleClass(1))));
        assert!(matches!(
            entropy_score(&one(&[1.0])),
            Err(Error::SingleClass(1))
        ));
    }

    #[test]
    fn max_logit_examples() {
        assert_eq!(max_logit(&one(&[2.0, 1.0, 0.0])).unwrap(), vec![2.0]);
        assert_eq!(max_logit(&one(&[-1.0, -5.0])).unwrap(), vec![-1.0]);
    }

    #[test]
    fn entropy_examples() {
        let ln2 = 2f64.ln();
        assert!((entropy_score(&one(&[0.0, 0.0])).unwrap()[0] + ln2).abs() < 1e-15);
        assert!((entropy_score(&one(&[0.0; 3])).unwrap()[0] + 3f64.ln()).abs() < 1e-15);
        // Direct evaluation: p = (e^10, 1, 1) / (e^10 + 2).
        let got = entropy_score(&one(&[10.0, 0.0, 0.0])).unwrap()[0];
        assert!((got + 0.000_998_711_894_057_5).abs() < 1e-5, "{got}");
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&one(&[0.0; 4]), 1.0).unwrap()[0] - 4f64.ln()).abs() < 1e-15);
        let e = energy_score(&one(&[2.0, 1.0, 0.0]), 1.0).unwrap()[0];
        assert!((e - 2.407_605_964_444_38).abs() < 1e-6);
        let e = energy_score(&one(&[50.0, 0.0, 0.0]), 1.0).unwrap()[0];
        assert!((e - 50.0).abs() < 1e-12);
        assert!(matches!(
            energy_score(&one(&[1.0, 2.0]), 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(
            msp(&one(&[1.0, f64::NAN])),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn overflow_safe_on_huge_logits() {
        let s = msp(&one(&[1e300, 1e300])).unwrap()[0];
        assert!((s - 0.5).abs() < 1e-15);
    }

    fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (2usize..8).prop_flat_map(|k| (prop::collection::vec(-20.0f64..20.0, k), -50.0f64..50.0))
    }

    proptest! {
        #[test]
        fn shift_behaviour((row, c) in logits_strategy()) {
            let a = one(&row);
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let b = one(&shifted);
            prop_assert!((msp(&a).unwrap()[0] - msp(&b).unwrap()[0]).abs() < 1e-12);
            prop_assert!((entropy_score(&a).unwrap()[0] - entropy_score(&b).unwrap()[0]).abs() < 1e-10);
            prop_assert!((max_logit(&b).unwrap()[0] - max_logit(&a).unwrap()[0] - c).abs() < 1e-12);
            prop_assert!((energy_score(&b, 1.0).unwrap()[0] - energy_score(&a, 1.0).unwrap()[0] - c).abs() < 1e-10);
        }

        #[test]
        fn energy_dominates_max_logit((row, _c) in logits_strategy()) {
            let a = one(&row);
            prop_assert!(energy_score(&a, 1.0).unwrap()[0] >= max_logit(&a).unwrap()[0]);
        }

        #[test]
        fn permutation_invariance((row, seed) in logits_strategy()) {
            let mut perm = row.clone();
            let mut rng = crate::rng::stream(seed.to_bits(), 0);
            let p = crate::rng::permutation(&mut rng, perm.len());
            for (i, &j) in p.iter().enumerate() { perm[i] = row[j]; }
            let (a, b) = (one(&row), one(&perm));
            for m in [LogitMethod::Msp, LogitMethod::MaxLogit, LogitMethod::Entropy, LogitMethod::Energy] {
                let cfg = LogitScoreConfig::new(m);
                prop_assert!((cfg.score(&a).unwrap()[0] - cfg.score(&b).unwrap()[0]).abs() < 1e-12);
            }
        }

        #[test]
        fn msp_range((row, _c) in logits_strategy()) {
            let k = row.len() as f64;
            let s = msp(&one(&row)).unwrap()[0];
            prop_assert!(s >= 1.0 / k - 1e-15 && s <= 1.0);
        }
    }
}
