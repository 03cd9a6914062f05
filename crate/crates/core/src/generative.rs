//! Likelihood-based detection on toy generative models: a 1-D Gaussian
//! sweep, shared-covariance GMMs with covariance interpolation, and
//! coarse typicality statistics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_scores::{maha_score, GaussianClassModel, DEFAULT_SHRINKAGE};
use crate::linalg::{logsumexp, require_finite};
use crate::metrics::auroc;
use crate::rng;
use crate::synth::gaussian_rows;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// ID `N(0, 1)`, OOD `N(2, 1)`, model `N(mu, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy1dConfig {
    pub id_mean: f64,
    pub id_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            id_mean: 0.0,
            id_std: 1.0,
            ood_mean: 2.0,
            ood_std: 1.0,
            n_mc: 100_000,
            seed: 0,
        }
    }
}

pub const MIN_TOY1D_MC: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy1dRow {
    pub mu: f64,
    /// `E_ID[log N(x | mu, 1)]` in closed form.
    pub mean_id_loglik: f64,
    /// Monte Carlo estimate of the same quantity.
    pub mean_id_loglik_mc: f64,
    /// `KL(p_ID || N(mu, 1))`.
    pub kl: f64,
    pub auroc: f64,
}

pub fn toy1d_csv(rows: &[Toy1dRow]) -> String {
    let mut s = String::from("mu,mean_id_loglik,mean_id_loglik_mc,kl,auroc\n");
    for r in rows {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            r.mu, r.mean_id_loglik, r.mean_id_loglik_mc, r.kl, r.auroc
        ));
    }
    s
}

fn log_normal_unit(x: f64, mu: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * (x - mu) * (x - mu)
}

/// Scores with `log N(x | mu, 1)`. All grid points share one set of ID and
/// OOD draws.
pub fn toy1d_sweep(cfg: &Toy1dConfig, mu_grid: &[f64]) -> Result<Vec<Toy1dRow>> {
    if cfg.n_mc < MIN_TOY1D_MC {
        return Err(Error::TooFewSamples {
            what: "toy1d Monte Carlo draws",
            found: cfg.n_mc,
            required: MIN_TOY1D_MC,
        });
    }
    if !(cfg.id_std > 0.0 && cfg.ood_std > 0.0) {
        return Err(Error::ConfigInvalid(
            "standard deviations must be positive".into(),
        ));
    }
    if let Some(m) = mu_grid.iter().find(|m| !m.is_finite()) {
        return Err(Error::ConfigInvalid(format!("non-finite model mean {m}")));
    }
    let mut r_id = rng::stream(cfg.seed, 70);
    let mut r_ood = rng::stream(cfg.seed, 71);
    let x_id: Vec<f64> = rng::normals(&mut r_id, cfg.n_mc)
        .into_iter()
        .map(|z| cfg.id_mean + cfg.id_std * z)
        .collect();
    let x_ood: Vec<f64> = rng::normals(&mut r_ood, cfg.n_mc)
        .into_iter()
        .map(|z| cfg.ood_mean + cfg.ood_std * z)
        .collect();
    let (m0, s0) = (cfg.id_mean, cfg.id_std);
    mu_grid
        .par_iter()
        .map(|&mu| {
            let s_id: Vec<f64> = x_id.iter().map(|&x| log_normal_unit(x, mu)).collect();
            let s_ood: Vec<f64> = x_ood.iter().map(|&x| log_normal_unit(x, mu)).collect();
            Ok(Toy1dRow {
                mu,
                mean_id_loglik: -0.5 * LN_2PI - 0.5 * (s0 * s0 + (m0 - mu) * (m0 - mu)),
                mean_id_loglik_mc: s_id.iter().sum::<f64>() / s_id.len() as f64,
                kl: -s0.ln() + 0.5 * (s0 * s0 + (m0 - mu) * (m0 - mu)) - 0.5,
                auroc: auroc(&s_id, &s_ood)?,
            })
        })
        .collect()
}

pub fn default_mu_grid() -> Vec<f64> {
    vec![-10.0, -5.0, -3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]
}

fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::BadWeights(format!(
            "{} weights for {k} components",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::BadWeights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadWeights(format!("weights sum to {total}")));
    }
    Ok(())
}

/// `log sum_c w_c N(x | mu_c, Sigma)` per row, with the model's (shrunk)
/// shared covariance. `None` means equal weights.
pub fn gmm_loglik(
    model: &GaussianClassModel,
    weights: Option<&[f64]>,
    x: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let k = model.n_classes();
    let w: Vec<f64> = match weights {
        Some(w) => {
            check_weights(w, k)?;
            w.to_vec()
        }
        None => vec![1.0 / k as f64; k],
    };
    let log_w: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let d = model.class_distances(x)?;
    let norm = -0.5 * (model.dim() as f64 * LN_2PI + model.log_det());
    Ok((0..d.nrows())
        .map(|i| {
            let terms: Vec<f64> = (0..k).map(|c| log_w[c] - 0.5 * d[(i, c)]).collect();
            norm + logsumexp(&terms)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmInterpRow {
    pub t: f64,
    pub mean_id_loglik: f64,
    /// AUROC of the GMM log-likelihood score.
    pub auroc: f64,
    /// AUROC of the Mahalanobis score under the same covariance.
    pub maha_auroc: f64,
}

pub fn gmm_interp_csv(rows: &[GmmInterpRow]) -> String {
    let mut s = String::from("t,mean_id_loglik,auroc,maha_auroc\n");
    for r in rows {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?}\n",
            r.t, r.mean_id_loglik, r.auroc, r.maha_auroc
        ));
    }
    s
}

pub fn default_t_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

fn check_t_grid(t_grid: &[f64]) -> Result<()> {
    let sorted = t_grid.windows(2).all(|w| w[0] < w[1]);
    if t_grid.first() != Some(&0.0) || t_grid.last() != Some(&1.0) || !sorted {
        return Err(Error::BadGrid(
            "t grid must be strictly ascending from 0 to 1".into(),
        ));
    }
    Ok(())
}

/// Scores ID and OOD rows under `Sigma_t = (1 - t) Sigma_hat + t I`.
pub fn gmm_interp(
    model: &GaussianClassModel,
    weights: Option<&[f64]>,
    x_id: &DMatrix<f64>,
    x_ood: &DMatrix<f64>,
    t_grid: &[f64],
) -> Result<Vec<GmmInterpRow>> {
    check_t_grid(t_grid)?;
    let base = model.covariance().clone();
    let eye = DMatrix::identity(model.dim(), model.dim());
    t_grid
        .par_iter()
        .map(|&t| {
            let cov = &base * (1.0 - t) + &eye * t;
            let m = if t == 0.0 {
                model.clone()
            } else {
                model.with_covariance(cov)?
            };
            let l_id = gmm_loglik(&m, weights, x_id)?;
            let l_ood = gmm_loglik(&m, weights, x_ood)?;
            Ok(GmmInterpRow {
                t,
                mean_id_loglik: l_id.iter().sum::<f64>() / l_id.len() as f64,
                auroc: auroc(&l_id, &l_ood)?,
                maha_auroc: auroc(&maha_score(&m, x_id)?, &maha_score(&m, x_ood)?)?,
            })
        })
        .collect()
}

/// Anisotropic two-class instance: classes split along axis 0 (unit
/// variance), axis 1 carries variance `signal_variance`, and the remaining
/// `n_nuisance` axes have variance `nuisance_variance < 1`. OOD rows are ID
/// draws offset by `ood_offset` along axis 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmInterpConfig {
    pub class_separation: f64,
    pub signal_variance: f64,
    pub nuisance_variance: f64,
    pub n_nuisance: usize,
    pub ood_offset: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub t_grid: Vec<f64>,
    pub shrinkage: f64,
    pub seed: u64,
}

impl Default for GmmInterpConfig {
    fn default() -> Self {
        Self {
            class_separation: 3.0,
            signal_variance: 4.0,
            nuisance_variance: 0.05,
            n_nuisance: 50,
            ood_offset: 5.0,
            n_train: 4000,
            n_eval: 2000,
            t_grid: default_t_grid(),
            shrinkage: DEFAULT_SHRINKAGE,
            seed: 0,
        }
    }
}

pub fn gmm_interp_experiment(cfg: &GmmInterpConfig) -> Result<Vec<GmmInterpRow>> {
    if !(cfg.signal_variance > 0.0 && cfg.nuisance_variance > 0.0) {
        return Err(Error::ConfigInvalid("variances must be positive".into()));
    }
    let d = 2 + cfg.n_nuisance;
    let mut stds = vec![1.0, cfg.signal_variance.sqrt()];
    stds.extend(std::iter::repeat_n(
        cfg.nuisance_variance.sqrt(),
        cfg.n_nuisance,
    ));
    let mut r = rng::stream(cfg.seed, 80);
    let mut draw = |n: usize| -> (DMatrix<f64>, Vec<usize>) {
        let noise = gaussian_rows(&mut r, n, &vec![0.0; d], &stds);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut x = noise;
        for (i, &c) in y.iter().enumerate() {
            x[(i, 0)] += if c == 0 {
                -cfg.class_separation
            } else {
                cfg.class_separation
            };
        }
        (x, y)
    };
    let (x_tr, y_tr) = draw(cfg.n_train);
    let (x_id, _) = draw(cfg.n_eval);
    let (mut x_ood, _) = draw(cfg.n_eval);
    for i in 0..x_ood.nrows() {
        x_ood[(i, 1)] += cfg.ood_offset;
    }
    let model = GaussianClassModel::fit(&x_tr, &y_tr, cfg.shrinkage)?;
    gmm_interp(&model, None, &x_id, &x_ood, &cfg.t_grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypicalityMode {
    Norm,
    Mean,
}

/// Norm mode: `-| ||x|| - sqrt(D) |`. Mean mode: `-| mean_i x_i |`.
pub fn typicality_scores(x: &DMatrix<f64>, mode: TypicalityMode) -> Result<Vec<f64>> {
    if x.ncols() == 0 {
        return Err(Error::ShapeMismatch("typicality needs D >= 1".into()));
    }
    require_finite(x)?;
    let d = x.ncols() as f64;
    Ok(x.row_iter()
        .map(|r| match mode {
            TypicalityMode::Norm => -(r.norm() - d.sqrt()).abs(),
            TypicalityMode::Mean => -(r.sum() / d).abs(),
        })
        .collect())
}

/// Helper for the contrast check: `n` standard-normal points in `D`
/// dimensions with the origin appended as the last row.
pub fn standard_normal_with_origin(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, 90);
    let x = gaussian_rows(&mut r, n, &vec![0.0; d], &vec![1.0; d]);
    x.insert_row(n, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn standard_model(d: usize, means: Vec<DVector<f64>>) -> GaussianClassModel {
        GaussianClassModel::from_parameters(
            means,
            DMatrix::identity(d, d),
            0.0,
            DVector::zeros(d),
            DMatrix::identity(d, d),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let m = standard_model(2, vec![DVector::zeros(2)]);
        let l = gmm_loglik(&m, None, &DMatrix::zeros(1, 2)).unwrap();
        assert!((l[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((l[0] + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn dominant_component_limit() {
        let m = standard_model(
            2,
            vec![
                DVector::from_vec(vec![0.0, 0.0]),
                DVector::from_vec(vec![100.0, 0.0]),
            ],
        );
        let w = [0.3, 0.7];
        let l = gmm_loglik(&m, Some(&w), &DMatrix::from_row_slice(1, 2, &[100.0, 0.0])).unwrap();
        assert!((l[0] - (0.7f64.ln() - LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn component_permutation_invariance() {
        let a = DVector::from_vec(vec![1.0, -1.0]);
        let b = DVector::from_vec(vec![-2.0, 0.5]);
        let m1 = standard_model(2, vec![a.clone(), b.clone()]);
        let m2 = standard_model(2, vec![b, a]);
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -4.0, 2.0]);
        let l1 = gmm_loglik(&m1, Some(&[0.2, 0.8]), &x).unwrap();
        let l2 = gmm_loglik(&m2, Some(&[0.8, 0.2]), &x).unwrap();
        for (p, q) in l1.iter().zip(&l2) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn bad_weights_rejected() {
        let m = standard_model(1, vec![DVector::zeros(1), DVector::zeros(1)]);
        let x = DMatrix::zeros(1, 1);
        assert!(matches!(
            gmm_loglik(&m, Some(&[0.5, 0.6]), &x),
            Err(Error::BadWeights(_))
        ));
        assert!(matches!(
            gmm_loglik(&m, Some(&[1.0]), &x),
            Err(Error::BadWeights(_))
        ));
        assert!(matches!(
            gmm_loglik(&m, None, &DMatrix::zeros(1, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn toy1d_closed_forms() {
        let cfg = Toy1dConfig {
            n_mc: 20_000,
            ..Toy1dConfig::default()
        };
        let rows = toy1d_sweep(&cfg, &[-2.0, 0.0, 1.0, 3.0]).unwrap();
        for r in &rows {
            assert_eq!(r.kl, r.mu * r.mu / 2.0);
            assert!((r.mean_id_loglik - r.mean_id_loglik_mc).abs() < 0.05);
        }
        assert!((rows[2].auroc - 0.5).abs() < 0.02);
    }

    #[test]
    fn toy1d_rejects_small_mc() {
        let cfg = Toy1dConfig {
            n_mc: 10,
            ..Toy1dConfig::default()
        };
        assert!(matches!(
            toy1d_sweep(&cfg, &[0.0]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn t_zero_row_matches_base_model() {
        let cfg = GmmInterpConfig {
            n_nuisance: 3,
            n_train: 400,
            n_eval: 200,
            t_grid: vec![0.0, 1.0],
            ..GmmInterpConfig::default()
        };
        let rows = gmm_interp_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(matches!(
            gmm_interp_experiment(&GmmInterpConfig {
                t_grid: vec![0.5, 1.0],
                ..cfg
            }),
            Err(Error::BadGrid(_))
        ));
    }

    #[test]
    fn typicality_examples() {
        let origin = DMatrix::zeros(1, 100);
        assert_eq!(
            typicality_scores(&origin, TypicalityMode::Norm).unwrap(),
            vec![-10.0]
        );
        assert_eq!(
            typicality_scores(&origin, TypicalityMode::Mean).unwrap(),
            vec![0.0]
        );
        let on_sphere = DMatrix::from_element(1, 100, 1.0);
        assert!(typicality_scores(&on_sphere, TypicalityMode::Norm).unwrap()[0].abs() < 1e-14);
        assert!(typicality_scores(&DMatrix::zeros(1, 0), TypicalityMode::Norm).is_err());
    }
}
