//! Last-layer Laplace approximation for a multinomial logistic head.
//!
//! Parameters are a `K x (D + 1)` weight matrix (bias in the last column)
//! flattened row-major. The prior is `N(0, I / lambda_p)` on every entry,
//! bias included.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_spd, column_means, eigh_desc, entropy, min_eigenvalue, require_finite, softmax,
    symmetrize,
};
use crate::metrics::auroc;
use crate::rng;
use crate::synth::{gaussian_rows, interleaved_blobs};

pub const MIN_DRAWS: usize = 100;
pub const MAP_GRAD_TOL: f64 = 1e-8;
const MAP_MAX_ITER: usize = 100;

fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

fn weights_of(theta: &DVector<f64>, k: usize, d1: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, d1, theta.as_slice())
}

fn flatten(w: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        w.len(),
        w.row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
    )
}

fn row_softmax(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for i in 0..z.nrows() {
        let row: Vec<f64> = z.row(i).iter().copied().collect();
        for (j, v) in softmax(&row).into_iter().enumerate() {
            p[(i, j)] = v;
        }
    }
    p
}

/// Logits `X W^T + b` of a flattened head.
pub fn head_logits(
    theta: &DVector<f64>,
    n_classes: usize,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d1 = x.ncols() + 1;
    if theta.len() != n_classes * d1 {
        return Err(Error::DimensionMismatch {
            expected: n_classes * d1,
            found: theta.len(),
        });
    }
    Ok(augment(x) * weights_of(theta, n_classes, d1).transpose())
}

struct Objective {
    value: f64,
    grad: DVector<f64>,
}

fn objective(
    xa: &DMatrix<f64>,
    y: &[usize],
    theta: &DVector<f64>,
    k: usize,
    lambda: f64,
) -> Objective {
    let w = weights_of(theta, k, xa.ncols());
    let z = xa * w.transpose();
    let p = row_softmax(&z);
    let mut nll = 0.0;
    let mut resid = p.clone();
    for (i, &c) in y.iter().enumerate() {
        let row: Vec<f64> = z.row(i).iter().copied().collect();
        nll += crate::linalg::logsumexp(&row) - z[(i, c)];
        resid[(i, c)] -= 1.0;
    }
    let g = resid.transpose() * xa + &w * lambda;
    Objective {
        value: nll + 0.5 * lambda * theta.norm_squared(),
        grad: flatten(&g),
    }
}

/// Hessian of the summed negative log-likelihood (no prior term).
fn nll_hessian(xa: &DMatrix<f64>, theta: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let d1 = xa.ncols();
    let p = row_softmax(&(xa * weights_of(theta, k, d1).transpose()));
    let mut h = DMatrix::zeros(k * d1, k * d1);
    for a in 0..k {
        for b in a..k {
            let mut scaled = xa.clone();
            for i in 0..xa.nrows() {
                let wgt = if a == b {
                    p[(i, a)] * (1.0 - p[(i, a)])
                } else {
                    -p[(i, a)] * p[(i, b)]
                };
                scaled.row_mut(i).scale_mut(wgt);
            }
            let block = xa.transpose() * scaled;
            h.view_mut((a * d1, b * d1), (d1, d1)).copy_from(&block);
            if a != b {
                h.view_mut((b * d1, a * d1), (d1, d1))
                    .copy_from(&block.transpose());
            }
        }
    }
    symmetrize(&mut h);
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFit {
    pub theta: DVector<f64>,
    pub n_classes: usize,
    pub dim: usize,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Newton's method on `sum_i NLL_i + (lambda_p / 2) ||theta||^2`.
pub fn fit_map(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    prior_precision: f64,
) -> Result<MapFit> {
    if !(prior_precision.is_finite() && prior_precision > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "prior precision {prior_precision} must be positive"
        )));
    }
    if n_classes < 2 {
        return Err(Error::SingleClass(n_classes));
    }
    if x.nrows() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows with {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {c} outside 0..{n_classes}"
        )));
    }
    require_finite(x)?;
    let xa = augment(x);
    let p = n_classes * xa.ncols();
    let mut theta = DVector::zeros(p);
    let mut obj = objective(&xa, y, &theta, n_classes, prior_precision);
    let mut iterations = 0;
    while obj.grad.norm() > MAP_GRAD_TOL {
        if iterations == MAP_MAX_ITER {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: obj.grad.norm(),
            });
        }
        let mut h = nll_hessian(&xa, &theta, n_classes);
        for i in 0..p {
            h[(i, i)] += prior_precision;
        }
        let step = cholesky_spd(&h)?.solve(&obj.grad);
        let slope = obj.grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let next = objective(&xa, y, &cand, n_classes, prior_precision);
            if next.value <= obj.value - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                obj = next;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
    }
    Ok(MapFit {
        grad_norm: obj.grad.norm(),
        theta,
        n_classes,
        dim: x.ncols(),
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub map_weights: DVector<f64>,
    pub posterior_covariance: DMatrix<f64>,
    pub prior_precision: f64,
    pub n_train: usize,
    pub n_classes: usize,
    pub dim: usize,
}

/// Covariance `(H_nll(theta_map) + lambda_p I)^-1`. The NLL Hessian of a
/// softmax head does not depend on the labels.
pub fn laplace_fit(
    map: &MapFit,
    x: &DMatrix<f64>,
    prior_precision: f64,
) -> Result<LaplacePosterior> {
    if x.ncols() != map.dim {
        return Err(Error::DimensionMismatch {
            expected: map.dim,
            found: x.ncols(),
        });
    }
    if !(prior_precision.is_finite() && prior_precision > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "prior precision {prior_precision} must be positive"
        )));
    }
    let xa = augment(x);
    let mut h = nll_hessian(&xa, &map.theta, map.n_classes);
    for i in 0..h.nrows() {
        h[(i, i)] += prior_precision;
    }
    let chol = h.clone().cholesky().ok_or_else(|| Error::HessianNotPD {
        min_eigenvalue: min_eigenvalue(&h),
    })?;
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    if cov.clone().cholesky().is_none() {
        return Err(Error::HessianNotPD {
            min_eigenvalue: min_eigenvalue(&h),
        });
    }
    Ok(LaplacePosterior {
        map_weights: map.theta.clone(),
        posterior_covariance: cov,
        prior_precision,
        n_train: x.nrows(),
        n_classes: map.n_classes,
        dim: map.dim,
    })
}

impl LaplacePosterior {
    pub fn covariance_trace(&self) -> f64 {
        self.posterior_covariance.trace()
    }

    /// `S` parameter draws `theta_map + L z`, one per row.
    pub fn sample(&self, draws: usize, seed: u64) -> Result<DMatrix<f64>> {
        let l = cholesky_spd(&self.posterior_covariance)
            .map(|c| c.l())
            .or_else(|_| {
                // Near-degenerate posteriors: fall back to a symmetric square root.
                let (vals, vecs) = eigh_desc(&self.posterior_covariance);
                let root = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
                Ok::<_, Error>(&vecs * root)
            })?;
        let mut r = rng::stream(seed, 50);
        let p = self.map_weights.len();
        let mut out = DMatrix::zeros(draws, p);
        for s in 0..draws {
            let z = DVector::from_vec(rng::normals(&mut r, p));
            let theta = &self.map_weights + &l * z;
            out.row_mut(s).copy_from(&theta.transpose());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    /// Entropy of the mean predictive distribution.
    pub predictive: f64,
    /// Mean per-draw entropy.
    pub aleatoric: f64,
    /// Mutual information between label and parameters.
    pub epistemic: f64,
    pub mc_samples: usize,
    /// Standard error of the epistemic estimate: std of the per-draw
    /// `KL(p_s || p_mean)` over `sqrt(S)`.
    pub mc_std_err: f64,
}

impl UncertaintyDecomposition {
    /// True when epistemic falls below `-3 * mc_std_err`.
    pub fn flagged(&self) -> bool {
        self.epistemic < -3.0 * self.mc_std_err
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    /// Monte Carlo predictive class distribution, `N x K`.
    pub probs: DMatrix<f64>,
    pub decomposition: Vec<UncertaintyDecomposition>,
}

/// Decomposes one point's per-draw class distributions (`S x K`).
pub fn decompose(draw_probs: &DMatrix<f64>) -> UncertaintyDecomposition {
    let s = draw_probs.nrows();
    let mean: Vec<f64> = draw_probs.row_mean().iter().copied().collect();
    let predictive = entropy(&mean);
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|i| draw_probs.row(i).iter().copied().collect())
        .collect();
    let aleatoric = rows.iter().map(|r| entropy(r)).sum::<f64>() / s as f64;
    let kls: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .collect();
    let kl_mean = kls.iter().sum::<f64>() / s as f64;
    let var = if s > 1 {
        kls.iter().map(|v| (v - kl_mean).powi(2)).sum::<f64>() / (s - 1) as f64
    } else {
        0.0
    };
    UncertaintyDecomposition {
        predictive,
        aleatoric,
        epistemic: predictive - aleatoric,
        mc_samples: s,
        mc_std_err: (var / s as f64).sqrt(),
    }
}

/// Monte Carlo predictive over `draws` posterior samples, shared by all rows.
pub fn predictive(
    post: &LaplacePosterior,
    x: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<Predictive> {
    if draws < MIN_DRAWS {
        return Err(Error::TooFewDraws {
            found: draws,
            required: MIN_DRAWS,
        });
    }
    if x.ncols() != post.dim {
        return Err(Error::DimensionMismatch {
            expected: post.dim,
            found: x.ncols(),
        });
    }
    require_finite(x)?;
    let thetas = post.sample(draws, seed)?;
    let k = post.n_classes;
    let d1 = post.dim + 1;
    let xa = augment(x);
    let per_row: Vec<(Vec<f64>, UncertaintyDecomposition)> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let xi = xa.row(i);
            let mut dp = DMatrix::zeros(draws, k);
            for s in 0..draws {
                let z: Vec<f64> = (0..k)
                    .map(|c| {
                        (0..d1)
                            .map(|j| thetas[(s, c * d1 + j)] * xi[j])
                            .sum::<f64>()
                    })
                    .collect();
                for (c, v) in softmax(&z).into_iter().enumerate() {
                    dp[(s, c)] = v;
                }
            }
            let mean = dp.row_mean().iter().copied().collect();
            (mean, decompose(&dp))
        })
        .collect();
    let mut probs = DMatrix::zeros(x.nrows(), k);
    let mut decomposition = Vec::with_capacity(x.nrows());
    for (i, (p, d)) in per_row.into_iter().enumerate() {
        for (c, v) in p.into_iter().enumerate() {
            probs[(i, c)] = v;
        }
        decomposition.push(d);
    }
    Ok(Predictive {
        probs,
        decomposition,
    })
}

/// Blob classes for training, a fixed ID test set, and a fixed OOD probe
/// set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContractionConfig {
    pub class_means: Vec<Vec<f64>>,
    pub class_std: f64,
    pub n_grid: Vec<usize>,
    pub prior_precision: f64,
    pub draws: usize,
    pub n_id_test: usize,
    pub ood_mean: Vec<f64>,
    pub ood_std: f64,
    pub n_ood: usize,
    /// Draw the OOD probes from the ID mixture instead (null control).
    #[serde(default)]
    pub ood_from_id: bool,
    pub seed: u64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            class_means: vec![vec![-2.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.5]],
            class_std: 1.0,
            n_grid: vec![50, 500, 5000],
            prior_precision: 1.0,
            draws: 2000,
            n_id_test: 300,
            ood_mean: vec![0.0, -8.0],
            ood_std: 1.0,
            n_ood: 300,
            ood_from_id: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionRow {
    pub n: usize,
    pub covariance_trace: f64,
    pub mean_epistemic_id: f64,
    pub mean_epistemic_ood: f64,
    /// AUROC with `-epistemic` as the ID score.
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionTable {
    pub config: ContractionConfig,
    pub rows: Vec<ContractionRow>,
}

impl ContractionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,covariance_trace,mean_epistemic_id,mean_epistemic_ood,auroc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                r.n, r.covariance_trace, r.mean_epistemic_id, r.mean_epistemic_ood, r.auroc
            ));
        }
        s
    }
}

/// Training sets are nested prefixes of one class-balanced draw; test and
/// probe sets are fixed across the grid, as are the posterior draw seeds.
pub fn contraction_experiment(cfg: &ContractionConfig) -> Result<ContractionTable> {
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ConfigInvalid(
            "n_grid must be non-empty and strictly ascending".into(),
        ));
    }
    let d = cfg.ood_mean.len();
    if cfg.class_means.len() < 2 || cfg.class_means.iter().any(|m| m.len() != d) {
        return Err(Error::ConfigInvalid(
            "need two or more class means matching the OOD mean dimension".into(),
        ));
    }
    let k = cfg.class_means.len();
    let n_max = *cfg.n_grid.last().unwrap();
    let mut r = rng::stream(cfg.seed, 60);
    let (x_all, y_all) = interleaved_blobs(&mut r, &cfg.class_means, cfg.class_std, n_max);
    let (x_id, _) = interleaved_blobs(&mut r, &cfg.class_means, cfg.class_std, cfg.n_id_test);
    let x_ood = if cfg.ood_from_id {
        interleaved_blobs(&mut r, &cfg.class_means, cfg.class_std, cfg.n_ood).0
    } else {
        gaussian_rows(&mut r, cfg.n_ood, &cfg.ood_mean, &vec![cfg.ood_std; d])
    };
    let mut rows = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let x = x_all.rows(0, n).into_owned();
        let map = fit_map(&x, &y_all[..n], k, cfg.prior_precision)?;
        let post = laplace_fit(&map, &x, cfg.prior_precision)?;
        let id = predictive(&post, &x_id, cfg.draws, cfg.seed)?;
        let ood = predictive(&post, &x_ood, cfg.draws, cfg.seed)?;
        let e_id: Vec<f64> = id.decomposition.iter().map(|u| u.epistemic).collect();
        let e_ood: Vec<f64> = ood.decomposition.iter().map(|u| u.epistemic).collect();
        let neg = |v: &[f64]| v.iter().map(|e| -e).collect::<Vec<_>>();
        rows.push(ContractionRow {
            n,
            covariance_trace: post.covariance_trace(),
            mean_epistemic_id: e_id.iter().sum::<f64>() / e_id.len() as f64,
            mean_epistemic_ood: e_ood.iter().sum::<f64>() / e_ood.len() as f64,
            auroc: auroc(&neg(&e_id), &neg(&e_ood))?,
        });
    }
    Ok(ContractionTable {
        config: cfg.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MspGridPoint {
    pub u: f64,
    pub v: f64,
    pub map_msp: f64,
    pub bayes_msp: f64,
    pub epistemic: f64,
}

/// Evaluates MAP and posterior-predictive MSP on a `size x size` grid in the
/// plane of the top two principal axes of `x_ref`, spanning `extent`
/// standard units around its mean.
pub fn msp_grid(
    post: &LaplacePosterior,
    x_ref: &DMatrix<f64>,
    size: usize,
    extent: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<MspGridPoint>> {
    if size < 2 || !(extent.is_finite() && extent > 0.0) {
        return Err(Error::BadGrid(format!("size {size}, extent {extent}")));
    }
    if x_ref.ncols() != post.dim {
        return Err(Error::DimensionMismatch {
            expected: post.dim,
            found: x_ref.ncols(),
        });
    }
    let mean = column_means(x_ref);
    let centered = crate::linalg::center_rows(x_ref, &mean);
    let cov = crate::linalg::scatter(&centered, (x_ref.nrows().max(2) - 1) as f64);
    let (vals, vecs) = eigh_desc(&cov);
    let axes = vecs.columns(0, 2.min(post.dim)).into_owned();
    let scales: Vec<f64> = (0..axes.ncols())
        .map(|j| vals[j].max(0.0).sqrt().max(1e-12))
        .collect();
    let mut pts = DMatrix::zeros(size * size, post.dim);
    let mut uv = Vec::with_capacity(size * size);
    for a in 0..size {
        for b in 0..size {
            let u = -extent + 2.0 * extent * a as f64 / (size - 1) as f64;
            let v = -extent + 2.0 * extent * b as f64 / (size - 1) as f64;
            let mut p = mean.clone();
            p += axes.column(0) * (u * scales[0]);
            if axes.ncols() > 1 {
                p += axes.column(1) * (v * scales[1]);
            }
            pts.row_mut(a * size + b).copy_from(&p.transpose());
            uv.push((u, v));
        }
    }
    let map_p = row_softmax(&head_logits(&post.map_weights, post.n_classes, &pts)?);
    let pred = predictive(post, &pts, draws, seed)?;
    let max_row =
        |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(uv
        .into_iter()
        .enumerate()
        .map(|(i, (u, v))| MspGridPoint {
            u,
            v,
            map_msp: max_row(&map_p, i),
            bayes_msp: max_row(&pred.probs, i),
            epistemic: pred.decomposition[i].epistemic,
        })
        .collect())
}

pub fn msp_grid_csv(points: &[MspGridPoint]) -> String {
    let mut s = String::from("u,v,map_msp,bayes_msp,epistemic\n");
    for p in points {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            p.u, p.v, p.map_msp, p.bayes_msp, p.epistemic
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_blobs;

    fn blobs(seed: u64, n: usize, sep: f64) -> (DMatrix<f64>, Vec<usize>) {
        let mut r = rng::stream(seed, 0);
        interleaved_blobs(
            &mut r,
            &[vec![-sep, 0.0], vec![sep, 0.0], vec![0.0, sep]],
            1.0,
            n,
        )
    }

    #[test]
    fn zero_data_gives_prior() {
        let x = DMatrix::zeros(0, 2);
        let map = fit_map(&x, &[], 3, 2.0).unwrap();
        assert!(map.theta.iter().all(|&v| v == 0.0));
        let post = laplace_fit(&map, &x, 2.0).unwrap();
        let expect = DMatrix::identity(9, 9) * 0.5;
        assert!((post.posterior_covariance - expect).abs().max() < 1e-15);
    }

    #[test]
    fn strong_prior_shrinks_weights() {
        let (x, y) = blobs(1, 60, 2.0);
        let weak = fit_map(&x, &y, 3, 1.0).unwrap();
        let strong = fit_map(&x, &y, 3, 1e8).unwrap();
        assert!(strong.theta.norm() < 1e-5 * weak.theta.norm().max(1.0));
    }

    #[test]
    fn map_reaches_tolerance_and_classifies() {
        let (x, y) = blobs(2, 300, 4.0);
        let map = fit_map(&x, &y, 3, 1.0).unwrap();
        assert!(map.grad_norm <= MAP_GRAD_TOL);
        let (xh, yh) = blobs(3, 300, 4.0);
        let z = head_logits(&map.theta, 3, &xh).unwrap();
        let correct = (0..xh.nrows())
            .filter(|&i| z.row(i).transpose().imax() == yh[i])
            .count();
        assert!(correct as f64 / 300.0 >= 0.95);
    }

    #[test]
    fn hessian_matches_finite_difference_of_gradient() {
        let (x, y) = blobs(4, 12, 1.0);
        let xa = augment(&x);
        let theta = DVector::from_fn(9, |i, _| 0.1 * i as f64 - 0.3);
        let h = nll_hessian(&xa, &theta, 3);
        let eps = 1e-6;
        for j in 0..9 {
            let mut tp = theta.clone();
            tp[j] += eps;
            let mut tm = theta.clone();
            tm[j] -= eps;
            let gp = objective(&xa, &y, &tp, 3, 0.0).grad;
            let gm = objective(&xa, &y, &tm, 3, 0.0).grad;
            let col = (gp - gm) / (2.0 * eps);
            assert!((col - h.column(j)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn duplication_contracts_at_fixed_theta() {
        let (x, y) = blobs(5, 40, 1.0);
        let map = fit_map(&x, &y, 3, 1.0).unwrap();
        let mut traces = Vec::new();
        for m in [1usize, 2, 4] {
            let mut xm = x.clone();
            for _ in 1..m {
                xm = crate::synth::vstack(&xm, &x).unwrap();
            }
            traces.push(laplace_fit(&map, &xm, 1.0).unwrap().covariance_trace());
        }
        assert!(traces[2] < traces[1] && traces[1] < traces[0], "{traces:?}");
    }

    #[test]
    fn identity_is_exact_and_matches_mean_kl() {
        let (x, y) = blobs(6, 30, 1.0);
        let map = fit_map(&x, &y, 3, 1.0).unwrap();
        let post = laplace_fit(&map, &x, 1.0).unwrap();
        let probe = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 5.0, -3.0, 1.0]);
        let pred = predictive(&post, &probe, 500, 7).unwrap();
        for u in &pred.decomposition {
            assert_eq!(u.predictive - u.aleatoric - u.epistemic, 0.0);
            assert!(u.epistemic > 0.0);
            assert!(!u.flagged());
        }
        // Independent mean-KL evaluation over the same draws.
        let thetas = post.sample(500, 7).unwrap();
        let xa = augment(&probe);
        let mut dp = DMatrix::zeros(500, 3);
        for s in 0..500 {
            let w = weights_of(&thetas.row(s).transpose(), 3, 3);
            let z = &w * xa.row(1).transpose();
            let p = softmax(z.as_slice());
            for c in 0..3 {
                dp[(s, c)] = p[c];
            }
        }
        let mean = dp.row_mean();
        let mi: f64 = (0..500)
            .map(|s| {
                (0..3)
                    .map(|c| dp[(s, c)] * (dp[(s, c)] / mean[c]).ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 500.0;
        assert!((mi - pred.decomposition[1].epistemic).abs() < 1e-12);
    }

    #[test]
    fn collapsed_posterior_has_no_epistemic() {
        let (x, y) = blobs(7, 30, 1.0);
        let map = fit_map(&x, &y, 3, 1.0).unwrap();
        let mut post = laplace_fit(&map, &x, 1.0).unwrap();
        post.posterior_covariance *= 1e-24;
        let pred = predictive(&post, &x, 200, 1).unwrap();
        for u in &pred.decomposition {
            assert!(u.epistemic.abs() < 1e-9);
            assert!((u.predictive - u.aleatoric).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_point_is_near_ln2() {
        let mut r = rng::stream(8, 0);
        let (x, y) = gaussian_blobs(&mut r, &[vec![-3.0, 0.0], vec![3.0, 0.0]], 1.0, 500);
        let map = fit_map(&x, &y, 2, 1.0).unwrap();
        let post = laplace_fit(&map, &x, 1.0).unwrap();
        let pred = predictive(&post, &DMatrix::zeros(1, 2), 400, 0).unwrap();
        assert!((pred.decomposition[0].predictive - 2f64.ln()).abs() < 0.02);
    }

    #[test]
    fn too_few_draws_rejected() {
        let x = DMatrix::zeros(0, 2);
        let map = fit_map(&x, &[], 2, 1.0).unwrap();
        let post = laplace_fit(&map, &x, 1.0).unwrap();
        assert!(matches!(
            predictive(&post, &DMatrix::zeros(1, 2), 99, 0),
            Err(Error::TooFewDraws { found: 99, .. })
        ));
    }

    #[test]
    fn contraction_is_deterministic_and_null_is_flat() {
        let cfg = ContractionConfig {
            n_grid: vec![50, 400],
            draws: 200,
            n_id_test: 100,
            n_ood: 100,
            ood_from_id: true,
            ..ContractionConfig::default()
        };
        let a = contraction_experiment(&cfg).unwrap();
        let b = contraction_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        for r in &a.rows {
            assert!((r.auroc - 0.5).abs() < 0.1, "{r:?}");
        }
        assert_eq!(a.to_csv().lines().count(), 3);
    }

    #[test]
    fn grid_has_expected_shape() {
        let (x, y) = blobs(9, 60, 2.0);
        let map = fit_map(&x, &y, 3, 1.0).unwrap();
        let post = laplace_fit(&map, &x, 1.0).unwrap();
        let g = msp_grid(&post, &x, 5, 3.0, 100, 0).unwrap();
        assert_eq!(g.len(), 25);
        assert!(g
            .iter()
            .all(|p| p.bayes_msp >= 1.0 / 3.0 && p.map_msp <= 1.0));
        assert_eq!(msp_grid_csv(&g).lines().count(), 26);
    }
}
