//! Oracle diagnostics: a linear ID-vs-OOD probe, oracle PCA feature
//! selection for Mahalanobis, and the three-way error decomposition built on
//! them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_scores::{maha_score, GaussianClassModel, DEFAULT_SHRINKAGE};
use crate::linalg::{center_rows, column_means, eigh_desc, require_finite, scatter};
use crate::metrics::auroc;
use crate::rng;
use crate::synth::{select_rows, vstack};

pub const MIN_PROBE_ROWS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2: f64,
    /// Fraction of each side used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            train_fraction: 0.8,
            seed: 0,
            max_iter: 200,
            grad_tol: 1e-8,
        }
    }
}

/// Binary logistic probe separating ID (label 1) from OOD (label 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_strength: f64,
    pub train_fraction: f64,
    pub id_train_idx: Vec<usize>,
    pub id_heldout_idx: Vec<usize>,
    pub ood_train_idx: Vec<usize>,
    pub ood_heldout_idx: Vec<usize>,
    /// AUROC on the held-out rows only.
    pub heldout_auroc: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl OracleProbe {
    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let w = DVector::from_column_slice(&self.weights);
        (x * w).iter().map(|v| v + self.bias).collect()
    }
}

fn split_indices(n: usize, frac: f64, seed: u64, stream_id: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(&mut rng::stream(seed, stream_id), n);
    let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = perm[..n_train].to_vec();
    let mut held = perm[n_train..].to_vec();
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Minimizes `mean_i [softplus(z_i) - y_i z_i] + l2/2 |w|^2` (bias
/// unpenalized) with damped Newton steps.
pub(crate) fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    l2: f64,
    max_iter: usize,
    grad_tol: f64,
) -> Result<(DVector<f64>, usize, f64)> {
    let (n, d) = x.shape();
    let mut xt = DMatrix::from_element(n, d + 1, 1.0);
    xt.columns_mut(0, d).copy_from(x);
    let nf = n as f64;
    let objective = |theta: &DVector<f64>| -> f64 {
        let z = &xt * theta;
        let data: f64 = z
            .iter()
            .zip(y)
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum::<f64>()
            / nf;
        let reg: f64 = theta.rows(0, d).norm_squared() * 0.5 * l2;
        data + reg
    };
    let mut theta = DVector::zeros(d + 1);
    let mut f = objective(&theta);
    for iter in 0..=max_iter {
        let z = &xt * &theta;
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let resid = DVector::from_iterator(n, p.iter().zip(y).map(|(pi, yi)| pi - yi));
        let mut grad = xt.tr_mul(&resid) / nf;
        for j in 0..d {
            grad[j] += l2 * theta[j];
        }
        let gnorm = grad.norm();
        if gnorm <= grad_tol {
            return Ok((theta, iter, gnorm));
        }
        if iter == max_iter {
            return Err(Error::NonConvergence {
                iterations: iter,
                grad_norm: gnorm,
            });
        }
        let mut weighted = xt.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= p[i] * (1.0 - p[i]) / nf;
        }
        let mut hess = xt.tr_mul(&weighted);
        for j in 0..d {
            hess[(j, j)] += l2;
        }
        // The bias direction can lose curvature when classes separate.
        hess[(d, d)] += 1e-12;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let slope = -grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let fc = objective(&cand);
            if fc <= f + 1e-4 * t * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No decrease representable in floating point: report where we are.
            return Err(Error::NonConvergence {
                iterations: iter,
                grad_norm: gnorm,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Fits the oracle probe on a random `train_fraction` of each side and
/// reports AUROC on the remaining rows.
pub fn fit_oracle_probe(
    id: &DMatrix<f64>,
    ood: &DMatrix<f64>,
    cfg: &ProbeConfig,
) -> Result<OracleProbe> {
    for (what, m) in [("ID features", id), ("OOD features", ood)] {
        if m.nrows() < MIN_PROBE_ROWS {
            return Err(Error::TooFewSamples {
                what,
                found: m.nrows(),
                required: MIN_PROBE_ROWS,
            });
        }
    }
    if id.ncols() != ood.ncols() {
        return Err(Error::DimensionMismatch {
            expected: id.ncols(),
            found: ood.ncols(),
        });
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "probe train_fraction {} outside (0, 1)",
            cfg.train_fraction
        )));
    }
    if !(cfg.l2 > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "probe l2 {} must be positive",
            cfg.l2
        )));
    }
    require_finite(id)?;
    require_finite(ood)?;
    let (id_tr, id_ho) = split_indices(id.nrows(), cfg.train_fraction, cfg.seed, 10);
    let (ood_tr, ood_ho) = split_indices(ood.nrows(), cfg.train_fraction, cfg.seed, 11);
    let x = vstack(&select_rows(id, &id_tr), &select_rows(ood, &ood_tr))?;
    let y: Vec<f64> = std::iter::repeat_n(1.0, id_tr.len())
        .chain(std::iter::repeat_n(0.0, ood_tr.len()))
        .collect();
    let (theta, iterations, grad_norm) = fit_logistic(&x, &y, cfg.l2, cfg.max_iter, cfg.grad_tol)?;
    let d = id.ncols();
    let mut probe = OracleProbe {
        weights: theta.rows(0, d).iter().copied().collect(),
        bias: theta[d],
        l2_strength: cfg.l2,
        train_fraction: cfg.train_fraction,
        id_train_idx: id_tr,
        id_heldout_idx: id_ho,
        ood_train_idx: ood_tr,
        ood_heldout_idx: ood_ho,
        heldout_auroc: f64::NAN,
        iterations,
        grad_norm,
    };
    let s_id = probe.decision(&select_rows(id, &probe.id_heldout_idx));
    let s_ood = probe.decision(&select_rows(ood, &probe.ood_heldout_idx));
    probe.heldout_auroc = auroc(&s_id, &s_ood)?;
    Ok(probe)
}

/// Top-`k_max` principal axes of the pooled rows of `a` and `b`, centered
/// by their joint mean.
fn joint_pca(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k_max: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let joint = vstack(a, b)?;
    let mean = column_means(&joint);
    let cov = scatter(
        &center_rows(&joint, &mean),
        (joint.nrows().max(2) - 1) as f64,
    );
    let (_, vecs) = eigh_desc(&cov);
    Ok((mean, vecs.columns(0, k_max).into_owned()))
}

fn project(x: &DMatrix<f64>, mean: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    center_rows(x, mean) * basis
}

fn projected_maha_auroc(
    train: &DMatrix<f64>,
    labels: &[usize],
    eval: &DMatrix<f64>,
    ood: &DMatrix<f64>,
    mean: &DVector<f64>,
    basis: &DMatrix<f64>,
    shrinkage: f64,
) -> Result<f64> {
    let model = GaussianClassModel::fit(&project(train, mean, basis), labels, shrinkage)?;
    let s_id = maha_score(&model, &project(eval, mean, basis))?;
    let s_ood = maha_score(&model, &project(ood, mean, basis))?;
    auroc(&s_id, &s_ood)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePcaResult {
    pub auroc: f64,
    pub chosen_k: usize,
    /// `(k, AUROC)` for every admissible k, ascending in k.
    pub per_k: Vec<(usize, f64)>,
}

/// Keeps the ks strictly below `dim`, sorted and deduplicated.
fn admissible_grid(k_grid: &[usize], dim: usize) -> Result<Vec<usize>> {
    let mut ks: Vec<usize> = k_grid
        .iter()
        .copied()
        .filter(|&k| k > 0 && k < dim)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::EmptyGrid { dim });
    }
    Ok(ks)
}

/// Mahalanobis with oracle PCA feature selection.
///
/// The basis is computed on ID-eval and OOD rows together; Maha is refit in
/// each projected space and the best AUROC over the grid is returned (ties
/// go to the smaller k).
pub fn oracle_pca_maha(
    id_train: &DMatrix<f64>,
    id_labels: &[usize],
    id_eval: &DMatrix<f64>,
    ood: &DMatrix<f64>,
    k_grid: &[usize],
    shrinkage: f64,
) -> Result<OraclePcaResult> {
    let d = id_train.ncols();
    for m in [id_eval, ood] {
        if m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.ncols(),
            });
        }
    }
    let ks = admissible_grid(k_grid, d)?;
    let k_max = *ks.last().expect("grid is nonempty");
    let (mean, basis) = joint_pca(id_eval, ood, k_max)?;
    let per_k: Vec<(usize, f64)> = ks
        .par_iter()
        .map(|&k| {
            let b = basis.columns(0, k).into_owned();
            projected_maha_auroc(id_train, id_labels, id_eval, ood, &mean, &b, shrinkage)
                .map(|a| (k, a))
        })
        .collect::<Result<_>>()?;
    let (mut chosen_k, mut best) = per_k[0];
    for &(k, a) in &per_k[1..] {
        if a > best {
            best = a;
            chosen_k = k;
        }
    }
    Ok(OraclePcaResult {
        auroc: best,
        chosen_k,
        per_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionConfig {
    pub shrinkage: f64,
    pub k_grid: Vec<usize>,
    pub probe: ProbeConfig,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            shrinkage: DEFAULT_SHRINKAGE,
            k_grid: vec![32, 64, 128, 256],
            probe: ProbeConfig::default(),
        }
    }
}

/// Splits `1 - AUROC(maha)` into indistinguishable, other and irrelevant
/// parts. Components are stored unclamped; negatives are flagged in
/// `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub auroc_maha: f64,
    pub auroc_maha_pca: f64,
    pub auroc_oracle: f64,
    pub total_error: f64,
    pub indistinguishable: f64,
    pub other: f64,
    pub irrelevant: f64,
    pub chosen_k: usize,
    pub warnings: Vec<String>,
}

impl ErrorDecomposition {
    pub fn from_aurocs(
        auroc_maha: f64,
        auroc_maha_pca: f64,
        auroc_oracle: f64,
        chosen_k: usize,
    ) -> Self {
        let indistinguishable = 1.0 - auroc_oracle;
        let other = auroc_oracle - auroc_maha_pca;
        let irrelevant = auroc_maha_pca - auroc_maha;
        let mut warnings = Vec::new();
        for (name, v) in [
            ("indistinguishable", indistinguishable),
            ("other", other),
            ("irrelevant", irrelevant),
        ] {
            if v < 0.0 {
                warnings.push(format!("component `{name}` is negative ({v:.6})"));
            }
        }
        if auroc_oracle < auroc_maha_pca {
            warnings.push(format!(
                "oracle probe AUROC {auroc_oracle:.6} is below Maha + oracle PCA {auroc_maha_pca:.6}"
            ));
        }
        Self {
            auroc_maha,
            auroc_maha_pca,
            auroc_oracle,
            total_error: 1.0 - auroc_maha,
            indistinguishable,
            other,
            irrelevant,
            chosen_k,
            warnings,
        }
    }

    /// `indistinguishable + other + irrelevant - total_error`.
    pub fn telescoping_residual(&self) -> f64 {
        self.indistinguishable + self.other + self.irrelevant - self.total_error
    }
}

/// Runs plain Maha, Maha with oracle PCA, and the oracle probe on the same
/// (ID eval, OOD) pair and decomposes the Maha error.
pub fn error_decomposition(
    id_train: &DMatrix<f64>,
    id_labels: &[usize],
    id_eval: &DMatrix<f64>,
    ood: &DMatrix<f64>,
    cfg: &DecompositionConfig,
) -> Result<ErrorDecomposition> {
    let model = GaussianClassModel::fit(id_train, id_labels, cfg.shrinkage)?;
    let auroc_maha = auroc(&maha_score(&model, id_eval)?, &maha_score(&model, ood)?)?;
    let pca = oracle_pca_maha(
        id_train,
        id_labels,
        id_eval,
        ood,
        &cfg.k_grid,
        cfg.shrinkage,
    )?;
    let probe = fit_oracle_probe(id_eval, ood, &cfg.probe)?;
    Ok(ErrorDecomposition::from_aurocs(
        auroc_maha,
        pca.auroc,
        probe.heldout_auroc,
        pca.chosen_k,
    ))
}

/// Entry `(i, j)`: Maha AUROC against OOD set `j` in the top-`k` PCA basis
/// of ID-eval together with OOD set `i`.
pub fn feature_transfer_matrix(
    id_train: &DMatrix<f64>,
    id_labels: &[usize],
    id_eval: &DMatrix<f64>,
    ood_sets: &[DMatrix<f64>],
    k: usize,
    shrinkage: f64,
) -> Result<DMatrix<f64>> {
    if ood_sets.len() < 2 {
        return Err(Error::TooFewSets(ood_sets.len()));
    }
    let d = id_train.ncols();
    admissible_grid(&[k], d)?;
    let bases: Vec<(DVector<f64>, DMatrix<f64>)> = ood_sets
        .iter()
        .map(|o| joint_pca(id_eval, o, k))
        .collect::<Result<_>>()?;
    let m = ood_sets.len();
    let cells: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / m, cell % m);
            let (mean, basis) = &bases[i];
            projected_maha_auroc(
                id_train,
                id_labels,
                id_eval,
                &ood_sets[j],
                mean,
                basis,
                shrinkage,
            )
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_row_slice(m, m, &cells))
}
