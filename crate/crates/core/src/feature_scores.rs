//! Feature-space scores: class-conditional Gaussian (Mahalanobis), its
//! relative variant, ViM-style residual scoring, and the z-scored hybrid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    center_rows, cholesky_spd, column_means, eigh_desc, logsumexp, max_abs_deviation_from_identity,
    min_eigenvalue, require_finite, row_vec, scatter,
};
use crate::logit_scores::max_logit;

pub const DEFAULT_SHRINKAGE: f64 = 1e-3;

/// A Gaussian with a Cholesky whitening factor, `d(x) = |L^-1 (x - mu)|^2`.
#[derive(Debug, Clone)]
struct Whitener {
    chol: Cholesky<f64, Dyn>,
}

impl Whitener {
    fn new(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            chol: cholesky_spd(cov)?,
        })
    }

    /// `L^-1 X^T`, one whitened sample per column.
    fn whiten_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(&x.transpose())
            .expect("Cholesky factor has a positive diagonal")
    }

    fn whiten_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal")
    }

    fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Per-class means with a shared (pooled, shrunk) covariance, plus the
/// single-Gaussian background statistics used by relative Mahalanobis.
///
/// Summation order is fixed: means accumulate rows in index order and
/// scatter matrices come from one `Xc^T Xc` product, so identical inputs
/// yield bit-identical models.
#[derive(Debug, Clone)]
pub struct GaussianClassModel {
    class_means: Vec<DVector<f64>>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    shrinkage: f64,
    global_mean: DVector<f64>,
    global_cov: DMatrix<f64>,
    whitener: Whitener,
    global_whitener: Whitener,
    whitened_means: Vec<DVector<f64>>,
    whitened_global_mean: DVector<f64>,
}

fn shrink(cov: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let tau = cov.trace() / d as f64;
    let mut out = cov * (1.0 - lambda);
    for i in 0..d {
        out[(i, i)] += lambda * tau;
    }
    out
}

impl GaussianClassModel {
    /// Fits class means and the pooled within-class covariance
    /// `sum_c sum_{i in c} (x_i - mu_c)(x_i - mu_c)^T / (N - K)`, shrunk as
    /// `(1 - lambda) S + lambda * trace(S) / D * I`.
    pub fn fit(features: &DMatrix<f64>, labels: &[usize], shrinkage: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::BadShrinkage(shrinkage));
        }
        let (n, d) = features.shape();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput("training features"));
        }
        require_finite(features)?;
        let k = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::<f64>::zeros(d); k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[c][j] += features[(i, j)];
            }
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(Error::EmptyClass {
                class,
                count,
                required: 2,
            });
        }
        let means: Vec<DVector<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect();
        let mut centered = features.clone();
        for (i, &c) in labels.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] -= means[c][j];
            }
        }
        let pooled = scatter(&centered, (n - k) as f64);

        let global_mean = if k == 1 {
            means[0].clone()
        } else {
            column_means(features)
        };
        let global_cov = if k == 1 {
            pooled.clone()
        } else {
            scatter(&center_rows(features, &global_mean), (n - 1) as f64)
        };
        Self::from_parameters(
            means,
            shrink(&pooled, shrinkage),
            shrinkage,
            global_mean,
            shrink(&global_cov, shrinkage),
        )
    }

    /// Assembles a model from explicit parameters; `cov` and `global_cov`
    /// are used as given (already shrunk).
    pub fn from_parameters(
        class_means: Vec<DVector<f64>>,
        cov: DMatrix<f64>,
        shrinkage: f64,
        global_mean: DVector<f64>,
        global_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = cov.nrows();
        if cov.ncols() != d || global_cov.shape() != (d, d) || global_mean.len() != d {
            return Err(Error::ShapeMismatch(
                "covariance/mean shapes disagree".into(),
            ));
        }
        if let Some(m) = class_means.iter().find(|m| m.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: m.len(),
            });
        }
        if class_means.is_empty() {
            return Err(Error::EmptyInput("class means"));
        }
        let min_eig = min_eigenvalue(&cov);
        if !(min_eig > 0.0) {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min_eig,
            });
        }
        let whitener = Whitener::new(&cov)?;
        let precision = whitener.chol.inverse();
        if max_abs_deviation_from_identity(&(&cov * &precision)) > 1e-6 {
            return Err(Error::SingularCovariance {
                min_eigenvalue: min_eig,
            });
        }
        let global_whitener = Whitener::new(&global_cov)?;
        let whitened_means = class_means.iter().map(|m| whitener.whiten_vec(m)).collect();
        let whitened_global_mean = global_whitener.whiten_vec(&global_mean);
        Ok(Self {
            class_means,
            cov,
            precision,
            shrinkage,
            global_mean,
            global_cov,
            whitener,
            global_whitener,
            whitened_means,
            whitened_global_mean,
        })
    }

    /// Same means and background, new shared covariance.
    pub fn with_covariance(&self, cov: DMatrix<f64>) -> Result<Self> {
        Self::from_parameters(
            self.class_means.clone(),
            cov,
            self.shrinkage,
            self.global_mean.clone(),
            self.global_cov.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn class_means(&self) -> &[DVector<f64>] {
        &self.class_means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn global_mean(&self) -> &DVector<f64> {
        &self.global_mean
    }

    pub fn global_covariance(&self) -> &DMatrix<f64> {
        &self.global_cov
    }

    /// `log det Sigma`.
    pub fn log_det(&self) -> f64 {
        self.whitener.log_det()
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        require_finite(x)
    }

    /// Squared Mahalanobis distance of every row to every class mean
    /// (`N x K`).
    pub fn class_distances(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let z = self.whitener.whiten_rows(x);
        let mut out = DMatrix::zeros(x.nrows(), self.n_classes());
        for (i, col) in z.column_iter().enumerate() {
            for (c, m) in self.whitened_means.iter().enumerate() {
                out[(i, c)] = col
                    .iter()
                    .zip(m.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        Ok(out)
    }

    /// Squared Mahalanobis distance to the background Gaussian.
    pub fn background_distances(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let z = self.global_whitener.whiten_rows(x);
        Ok(z.column_iter()
            .map(|col| {
                col.iter()
                    .zip(self.whitened_global_mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect())
    }
}

/// `s(x) = -min_c (x - mu_c)^T Sigma^-1 (x - mu_c)`.
pub fn maha_score(model: &GaussianClassModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = model.class_distances(x)?;
    Ok(d.row_iter()
        .map(|r| -r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect())
}

/// `s(x) = -min_c [d_c(x) - d_0(x)]` with `d_0` the background distance.
pub fn rel_maha_score(model: &GaussianClassModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = model.class_distances(x)?;
    let d0 = model.background_distances(x)?;
    Ok(d.row_iter()
        .zip(d0)
        .map(|(r, b)| -r.iter().map(|dc| dc - b).fold(f64::INFINITY, f64::min))
        .collect())
}

/// Principal subspace plus residual scale for virtual-logit scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VimModel {
    /// `D x m`, orthonormal columns.
    pub principal_basis: DMatrix<f64>,
    pub residual_scale: f64,
    pub subspace_dim: usize,
    pub center: DVector<f64>,
}

impl VimModel {
    /// Residual norm `|(I - P P^T)(x - center)|` per row.
    pub fn residuals(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.center.len();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.ncols(),
            });
        }
        let centered = center_rows(x, &self.center);
        let proj = &centered * &self.principal_basis;
        let recon = &proj * self.principal_basis.transpose();
        let resid = centered - recon;
        Ok(resid.row_iter().map(|r| r.norm()).collect())
    }
}

/// Relative threshold below which eigenvalues count as zero.
const RANK_TOL: f64 = 1e-10;

/// Fits the ViM construction: `center` is the feature mean, the basis is the
/// top-`m` eigenvectors of the feature covariance, and
/// `alpha = mean |max logit| / mean residual`.
pub fn fit_vim(features: &DMatrix<f64>, logits: &DMatrix<f64>, m: usize) -> Result<VimModel> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::TooFewSamples {
            what: "ViM training rows",
            found: n,
            required: 2,
        });
    }
    if logits.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {n} feature rows",
            logits.nrows()
        )));
    }
    if m >= d {
        return Err(Error::RankDeficient {
            positive: d,
            requested: m,
        });
    }
    require_finite(features)?;
    let center = column_means(features);
    let cov = scatter(&center_rows(features, &center), (n - 1) as f64);
    let (vals, vecs) = eigh_desc(&cov);
    let top = vals[0].max(0.0);
    let positive = vals
        .iter()
        .filter(|&&v| v > RANK_TOL * top && v > 0.0)
        .count();
    if positive < m {
        return Err(Error::RankDeficient {
            positive,
            requested: m,
        });
    }
    let basis = vecs.columns(0, m).into_owned();
    let mut model = VimModel {
        principal_basis: basis,
        residual_scale: 1.0,
        subspace_dim: m,
        center,
    };
    let resid = model.residuals(features)?;
    let mean_resid = resid.iter().sum::<f64>() / n as f64;
    let spread = center_rows(features, &model.center)
        .row_iter()
        .map(|r| r.norm())
        .sum::<f64>()
        / n as f64;
    if !(mean_resid > RANK_TOL.sqrt() * spread) {
        return Err(Error::DegenerateResidual);
    }
    let mean_max_logit = max_logit(logits)?.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    if !(mean_max_logit > 0.0) {
        return Err(Error::DegenerateResidual);
    }
    model.residual_scale = mean_max_logit / mean_resid;
    Ok(model)
}

/// `s(x) = -softmax([f(x); alpha r(x)])_{K+1}`, in `(-1, 0)`.
pub fn vim_score(
    vim: &VimModel,
    features: &DMatrix<f64>,
    logits: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if features.nrows() != logits.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} logit rows",
            features.nrows(),
            logits.nrows()
        )));
    }
    require_finite(logits)?;
    let resid = vim.residuals(features)?;
    Ok(resid
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut row = row_vec(logits, i);
            let virt = vim.residual_scale * r;
            row.push(virt);
            -(virt - logsumexp(&row)).exp()
        })
        .collect())
}

/// Mean and standard deviation of each hybrid constituent on an ID
/// reference split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridNormalizer {
    pub maha_mean: f64,
    pub maha_std: f64,
    pub msp_mean: f64,
    pub msp_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

impl HybridNormalizer {
    pub fn new(maha_mean: f64, maha_std: f64, msp_mean: f64, msp_std: f64) -> Result<Self> {
        if !(maha_std > 0.0 && maha_std.is_finite()) {
            return Err(Error::ZeroVariance("maha"));
        }
        if !(msp_std > 0.0 && msp_std.is_finite()) {
            return Err(Error::ZeroVariance("msp"));
        }
        Ok(Self {
            maha_mean,
            maha_std,
            msp_mean,
            msp_std,
        })
    }

    /// Sample mean and (n - 1) standard deviation of each reference score.
    pub fn fit(maha_ref: &[f64], msp_ref: &[f64]) -> Result<Self> {
        if maha_ref.len() < 2 || msp_ref.len() < 2 {
            return Err(Error::TooFewSamples {
                what: "hybrid reference split",
                found: maha_ref.len().min(msp_ref.len()),
                required: 2,
            });
        }
        let (a, sa) = mean_std(maha_ref);
        let (b, sb) = mean_std(msp_ref);
        // Rounding leaves a tiny spread on constant inputs.
        let sa = if sa <= 1e-12 * a.abs().max(1e-300) {
            0.0
        } else {
            sa
        };
        let sb = if sb <= 1e-12 * b.abs().max(1e-300) {
            0.0
        } else {
            sb
        };
        Self::new(a, sa, b, sb)
    }
}

/// `z(maha) + z(msp)`.
pub fn hybrid_add(maha: &[f64], msp: &[f64], norm: &HybridNormalizer) -> Result<Vec<f64>> {
    if maha.len() != msp.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maha scores vs {} msp scores",
            maha.len(),
            msp.len()
        )));
    }
    Ok(maha
        .iter()
        .zip(msp)
        .map(|(a, b)| (a - norm.maha_mean) / norm.maha_std + (b - norm.msp_mean) / norm.msp_std)
        .collect())
}
