//! Dataset bundles and the seeded synthetic generator.
//!
//! The planted generator splits coordinates into `signal_dims` leading
//! coordinates (unit variance) and trailing noise coordinates (standard
//! deviation `noise_scale`). OOD rows are draws from the ID mixture shifted
//! by `signal_gap` along the unit vector `(1, .., 1, 0, .., 0) / sqrt(k)`, so
//! the ID and OOD means differ in exactly the first `k` coordinates.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{load_tensor, save_tensor, TensorF32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Heldout,
    Ood,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Heldout => "heldout",
            SplitTag::Ood => "ood",
        }
    }
}

/// Features plus optional logits and labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    features: TensorF32,
    logits: Option<TensorF32>,
    labels: Option<Vec<usize>>,
    split: SplitTag,
}

impl DatasetBundle {
    pub fn new(
        features: TensorF32,
        logits: Option<TensorF32>,
        labels: Option<Vec<usize>>,
        split: SplitTag,
    ) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::ShapeMismatch("features must be a 2-D tensor".into()));
        }
        let n = features.rows();
        if let Some(l) = &logits {
            if l.ndim() != 2 || l.rows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "logits have {} rows, features have {n}",
                    l.rows()
                )));
            }
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {n} feature rows",
                    y.len()
                )));
            }
            if split == SplitTag::Ood {
                return Err(Error::ShapeMismatch("OOD bundles carry no labels".into()));
            }
        }
        Ok(Self {
            features,
            logits,
            labels,
            split,
        })
    }

    /// Builds a bundle from f64 features, rounding them to f32 storage.
    pub fn from_matrix(
        features: &DMatrix<f64>,
        labels: Option<Vec<usize>>,
        split: SplitTag,
    ) -> Result<Self> {
        Self::new(TensorF32::from_matrix(features)?, None, labels, split)
    }

    pub fn with_logits(mut self, logits: &DMatrix<f64>) -> Result<Self> {
        let t = TensorF32::from_matrix(logits)?;
        if t.rows() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "logits have {} rows, features have {}",
                t.rows(),
                self.len()
            )));
        }
        self.logits = Some(t);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn features(&self) -> &TensorF32 {
        &self.features
    }

    pub fn features_f64(&self) -> DMatrix<f64> {
        self.features.to_matrix()
    }

    pub fn logits(&self) -> Option<&TensorF32> {
        self.logits.as_ref()
    }

    pub fn logits_f64(&self) -> Option<DMatrix<f64>> {
        self.logits.as_ref().map(TensorF32::to_matrix)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::ShapeMismatch(format!(
            "{} bundle has no labels",
            self.split.as_str()
        )))
    }

    /// Writes `<prefix>_features.oodt` and, when present, `_logits` and
    /// `_labels` siblings.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        save_tensor(&self.features, dir.join(format!("{prefix}_features.oodt")))?;
        if let Some(l) = &self.logits {
            save_tensor(l, dir.join(format!("{prefix}_logits.oodt")))?;
        }
        if let Some(y) = &self.labels {
            save_tensor(
                &TensorF32::from_labels(y)?,
                dir.join(format!("{prefix}_labels.oodt")),
            )?;
        }
        Ok(())
    }

    /// Inverse of [`DatasetBundle::save`]; missing logits/labels files are
    /// treated as absent.
    pub fn load(dir: &Path, prefix: &str, split: SplitTag) -> Result<Self> {
        let features = load_tensor(dir.join(format!("{prefix}_features.oodt")))?;
        let lp = dir.join(format!("{prefix}_logits.oodt"));
        let logits = if lp.exists() {
            Some(load_tensor(lp)?)
        } else {
            None
        };
        let yp = dir.join(format!("{prefix}_labels.oodt"));
        let labels = if yp.exists() {
            Some(load_tensor(yp)?.to_labels()?)
        } else {
            None
        };
        Self::new(features, logits, labels, split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovSpec {
    Identity,
    /// Per-coordinate noise variances.
    Diagonal {
        variances: Vec<f64>,
    },
    Planted {
        signal_dims: usize,
        signal_gap: f64,
        noise_scale: f64,
    },
}

/// Recipe for a synthetic train/heldout/OOD triple.
///
/// With `identity` or `diagonal` noise the OOD split is an unshifted draw
/// from the ID mixture (a null control); only `planted` moves the OOD mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub cov: CovSpec,
    #[serde(default)]
    pub seed: u64,
    /// OOD row count; defaults to `n_per_class * K`.
    #[serde(default)]
    pub n_ood: Option<usize>,
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateSpec(m));
        if self.n_per_class < 2 {
            return bad(format!("n_per_class = {} < 2", self.n_per_class));
        }
        if self.dim == 0 {
            return bad("dim = 0".into());
        }
        if self.class_means.is_empty() {
            return bad("no class means".into());
        }
        for (c, m) in self.class_means.iter().enumerate() {
            if m.len() != self.dim {
                return bad(format!(
                    "class mean {c} has length {}, dim is {}",
                    m.len(),
                    self.dim
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("class mean {c} is not finite"));
            }
        }
        match &self.cov {
            CovSpec::Identity => {}
            CovSpec::Diagonal { variances } => {
                if variances.len() != self.dim {
                    return bad(format!(
                        "{} variances for dim {}",
                        variances.len(),
                        self.dim
                    ));
                }
                if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("variances must be positive".into());
                }
            }
            CovSpec::Planted {
                signal_dims,
                signal_gap,
                noise_scale,
            } => {
                if *signal_dims > self.dim {
                    return bad(format!("signal_dims {signal_dims} > dim {}", self.dim));
                }
                if !(signal_gap.is_finite() && *signal_gap >= 0.0) {
                    return bad(format!("signal_gap {signal_gap} must be >= 0"));
                }
                if !(noise_scale.is_finite() && *noise_scale > 0.0) {
                    return bad(format!("noise_scale {noise_scale} must be > 0"));
                }
            }
        }
        Ok(())
    }

    fn noise_std(&self) -> Vec<f64> {
        match &self.cov {
            CovSpec::Identity => vec![1.0; self.dim],
            CovSpec::Diagonal { variances } => variances.iter().map(|v| v.sqrt()).collect(),
            CovSpec::Planted {
                signal_dims,
                noise_scale,
                ..
            } => (0..self.dim)
                .map(|j| if j < *signal_dims { 1.0 } else { *noise_scale })
                .collect(),
        }
    }

    fn ood_shift(&self) -> Vec<f64> {
        let mut shift = vec![0.0; self.dim];
        if let CovSpec::Planted {
            signal_dims,
            signal_gap,
            ..
        } = &self.cov
        {
            if *signal_dims > 0 {
                let per = signal_gap / (*signal_dims as f64).sqrt();
                shift[..*signal_dims].iter_mut().for_each(|s| *s = per);
            }
        }
        shift
    }
}

/// The train, heldout and OOD splits produced by [`synth_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: DatasetBundle,
    pub heldout: DatasetBundle,
    pub ood: DatasetBundle,
}

const TRAIN_STREAM: u64 = 0;
const HELDOUT_STREAM: u64 = 1;
const OOD_STREAM: u64 = 2;

/// Draws `n_per_class` rows per class in class order; row `i` of the OOD
/// split comes from class `i mod K`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthSplits> {
    spec.validate()?;
    let std = spec.noise_std();
    let k = spec.n_classes();
    let draw_id = |stream_id: u64, split: SplitTag| -> Result<DatasetBundle> {
        let mut rng = rng::stream(spec.seed, stream_id);
        let n = spec.n_per_class * k;
        let mut x = DMatrix::zeros(n, spec.dim);
        let mut y = Vec::with_capacity(n);
        for c in 0..k {
            for i in 0..spec.n_per_class {
                let row = c * spec.n_per_class + i;
                for j in 0..spec.dim {
                    x[(row, j)] = spec.class_means[c][j] + std[j] * rng::normal(&mut rng);
                }
                y.push(c);
            }
        }
        DatasetBundle::from_matrix(&x, Some(y), split)
    };
    let train = draw_id(TRAIN_STREAM, SplitTag::Train)?;
    let heldout = draw_id(HELDOUT_STREAM, SplitTag::Heldout)?;

    let shift = spec.ood_shift();
    let n_ood = spec.n_ood.unwrap_or(spec.n_per_class * k);
    let mut rng = rng::stream(spec.seed, OOD_STREAM);
    let mut x = DMatrix::zeros(n_ood, spec.dim);
    for i in 0..n_ood {
        let c = i % k;
        for j in 0..spec.dim {
            x[(i, j)] = spec.class_means[c][j] + shift[j] + std[j] * rng::normal(&mut rng);
        }
    }
    let ood = DatasetBundle::from_matrix(&x, None, SplitTag::Ood)?;
    Ok(SynthSplits {
        train,
        heldout,
        ood,
    })
}

/// Draws `n` rows from `N(mean, diag(std^2))`.
pub fn gaussian_rows(
    rng: &mut rng::StreamRng,
    n: usize,
    mean: &[f64],
    std: &[f64],
) -> DMatrix<f64> {
    let d = mean.len();
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = mean[j] + std[j] * rng::normal(rng);
        }
    }
    x
}

/// Draws `n_per_class` rows around each mean with isotropic noise; returns
/// the stacked rows and their labels.
pub fn gaussian_blobs(
    rng: &mut rng::StreamRng,
    means: &[Vec<f64>],
    std: f64,
    n_per_class: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let d = means.first().map_or(0, Vec::len);
    let mut x = DMatrix::zeros(means.len() * n_per_class, d);
    let mut y = Vec::with_capacity(means.len() * n_per_class);
    for (c, m) in means.iter().enumerate() {
        for i in 0..n_per_class {
            for j in 0..d {
                x[(c * n_per_class + i, j)] = m[j] + std * rng::normal(rng);
            }
            y.push(c);
        }
    }
    (x, y)
}

/// Draws `n` rows with labels cycling `0, 1, .., K-1`, so every prefix is
/// class balanced.
pub fn interleaved_blobs(
    rng: &mut rng::StreamRng,
    means: &[Vec<f64>],
    std: f64,
    n: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let d = means.first().map_or(0, Vec::len);
    let k = means.len();
    let mut x = DMatrix::zeros(n, d);
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = means[y[i]][j] + std * rng::normal(rng);
        }
    }
    (x, y)
}

/// Stacks the rows of `a` on top of `b`.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    Ok(out)
}

/// Selects rows by index.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    x.select_rows(idx.iter())
}
