//! Constructed synthetic instances that isolate one failure mode each.
//!
//! Every builder is deterministic in its seed. The CLI uses the defaults
//! when no data is supplied.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_scores::{maha_score, GaussianClassModel, DEFAULT_SHRINKAGE};
use crate::laplace::{fit_map, head_logits};
use crate::logit_scores::msp;
use crate::metrics::{auroc, fpr_at_tpr, DEFAULT_TPR_TARGET};
use crate::oracle::{
    error_decomposition, feature_transfer_matrix, fit_oracle_probe, DecompositionConfig,
    ErrorDecomposition, ProbeConfig,
};
use crate::rng;
use crate::shallow::{kplus1_detect, train, Architecture, LossKind, ShallowNet, TrainConfig};
use crate::synth::{gaussian_rows, interleaved_blobs, synth_dataset, CovSpec, SynthSpec};

/// Prior precision of the linear heads that produce logits for synthetic
/// features.
pub const HEAD_PRIOR_PRECISION: f64 = 1.0;

/// Logits from a multinomial logistic head fitted on the training split.
pub fn fitted_head_logits(
    x_train: &DMatrix<f64>,
    y_train: &[usize],
    n_classes: usize,
    evals: &[&DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let map = fit_map(x_train, y_train, n_classes, HEAD_PRIOR_PRECISION)?;
    evals
        .iter()
        .map(|x| head_logits(&map.theta, n_classes, x))
        .collect()
}

fn axis_means(k: usize, dim: usize, first_axis: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; dim];
            m[first_axis + c] = scale;
            m
        })
        .collect()
}

/// Planted instance with the OOD shift confined to the first
/// `signal_dims` of `dim` unit-variance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDecompositionConfig {
    pub dim: usize,
    pub signal_dims: usize,
    pub signal_gap: f64,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub decomposition: DecompositionConfig,
    pub seed: u64,
}

impl PlantedDecompositionConfig {
    /// Shift of norm 4 in 8 of 256 coordinates.
    pub fn irrelevant_features() -> Self {
        Self {
            dim: 256,
            signal_dims: 8,
            signal_gap: 4.0,
            n_classes: 2,
            n_per_class: 1000,
            decomposition: DecompositionConfig::default(),
            seed: 0,
        }
    }

    /// No shift at all: ID and OOD share one law.
    pub fn indistinguishable() -> Self {
        Self {
            dim: 16,
            signal_dims: 0,
            signal_gap: 0.0,
            n_classes: 2,
            n_per_class: 1000,
            decomposition: DecompositionConfig {
                k_grid: vec![4, 8],
                ..DecompositionConfig::default()
            },
            seed: 0,
        }
    }

    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            n_per_class: self.n_per_class,
            dim: self.dim,
            class_means: axis_means(self.n_classes, self.dim, self.signal_dims, 3.0),
            cov: CovSpec::Planted {
                signal_dims: self.signal_dims,
                signal_gap: self.signal_gap,
                noise_scale: 1.0,
            },
            seed: self.seed,
            n_ood: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDecompositionReport {
    pub decomposition: ErrorDecomposition,
    pub msp_auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn planted_decomposition(
    cfg: &PlantedDecompositionConfig,
) -> Result<PlantedDecompositionReport> {
    if cfg.n_classes + cfg.signal_dims > cfg.dim {
        return Err(Error::ConfigInvalid(
            "dim too small for the class axes".into(),
        ));
    }
    let s = synth_dataset(&cfg.spec())?;
    let (x_tr, y_tr) = (s.train.features_f64(), s.train.require_labels()?.to_vec());
    let (x_id, x_ood) = (s.heldout.features_f64(), s.ood.features_f64());
    let decomposition = error_decomposition(&x_tr, &y_tr, &x_id, &x_ood, &cfg.decomposition)?;
    let logits = fitted_head_logits(&x_tr, &y_tr, cfg.n_classes, &[&x_id, &x_ood])?;
    Ok(PlantedDecompositionReport {
        decomposition,
        msp_auroc: auroc(&msp(&logits[0])?, &msp(&logits[1])?)?,
        n_id: x_id.nrows(),
        n_ood: x_ood.nrows(),
    })
}

/// Two OOD sets shifted in disjoint coordinate blocks, with a few
/// high-variance nuisance axes that crowd the rest of any small PCA basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub block_dims: usize,
    pub n_nuisance: usize,
    pub nuisance_std: f64,
    pub n_plain: usize,
    pub gap: f64,
    pub class_separation: f64,
    pub n_per_class: usize,
    pub k: usize,
    pub shrinkage: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            block_dims: 4,
            n_nuisance: 3,
            nuisance_std: 3.0,
            n_plain: 4,
            gap: 8.0,
            class_separation: 2.0,
            n_per_class: 1000,
            k: 4,
            shrinkage: DEFAULT_SHRINKAGE,
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn dim(&self) -> usize {
        2 * self.block_dims + self.n_nuisance + 1 + self.n_plain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Row `i`: basis built with OOD set `i`; column `j`: evaluated on set `j`.
    pub matrix: Vec<Vec<f64>>,
}

pub fn transfer_instance(cfg: &TransferConfig) -> Result<TransferReport> {
    let d = cfg.dim();
    let b = cfg.block_dims;
    let class_axis = 2 * b + cfg.n_nuisance;
    let mut stds = vec![1.0; d];
    stds[2 * b..class_axis]
        .iter_mut()
        .for_each(|s| *s = cfg.nuisance_std);
    let mut means = vec![vec![0.0; d], vec![0.0; d]];
    means[0][class_axis] = -cfg.class_separation;
    means[1][class_axis] = cfg.class_separation;

    let mut r = rng::stream(cfg.seed, 110);
    let mut draw = |n: usize| {
        let (noise_free, y) = interleaved_blobs(&mut r, &means, 0.0, n);
        let noise = gaussian_rows(&mut r, n, &vec![0.0; d], &stds);
        (noise_free + noise, y)
    };
    let n = 2 * cfg.n_per_class;
    let (x_tr, y_tr) = draw(n);
    let (x_id, _) = draw(n);
    let per = cfg.gap / (b as f64).sqrt();
    let mut oods = Vec::new();
    for block in 0..2 {
        let (mut x, _) = draw(n);
        for i in 0..n {
            for j in block * b..(block + 1) * b {
                x[(i, j)] += per;
            }
        }
        oods.push(x);
    }
    let m = feature_transfer_matrix(&x_tr, &y_tr, &x_id, &oods, cfg.k, cfg.shrinkage)?;
    Ok(TransferReport {
        matrix: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
    })
}

/// OOD rows sit far out along one class's mean direction, so the head is
/// overconfident on them, and are offset along an axis the head ignores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitPathologyConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub class_scale: f64,
    /// OOD mean along class 0's axis, in units of `class_scale`.
    pub ood_push: f64,
    pub nuisance_offset: f64,
    pub n_per_class: usize,
    pub n_ood: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for LogitPathologyConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            n_classes: 3,
            class_scale: 3.0,
            ood_push: 2.0,
            nuisance_offset: 4.0,
            n_per_class: 700,
            n_ood: 2000,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPathologyReport {
    pub msp_fpr_at_95: f64,
    pub msp_auroc: f64,
    pub maha_auroc: f64,
    pub probe_auroc: f64,
}

pub fn logit_pathology(cfg: &LogitPathologyConfig) -> Result<LogitPathologyReport> {
    let (d, k) = (cfg.dim, cfg.n_classes);
    if k + 1 > d {
        return Err(Error::ConfigInvalid(
            "need one spare axis beyond the class axes".into(),
        ));
    }
    let means = axis_means(k, d, 0, cfg.class_scale);
    let mut r = rng::stream(cfg.seed, 120);
    let (x_tr, y_tr) = interleaved_blobs(&mut r, &means, 1.0, k * cfg.n_per_class);
    let (x_id, _) = interleaved_blobs(&mut r, &means, 1.0, k * cfg.n_per_class);
    let mut ood_mean = vec![0.0; d];
    ood_mean[0] = cfg.ood_push * cfg.class_scale;
    ood_mean[k] = cfg.nuisance_offset;
    let x_ood = gaussian_rows(&mut r, cfg.n_ood, &ood_mean, &vec![1.0; d]);

    let logits = fitted_head_logits(&x_tr, &y_tr, k, &[&x_id, &x_ood])?;
    let (s_id, s_ood) = (msp(&logits[0])?, msp(&logits[1])?);
    let model = GaussianClassModel::fit(&x_tr, &y_tr, DEFAULT_SHRINKAGE)?;
    let probe = fit_oracle_probe(&x_id, &x_ood, &cfg.probe)?;
    Ok(LogitPathologyReport {
        msp_fpr_at_95: fpr_at_tpr(&s_id, &s_ood, DEFAULT_TPR_TARGET)?,
        msp_auroc: auroc(&s_id, &s_ood)?,
        maha_auroc: auroc(&maha_score(&model, &x_id)?, &maha_score(&model, &x_ood)?)?,
        probe_auroc: probe.heldout_auroc,
    })
}

/// Two ID classes and one train-time OOD cluster in the plane. Test OOD is
/// drawn either from the train-time OOD cluster or from ID class 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KPlus1Config {
    pub class_means: Vec<Vec<f64>>,
    pub ood_cluster: Vec<f64>,
    pub std: f64,
    pub n_per_cluster: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for KPlus1Config {
    fn default() -> Self {
        Self {
            class_means: vec![vec![-4.0, 0.0], vec![4.0, 0.0]],
            ood_cluster: vec![0.0, 6.0],
            std: 1.0,
            n_per_cluster: 300,
            train: TrainConfig {
                architecture: Architecture::Linear,
                loss: LossKind::Ce,
                alpha: 0.0,
                extra_class: true,
                epochs: 500,
                batch_size: 0,
                step_size: 0.5,
                seed: 0,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPlus1Report {
    pub near_cluster_auroc: f64,
    pub in_id_cluster_auroc: f64,
    pub id_accuracy: f64,
}

pub fn kplus1_locality(cfg: &KPlus1Config) -> Result<KPlus1Report> {
    let k = cfg.class_means.len();
    let d = cfg.ood_cluster.len();
    if k < 2 || cfg.class_means.iter().any(|m| m.len() != d) {
        return Err(Error::ConfigInvalid(
            "need two or more class means of the OOD cluster's dimension".into(),
        ));
    }
    let mut all_means = cfg.class_means.clone();
    all_means.push(cfg.ood_cluster.clone());
    let mut r = rng::stream(cfg.seed, 130);
    let (x_tr, y_tr) = interleaved_blobs(&mut r, &all_means, cfg.std, (k + 1) * cfg.n_per_cluster);
    let (x_id, y_id) = interleaved_blobs(&mut r, &cfg.class_means, cfg.std, k * cfg.n_per_cluster);
    let near = gaussian_rows(
        &mut r,
        cfg.n_per_cluster,
        &cfg.ood_cluster,
        &vec![cfg.std; d],
    );
    let inside = gaussian_rows(
        &mut r,
        cfg.n_per_cluster,
        &cfg.class_means[0],
        &vec![cfg.std; d],
    );

    let net0 = ShallowNet::new(
        cfg.train.architecture,
        d,
        k,
        true,
        cfg.seed ^ cfg.train.seed,
    )?;
    let tc = TrainConfig {
        extra_class: true,
        loss: LossKind::Ce,
        ..cfg.train.clone()
    };
    let net = train(&net0, &x_tr, &y_tr, None, &tc)?.net;
    let s_id = kplus1_detect(&net, &x_id)?;
    Ok(KPlus1Report {
        near_cluster_auroc: auroc(&s_id, &kplus1_detect(&net, &near)?)?,
        in_id_cluster_auroc: auroc(&s_id, &kplus1_detect(&net, &inside)?)?,
        id_accuracy: crate::shallow::accuracy(&net, &x_id, &y_id)?,
    })
}
