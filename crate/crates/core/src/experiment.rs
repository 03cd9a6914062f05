//! Config-driven evaluation runs: load or synthesize data, score with each
//! requested method, and emit JSON/CSV reports plus a run manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_scores::{
    fit_vim, hybrid_add, maha_score, rel_maha_score, vim_score, GaussianClassModel,
    HybridNormalizer, DEFAULT_SHRINKAGE,
};
use crate::logit_scores::{energy_score, entropy_score, max_logit, msp, DEFAULT_TEMPERATURE};
use crate::metrics::{DetectionReport, DEFAULT_TPR_TARGET};
use crate::rng;
use crate::scenarios::fitted_head_logits;
use crate::synth::{select_rows, synth_dataset, SynthSpec};
use crate::tensor::{load_any, write_atomic};

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}
fn default_tpr() -> f64 {
    DEFAULT_TPR_TARGET
}

/// Which ID rows the hybrid normalizer is fitted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefSplit {
    #[default]
    Train,
    /// A seeded half of the ID eval rows; the other half is evaluated.
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MethodSpec {
    Msp,
    MaxLogit,
    Entropy,
    Energy {
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Maha {
        #[serde(default = "default_shrinkage")]
        shrinkage: f64,
    },
    RelMaha {
        #[serde(default = "default_shrinkage")]
        shrinkage: f64,
    },
    Vim {
        /// Principal subspace dimension; `D / 2` when absent.
        #[serde(default)]
        dim: Option<usize>,
    },
    HybridAdd {
        #[serde(default = "default_shrinkage")]
        shrinkage: f64,
        #[serde(default)]
        ref_split: RefSplit,
    },
}

pub const METHOD_NAMES: [&str; 8] = [
    "msp",
    "max_logit",
    "entropy",
    "energy",
    "maha",
    "rel_maha",
    "vim",
    "hybrid_add",
];

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Msp => "msp",
            MethodSpec::MaxLogit => "max_logit",
            MethodSpec::Entropy => "entropy",
            MethodSpec::Energy { .. } => "energy",
            MethodSpec::Maha { .. } => "maha",
            MethodSpec::RelMaha { .. } => "rel_maha",
            MethodSpec::Vim { .. } => "vim",
            MethodSpec::HybridAdd { .. } => "hybrid_add",
        }
    }

    /// Parses a bare method name with every option at its default.
    pub fn from_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::json!({ "name": name })).map_err(|_| {
            Error::ConfigInvalid(format!(
                "unknown method `{name}`; known: {}",
                METHOD_NAMES.join(", ")
            ))
        })
    }

    fn needs_logits(&self) -> bool {
        matches!(
            self,
            MethodSpec::Msp
                | MethodSpec::MaxLogit
                | MethodSpec::Entropy
                | MethodSpec::Energy { .. }
                | MethodSpec::Vim { .. }
                | MethodSpec::HybridAdd { .. }
        )
    }

    fn needs_labels(&self) -> bool {
        matches!(
            self,
            MethodSpec::Maha { .. } | MethodSpec::RelMaha { .. } | MethodSpec::HybridAdd { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSplit {
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodFiles {
    pub name: String,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic splits; logits come from a linear head fitted on train.
    Synth { spec: SynthSpec },
    Files {
        train: FileSplit,
        id_eval: FileSplit,
        ood: Vec<OodFiles>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Run seed; replaces the seed of an inline synthetic spec.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_tpr")]
    pub tpr_target: f64,
    /// Output location. Not part of the run identity, so it is dropped from
    /// the echoed config and the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return bad(format!("tpr_target {} outside (0, 1]", self.tpr_target));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m.name()) {
                return bad(format!("method `{}` listed twice", m.name()));
            }
            match m {
                MethodSpec::Energy { temperature }
                    if !(temperature.is_finite() && *temperature > 0.0) =>
                {
                    return bad(format!("energy temperature {temperature} must be positive"));
                }
                MethodSpec::Maha { shrinkage }
                | MethodSpec::RelMaha { shrinkage }
                | MethodSpec::HybridAdd { shrinkage, .. }
                    if !(0.0..=1.0).contains(shrinkage) =>
                {
                    return bad(format!("shrinkage {shrinkage} outside [0, 1]"));
                }
                MethodSpec::Vim { dim: Some(0) } => return bad("vim dim must be positive".into()),
                _ => {}
            }
        }
        if let DataSource::Files {
            train,
            id_eval,
            ood,
        } = &self.data
        {
            if ood.is_empty() {
                return bad("at least one OOD set is required".into());
            }
            let mut names = BTreeSet::new();
            for o in ood {
                if !names.insert(o.name.as_str()) {
                    return bad(format!("OOD set name `{}` repeated", o.name));
                }
            }
            for m in &self.methods {
                if m.needs_logits()
                    && (id_eval.logits.is_none() || ood.iter().any(|o| o.logits.is_none()))
                {
                    return bad(format!(
                        "method `{}` needs logits for id_eval and every OOD set",
                        m.name()
                    ));
                }
                if matches!(m, MethodSpec::Vim { .. }) && train.logits.is_none() {
                    return bad("method `vim` needs train logits".into());
                }
                if m.needs_labels() && train.labels.is_none() {
                    return bad(format!("method `{}` needs train labels", m.name()));
                }
            }
        }
        Ok(())
    }

    /// The config as recorded in reports: run seed pushed into the synthetic
    /// spec, ViM dimension filled in, output directory removed.
    fn resolved(&self, feature_dim: usize) -> Self {
        let mut c = self.clone();
        c.out_dir = None;
        if let DataSource::Synth { spec } = &mut c.data {
            spec.seed = self.seed;
        }
        for m in &mut c.methods {
            if let MethodSpec::Vim { dim } = m {
                dim.get_or_insert(default_vim_dim(feature_dim));
            }
        }
        c
    }
}

pub fn default_vim_dim(feature_dim: usize) -> usize {
    (feature_dim / 2).max(1)
}

/// SHA-256 of the canonical (struct-order) JSON encoding.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

struct OodData {
    name: String,
    x: DMatrix<f64>,
    logits: Option<DMatrix<f64>>,
}

struct Prepared {
    train_x: DMatrix<f64>,
    train_y: Option<Vec<usize>>,
    train_logits: Option<DMatrix<f64>>,
    id_x: DMatrix<f64>,
    id_logits: Option<DMatrix<f64>>,
    oods: Vec<OodData>,
}

fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    Ok(load_any(path)?.to_matrix())
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    match &config.data {
        DataSource::Synth { spec } => {
            let spec = SynthSpec {
                seed: config.seed,
                ..spec.clone()
            };
            let s = synth_dataset(&spec)?;
            let train_x = s.train.features_f64();
            let train_y = s.train.require_labels()?.to_vec();
            let id_x = s.heldout.features_f64();
            let ood_x = s.ood.features_f64();
            let k = spec.n_classes();
            let (train_logits, id_logits, ood_logits) = if k >= 2 {
                let mut l = fitted_head_logits(&train_x, &train_y, k, &[&train_x, &id_x, &ood_x])?;
                let o = l.pop();
                let i = l.pop();
                (l.pop(), i, o)
            } else {
                (None, None, None)
            };
            Ok(Prepared {
                train_x,
                train_y: Some(train_y),
                train_logits,
                id_x,
                id_logits,
                oods: vec![OodData {
                    name: "ood".into(),
                    x: ood_x,
                    logits: ood_logits,
                }],
            })
        }
        DataSource::Files {
            train,
            id_eval,
            ood,
        } => {
            let opt = |p: &Option<PathBuf>| p.as_deref().map(load_matrix).transpose();
            let train_y = match &train.labels {
                Some(p) => Some(load_any(p)?.to_labels()?),
                None => None,
            };
            Ok(Prepared {
                train_x: load_matrix(&train.features)?,
                train_y,
                train_logits: opt(&train.logits)?,
                id_x: load_matrix(&id_eval.features)?,
                id_logits: opt(&id_eval.logits)?,
                oods: ood
                    .iter()
                    .map(|o| {
                        Ok(OodData {
                            name: o.name.clone(),
                            x: load_matrix(&o.features)?,
                            logits: opt(&o.logits)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        }
    }
}

fn need<'a>(m: Option<&'a DMatrix<f64>>, what: &str) -> Result<&'a DMatrix<f64>> {
    m.ok_or_else(|| Error::ConfigInvalid(format!("{what} not available")))
}

/// Scores for the ID eval rows and each OOD set.
struct MethodScores {
    id: Vec<f64>,
    oods: Vec<Vec<f64>>,
}

fn logit_method(
    data: &Prepared,
    f: impl Fn(&DMatrix<f64>) -> Result<Vec<f64>>,
) -> Result<MethodScores> {
    Ok(MethodScores {
        id: f(need(data.id_logits.as_ref(), "ID eval logits")?)?,
        oods: data
            .oods
            .iter()
            .map(|o| f(need(o.logits.as_ref(), "OOD logits")?))
            .collect::<Result<_>>()?,
    })
}

fn feature_method(
    data: &Prepared,
    f: impl Fn(&DMatrix<f64>) -> Result<Vec<f64>>,
) -> Result<MethodScores> {
    Ok(MethodScores {
        id: f(&data.id_x)?,
        oods: data.oods.iter().map(|o| f(&o.x)).collect::<Result<_>>()?,
    })
}

fn fit_gaussian(data: &Prepared, shrinkage: f64) -> Result<GaussianClassModel> {
    let y = data
        .train_y
        .as_deref()
        .ok_or_else(|| Error::ConfigInvalid("train labels not available".into()))?;
    GaussianClassModel::fit(&data.train_x, y, shrinkage)
}

fn run_method(m: &MethodSpec, data: &Prepared, seed: u64) -> Result<MethodScores> {
    match m {
        MethodSpec::Msp => logit_method(data, msp),
        MethodSpec::MaxLogit => logit_method(data, max_logit),
        MethodSpec::Entropy => logit_method(data, entropy_score),
        MethodSpec::Energy { temperature } => logit_method(data, |l| energy_score(l, *temperature)),
        MethodSpec::Maha { shrinkage } => {
            let model = fit_gaussian(data, *shrinkage)?;
            feature_method(data, |x| maha_score(&model, x))
        }
        MethodSpec::RelMaha { shrinkage } => {
            let model = fit_gaussian(data, *shrinkage)?;
            feature_method(data, |x| rel_maha_score(&model, x))
        }
        MethodSpec::Vim { dim } => {
            let m = dim.unwrap_or_else(|| default_vim_dim(data.train_x.ncols()));
            let vim = fit_vim(
                &data.train_x,
                need(data.train_logits.as_ref(), "train logits")?,
                m,
            )?;
            let id = vim_score(
                &vim,
                &data.id_x,
                need(data.id_logits.as_ref(), "ID eval logits")?,
            )?;
            let oods = data
                .oods
                .iter()
                .map(|o| vim_score(&vim, &o.x, need(o.logits.as_ref(), "OOD logits")?))
                .collect::<Result<_>>()?;
            Ok(MethodScores { id, oods })
        }
        MethodSpec::HybridAdd {
            shrinkage,
            ref_split,
        } => {
            let model = fit_gaussian(data, *shrinkage)?;
            let both = |x: &DMatrix<f64>, l: &DMatrix<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
                Ok((maha_score(&model, x)?, msp(l)?))
            };
            let id_logits = need(data.id_logits.as_ref(), "ID eval logits")?;
            let (id_x, id_l, norm) = match ref_split {
                RefSplit::Train => {
                    let (a, b) = both(
                        &data.train_x,
                        need(data.train_logits.as_ref(), "train logits")?,
                    )?;
                    (
                        data.id_x.clone(),
                        id_logits.clone(),
                        HybridNormalizer::fit(&a, &b)?,
                    )
                }
                RefSplit::Heldout => {
                    let n = data.id_x.nrows();
                    let perm = rng::permutation(&mut rng::stream(seed, 140), n);
                    let (r, e) = perm.split_at(n / 2);
                    let (a, b) = both(&select_rows(&data.id_x, r), &select_rows(id_logits, r))?;
                    (
                        select_rows(&data.id_x, e),
                        select_rows(id_logits, e),
                        HybridNormalizer::fit(&a, &b)?,
                    )
                }
            };
            let score = |x: &DMatrix<f64>, l: &DMatrix<f64>| -> Result<Vec<f64>> {
                let (a, b) = both(x, l)?;
                hybrid_add(&a, &b, &norm)
            };
            Ok(MethodScores {
                id: score(&id_x, &id_l)?,
                oods: data
                    .oods
                    .iter()
                    .map(|o| score(&o.x, need(o.logits.as_ref(), "OOD logits")?))
                    .collect::<Result<_>>()?,
            })
        }
    }
}

/// Scores `x` (with optional `logits`) using a method fitted on the
/// reference split. The held-out hybrid reference is unavailable here.
pub fn score_rows(
    method: &MethodSpec,
    train_x: &DMatrix<f64>,
    train_y: Option<&[usize]>,
    train_logits: Option<&DMatrix<f64>>,
    x: &DMatrix<f64>,
    logits: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>> {
    if let MethodSpec::HybridAdd {
        ref_split: RefSplit::Heldout,
        ..
    } = method
    {
        return Err(Error::ConfigInvalid(
            "hybrid_add ref_split=heldout needs an eval run".into(),
        ));
    }
    let data = Prepared {
        train_x: train_x.clone(),
        train_y: train_y.map(<[usize]>::to_vec),
        train_logits: train_logits.cloned(),
        id_x: x.clone(),
        id_logits: logits.cloned(),
        oods: Vec::new(),
    };
    Ok(run_method(method, &data, 0)?.id)
}

/// Everything deterministic about a run; serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config_hash: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub reports: Vec<DetectionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// The report plus wall-clock timings; serialized as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub report: RunReport,
    pub timings: Vec<StageTiming>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut timings = Vec::new();
    let t = Instant::now();
    let data = prepare(config)?;
    timings.push(StageTiming {
        stage: "data".into(),
        seconds: t.elapsed().as_secs_f64(),
    });

    let per_method: Vec<(Vec<DetectionReport>, StageTiming)> = config
        .methods
        .par_iter()
        .map(|m| {
            let t = Instant::now();
            let scores = run_method(m, &data, config.seed)?;
            let reports = data
                .oods
                .iter()
                .zip(&scores.oods)
                .map(|(o, s)| {
                    DetectionReport::evaluate(m.name(), &scores.id, s, config.tpr_target)
                        .map(|r| r.with_ood_set(&o.name))
                })
                .collect::<Result<Vec<_>>>()?;
            let timing = StageTiming {
                stage: format!("method:{}", m.name()),
                seconds: t.elapsed().as_secs_f64(),
            };
            Ok((reports, timing))
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (r, t) in per_method {
        reports.extend(r);
        timings.push(t);
    }
    let resolved = config.resolved(data.train_x.ncols());
    Ok(RunManifest {
        report: RunReport {
            schema_version: SCHEMA_VERSION,
            toolkit_version: crate::VERSION.into(),
            config_hash: config_hash(&resolved)?,
            rng_algorithm: rng::RNG_ALGORITHM.into(),
            seed: config.seed,
            config: resolved,
            reports,
        },
        timings,
    })
}

/// Columns of `report.csv`, one row per (method, OOD set).
pub const CSV_COLUMNS: &str = "method,ood_set,auroc,fpr_at_tpr,tpr_target,n_id,n_ood";

pub fn reports_csv(reports: &[DetectionReport]) -> String {
    let mut s = format!("{CSV_COLUMNS}\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{},{}\n",
            r.method,
            r.ood_set.as_deref().unwrap_or(""),
            r.auroc,
            r.fpr_at_95,
            r.tpr_target,
            r.n_id,
            r.n_ood
        ));
    }
    s
}

pub fn report_json(report: &RunReport) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(report)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes `report.json`, `report.csv` and `manifest.json` atomically.
pub fn emit(manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(
        &out_dir.join("report.json"),
        &report_json(&manifest.report)?,
    )?;
    write_atomic(
        &out_dir.join("report.csv"),
        reports_csv(&manifest.report.reports).as_bytes(),
    )?;
    let mut m = serde_json::to_vec_pretty(manifest)?;
    m.push(b'\n');
    write_atomic(&out_dir.join("manifest.json"), &m)
}
