use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use oodlens::error::{Error, Result};
use oodlens::experiment::{self, ExperimentConfig, MethodSpec, RefSplit};
use oodlens::feature_scores::DEFAULT_SHRINKAGE;
use oodlens::generative::{
    default_mu_grid, gmm_interp_csv, gmm_interp_experiment, standard_normal_with_origin, toy1d_csv,
    toy1d_sweep, typicality_scores, GmmInterpConfig, Toy1dConfig, TypicalityMode,
};
use oodlens::laplace::{
    contraction_experiment, fit_map, laplace_fit, msp_grid, msp_grid_csv, ContractionConfig,
};
use oodlens::logit_scores::DEFAULT_TEMPERATURE;
use oodlens::oracle::{error_decomposition, feature_transfer_matrix, DecompositionConfig};
use oodlens::rng;
use oodlens::scenarios::{
    fitted_head_logits, kplus1_locality, planted_decomposition, transfer_instance, KPlus1Config,
    PlantedDecompositionConfig, TransferConfig,
};
use oodlens::shallow::{
    accuracy, oe_tradeoff_experiment, train, OeTradeoffConfig, ShallowNet, TrainConfig,
};
use oodlens::synth::{interleaved_blobs, synth_dataset, SynthSpec};
use oodlens::tensor::{load_any, save_tensor, write_atomic, TensorF32};

const OUTPUT_HELP: &str = "\
CSV OUTPUTS
  eval         report.csv      method,ood_set,auroc,fpr_at_tpr,tpr_target,n_id,n_ood
  score        scores.csv      score
  decompose    transfer.csv    one row per basis OOD set, one column per evaluated set
  transfer     transfer.csv    same layout as decompose
  train        loss_trace.csv  epoch,total,ce,oe
  oe-tradeoff  oe_tradeoff.csv run,detection_auroc,id_accuracy,shift_accuracy,final_loss
  laplace-demo contraction.csv n,covariance_trace,mean_epistemic_id,mean_epistemic_ood,auroc
               msp_grid.csv    u,v,map_msp,bayes_msp,epistemic
  toy1d        toy1d.csv       mu,mean_id_loglik,mean_id_loglik_mc,kl,auroc
  gmm-interp   gmm_interp.csv  t,mean_id_loglik,auroc,maha_auroc
  typicality   typicality.csv  index,norm_score,mean_score,is_origin

Scores are oriented so that higher means more in-distribution.

EXIT CODES
  0 success, 2 invalid configuration, 3 data error, 4 method failure.
  Errors are printed to stderr as a JSON object {\"error\", \"message\"}.

ENVIRONMENT
  OODLENS_THREADS  caps the worker thread count.";

#[derive(Parser)]
#[command(
    name = "oodlens",
    version,
    about = "Out-of-distribution detection scores, metrics and diagnostics"
)]
#[command(after_help = OUTPUT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Directory for output files (created if missing).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MethodOpts {
    /// Energy temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Covariance shrinkage toward the scaled identity, in [0, 1].
    #[arg(long)]
    shrinkage: Option<f64>,
    /// ViM principal subspace dimension (default D/2).
    #[arg(long)]
    vim_dim: Option<usize>,
    /// Reference rows for the Hybrid-Add normalizer.
    #[arg(long, value_enum)]
    hybrid_ref_split: Option<RefArg>,
}

#[derive(ValueEnum, Clone, Copy)]
enum RefArg {
    Train,
    Heldout,
}

#[derive(Args, Clone)]
struct Reference {
    /// Training features (OODT or CSV).
    #[arg(long)]
    train_features: Option<PathBuf>,
    /// Training labels.
    #[arg(long)]
    train_labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Score one split with a single method.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[command(flatten)]
        opts: MethodOpts,
        #[command(flatten)]
        reference: Reference,
        /// Training logits (ViM, Hybrid-Add).
        #[arg(long)]
        train_logits: Option<PathBuf>,
        /// Features to score.
        #[arg(long)]
        features: PathBuf,
        /// Logits of the rows to score.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Run an experiment config and write report.json, report.csv and manifest.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Replaces the config's method list (repeatable).
        #[arg(long)]
        method: Vec<String>,
        #[command(flatten)]
        opts: MethodOpts,
    },
    /// Error decomposition into indistinguishable, other and irrelevant parts.
    /// Without feature files, runs the planted instance (--config: planted
    /// instance spec); with files, --config is the decomposition config.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reference: Reference,
        #[arg(long)]
        id_eval: Option<PathBuf>,
        /// OOD features as NAME=PATH (repeatable).
        #[arg(long)]
        ood: Vec<String>,
        #[arg(long)]
        shrinkage: Option<f64>,
        /// Planted preset used when no files are given.
        #[arg(long, value_enum, default_value = "irrelevant")]
        preset: Preset,
    },
    /// Feature transfer matrix across OOD sets. Without files, runs the
    /// constructed orthogonal-signal instance.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reference: Reference,
        #[arg(long)]
        id_eval: Option<PathBuf>,
        /// OOD features as NAME=PATH (repeatable, at least two).
        #[arg(long)]
        ood: Vec<String>,
        /// Basis dimension.
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        shrinkage: Option<f64>,
    },
    /// Train a shallow classifier and save its parameters as OODT tensors.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reference: Reference,
        /// Outlier features for the CE+OE loss.
        #[arg(long)]
        outliers: Option<PathBuf>,
        /// Features to run through the trained net; logits go to eval_logits.oodt.
        #[arg(long)]
        eval_features: Option<PathBuf>,
    },
    /// Matched ERM vs outlier-exposure runs.
    OeTradeoff {
        #[command(flatten)]
        common: Common,
    },
    /// Extra-class detector against near and in-cluster OOD.
    Kplus1 {
        #[command(flatten)]
        common: Common,
    },
    /// Last-layer Laplace posterior contraction and MSP grid.
    LaplaceDemo {
        #[command(flatten)]
        common: Common,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        grid_size: usize,
        /// Half-width of the grid in standard units.
        #[arg(long, default_value_t = 4.0)]
        extent: f64,
    },
    /// One-dimensional Gaussian likelihood sweep over the model mean.
    Toy1d {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model means.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
    },
    /// Covariance interpolation toward the identity.
    GmmInterp {
        #[command(flatten)]
        common: Common,
    },
    /// Norm- and mean-mode typicality of standard-normal draws plus the origin.
    Typicality {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        dim: usize,
    },
    /// Write synthetic train/heldout/ood bundles from a spec (--config).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Also write logits from a linear head fitted on train.
        #[arg(long)]
        logits: bool,
    },
}

#[derive(ValueEnum, Clone, Copy)]
enum Preset {
    Irrelevant,
    Indistinguishable,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(outputs) => {
            println!("{}", json!({ "outputs": outputs }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) | Error::Json(_) | Error::BadTrainConfig(_) => 2,
        e if e.is_data_error() => 3,
        _ => 4,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("OODLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::ConfigInvalid(format!("OODLENS_THREADS={v} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::IoFailure {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
}

struct Out {
    dir: PathBuf,
    written: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
            path: dir.into(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.into(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.display().to_string());
        p
    }

    fn text(&mut self, name: &str, s: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, s.as_bytes())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn tensor(&mut self, name: &str, t: &TensorF32) -> Result<()> {
        let p = self.path(name);
        save_tensor(t, p)
    }
}

fn matrix(path: &Path) -> Result<DMatrix<f64>> {
    Ok(load_any(path)?.to_matrix())
}

fn opt_matrix(path: Option<&PathBuf>) -> Result<Option<DMatrix<f64>>> {
    path.map(|p| matrix(p)).transpose()
}

fn labels(path: &Path) -> Result<Vec<usize>> {
    load_any(path)?.to_labels()
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::ConfigInvalid(format!("--{flag} is required here")))
}

fn named_sets(specs: &[String]) -> Result<Vec<(String, DMatrix<f64>)>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("--ood `{s}` is not NAME=PATH")))?;
            Ok((name.to_string(), matrix(Path::new(path))?))
        })
        .collect()
}

fn method_spec(name: &str, opts: &MethodOpts) -> Result<MethodSpec> {
    Ok(match MethodSpec::from_name(name)? {
        MethodSpec::Energy { .. } => MethodSpec::Energy {
            temperature: opts.temperature.unwrap_or(DEFAULT_TEMPERATURE),
        },
        MethodSpec::Maha { .. } => MethodSpec::Maha {
            shrinkage: opts.shrinkage.unwrap_or(DEFAULT_SHRINKAGE),
        },
        MethodSpec::RelMaha { .. } => MethodSpec::RelMaha {
            shrinkage: opts.shrinkage.unwrap_or(DEFAULT_SHRINKAGE),
        },
        MethodSpec::Vim { .. } => MethodSpec::Vim { dim: opts.vim_dim },
        MethodSpec::HybridAdd { .. } => MethodSpec::HybridAdd {
            shrinkage: opts.shrinkage.unwrap_or(DEFAULT_SHRINKAGE),
            ref_split: match opts.hybrid_ref_split {
                Some(RefArg::Heldout) => RefSplit::Heldout,
                _ => RefSplit::Train,
            },
        },
        other => other,
    })
}

fn csv_matrix(m: &DMatrix<f64>, names: &[String]) -> String {
    let mut s = format!("basis,{}\n", names.join(","));
    for (i, name) in names.iter().enumerate() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        s.push_str(&format!("{name},{}\n", row.join(",")));
    }
    s
}

fn run(command: Command) -> Result<Vec<String>> {
    match command {
        Command::Score {
            common,
            method,
            opts,
            reference,
            train_logits,
            features,
            logits,
        } => {
            let spec = method_spec(&method, &opts)?;
            let x = matrix(&features)?;
            let l = opt_matrix(logits.as_ref())?;
            let train_x = match &reference.train_features {
                Some(p) => matrix(p)?,
                None => x.clone(),
            };
            let train_y = reference.train_labels.as_deref().map(labels).transpose()?;
            let train_l = opt_matrix(train_logits.as_ref())?;
            let scores = experiment::score_rows(
                &spec,
                &train_x,
                train_y.as_deref(),
                train_l.as_ref(),
                &x,
                l.as_ref(),
            )?;
            let mut out = Out::new(&common.out_dir)?;
            let mut csv = String::from("score\n");
            for s in &scores {
                csv.push_str(&format!("{s:?}\n"));
            }
            out.text("scores.csv", &csv)?;
            out.tensor("scores.oodt", &TensorF32::from_slice_f64(&scores)?)?;
            Ok(out.written)
        }
        Command::Eval {
            common,
            method,
            opts,
        } => {
            let path = required(&common.config, "config")?;
            let mut cfg = ExperimentConfig::from_path(path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if !method.is_empty() {
                cfg.methods = method
                    .iter()
                    .map(|m| method_spec(m, &opts))
                    .collect::<Result<_>>()?;
            }
            let out_dir = if common.out_dir != Path::new(".") {
                common.out_dir.clone()
            } else {
                cfg.out_dir.clone().unwrap_or_else(|| ".".into())
            };
            let manifest = experiment::run_experiment(&cfg)?;
            experiment::emit(&manifest, &out_dir)?;
            Ok(["report.json", "report.csv", "manifest.json"]
                .iter()
                .map(|f| out_dir.join(f).display().to_string())
                .collect())
        }
        Command::Decompose {
            common,
            reference,
            id_eval,
            ood,
            shrinkage,
            preset,
        } => {
            let mut out = Out::new(&common.out_dir)?;
            if reference.train_features.is_none() {
                let mut cfg: PlantedDecompositionConfig = match &common.config {
                    Some(p) => read_json(p)?,
                    None => match preset {
                        Preset::Irrelevant => PlantedDecompositionConfig::irrelevant_features(),
                        Preset::Indistinguishable => {
                            PlantedDecompositionConfig::indistinguishable()
                        }
                    },
                };
                if let Some(s) = common.seed {
                    cfg.seed = s;
                }
                if let Some(s) = shrinkage {
                    cfg.decomposition.shrinkage = s;
                }
                let rep = planted_decomposition(&cfg)?;
                out.json("decompose.json", &json!({ "config": cfg, "report": decomposition_json(&rep.decomposition), "msp_auroc": rep.msp_auroc, "n_id": rep.n_id, "n_ood": rep.n_ood }))?;
                return Ok(out.written);
            }
            let mut cfg: DecompositionConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.probe.seed = s;
            }
            if let Some(s) = shrinkage {
                cfg.shrinkage = s;
            }
            let train_x = matrix(required(&reference.train_features, "train-features")?)?;
            let train_y = labels(required(&reference.train_labels, "train-labels")?)?;
            let id_x = matrix(required(&id_eval, "id-eval")?)?;
            let sets = named_sets(&ood)?;
            if sets.is_empty() {
                return Err(Error::ConfigInvalid(
                    "at least one --ood NAME=PATH is required".into(),
                ));
            }
            let mut reports = Vec::new();
            for (name, x) in &sets {
                let d = error_decomposition(&train_x, &train_y, &id_x, x, &cfg)?;
                reports.push((name.clone(), d));
            }
            if let [(_, d)] = reports.as_slice() {
                out.json("decompose.json", &decomposition_json(d))?;
            } else {
                let all: serde_json::Map<_, _> = reports
                    .iter()
                    .map(|(n, d)| (n.clone(), decomposition_json(d)))
                    .collect();
                out.json("decompose.json", &all)?;
                let k = reports.iter().map(|(_, d)| d.chosen_k).min().unwrap_or(1);
                let mats: Vec<DMatrix<f64>> = sets.iter().map(|(_, x)| x.clone()).collect();
                let m =
                    feature_transfer_matrix(&train_x, &train_y, &id_x, &mats, k, cfg.shrinkage)?;
                let names: Vec<String> = sets.iter().map(|(n, _)| n.clone()).collect();
                out.text("transfer.csv", &csv_matrix(&m, &names))?;
            }
            Ok(out.written)
        }
        Command::Transfer {
            common,
            reference,
            id_eval,
            ood,
            k,
            shrinkage,
        } => {
            let mut out = Out::new(&common.out_dir)?;
            if reference.train_features.is_none() {
                let mut cfg: TransferConfig = read_config(common.config.as_deref())?;
                if let Some(s) = common.seed {
                    cfg.seed = s;
                }
                let rep = transfer_instance(&cfg)?;
                let n = rep.matrix.len();
                let m = DMatrix::from_fn(n, n, |i, j| rep.matrix[i][j]);
                let names: Vec<String> = (0..n).map(|i| format!("ood{i}")).collect();
                out.text("transfer.csv", &csv_matrix(&m, &names))?;
                out.json(
                    "transfer.json",
                    &json!({ "config": cfg, "matrix": rep.matrix }),
                )?;
                return Ok(out.written);
            }
            let train_x = matrix(required(&reference.train_features, "train-features")?)?;
            let train_y = labels(required(&reference.train_labels, "train-labels")?)?;
            let id_x = matrix(required(&id_eval, "id-eval")?)?;
            let sets = named_sets(&ood)?;
            let mats: Vec<DMatrix<f64>> = sets.iter().map(|(_, x)| x.clone()).collect();
            let m = feature_transfer_matrix(
                &train_x,
                &train_y,
                &id_x,
                &mats,
                k,
                shrinkage.unwrap_or(DEFAULT_SHRINKAGE),
            )?;
            let names: Vec<String> = sets.into_iter().map(|(n, _)| n).collect();
            out.text("transfer.csv", &csv_matrix(&m, &names))?;
            Ok(out.written)
        }
        Command::Train {
            common,
            reference,
            outliers,
            eval_features,
        } => {
            let mut cfg: TrainConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let x = matrix(required(&reference.train_features, "train-features")?)?;
            let y = labels(required(&reference.train_labels, "train-labels")?)?;
            let o = opt_matrix(outliers.as_ref())?;
            let n_labels = y.iter().max().map_or(0, |m| m + 1);
            let n_id = if cfg.extra_class {
                n_labels.saturating_sub(1)
            } else {
                n_labels
            };
            let net0 =
                ShallowNet::new(cfg.architecture, x.ncols(), n_id, cfg.extra_class, cfg.seed)?;
            let outcome = train(&net0, &x, &y, o.as_ref(), &cfg)?;
            let mut out = Out::new(&common.out_dir)?;
            for (name, t) in outcome.net.to_tensors()? {
                out.tensor(&format!("{name}.oodt"), &t)?;
            }
            let mut csv = String::from("epoch,total,ce,oe\n");
            for (e, l) in outcome.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{e},{:?},{:?},{:?}\n", l.total, l.ce, l.oe));
            }
            out.text("loss_trace.csv", &csv)?;
            if let Some(p) = &eval_features {
                let logits = outcome.net.logits(&matrix(p)?)?;
                out.tensor("eval_logits.oodt", &TensorF32::from_matrix(&logits)?)?;
            }
            out.json(
                "train.json",
                &json!({
                    "config": cfg,
                    "n_params": outcome.net.n_params(),
                    "final_loss": outcome.loss_trace.last(),
                    "train_accuracy": accuracy(&outcome.net, &x, &y)?,
                }),
            )?;
            Ok(out.written)
        }
        Command::OeTradeoff { common } => {
            let mut cfg: OeTradeoffConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let rep = oe_tradeoff_experiment(&cfg)?;
            let mut out = Out::new(&common.out_dir)?;
            let mut csv =
                String::from("run,detection_auroc,id_accuracy,shift_accuracy,final_loss\n");
            for (name, r) in [("erm", &rep.erm), ("oe", &rep.oe)] {
                csv.push_str(&format!(
                    "{name},{:?},{:?},{:?},{:?}\n",
                    r.detection_auroc, r.id_accuracy, r.shift_accuracy, r.final_loss.total
                ));
            }
            out.text("oe_tradeoff.csv", &csv)?;
            out.json("oe_tradeoff.json", &rep)?;
            Ok(out.written)
        }
        Command::Kplus1 { common } => {
            let mut cfg: KPlus1Config = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let rep = kplus1_locality(&cfg)?;
            let mut out = Out::new(&common.out_dir)?;
            out.json("kplus1.json", &json!({ "config": cfg, "report": rep }))?;
            Ok(out.written)
        }
        Command::LaplaceDemo {
            common,
            grid_size,
            extent,
        } => {
            let mut cfg: ContractionConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let table = contraction_experiment(&cfg)?;
            let n = *cfg.n_grid.last().unwrap_or(&0);
            let mut r = rng::stream(cfg.seed, 60);
            let (x, y) = interleaved_blobs(&mut r, &cfg.class_means, cfg.class_std, n);
            let map = fit_map(&x, &y, cfg.class_means.len(), cfg.prior_precision)?;
            let post = laplace_fit(&map, &x, cfg.prior_precision)?;
            let grid = msp_grid(&post, &x, grid_size, extent, cfg.draws, cfg.seed)?;
            let mut out = Out::new(&common.out_dir)?;
            out.text("contraction.csv", &table.to_csv())?;
            out.text("msp_grid.csv", &msp_grid_csv(&grid))?;
            out.json("laplace_demo.json", &table)?;
            Ok(out.written)
        }
        Command::Toy1d { common, mu } => {
            let mut cfg: Toy1dConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let grid = if mu.is_empty() { default_mu_grid() } else { mu };
            let rows = toy1d_sweep(&cfg, &grid)?;
            let mut out = Out::new(&common.out_dir)?;
            out.text("toy1d.csv", &toy1d_csv(&rows))?;
            Ok(out.written)
        }
        Command::GmmInterp { common } => {
            let mut cfg: GmmInterpConfig = read_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let rows = gmm_interp_experiment(&cfg)?;
            let mut out = Out::new(&common.out_dir)?;
            out.text("gmm_interp.csv", &gmm_interp_csv(&rows))?;
            Ok(out.written)
        }
        Command::Typicality { common, n, dim } => {
            if dim == 0 {
                return Err(Error::ConfigInvalid("--dim must be positive".into()));
            }
            let x = standard_normal_with_origin(n, dim, common.seed.unwrap_or(0));
            let norm = typicality_scores(&x, TypicalityMode::Norm)?;
            let mean = typicality_scores(&x, TypicalityMode::Mean)?;
            let mut csv = String::from("index,norm_score,mean_score,is_origin\n");
            for i in 0..x.nrows() {
                csv.push_str(&format!("{i},{:?},{:?},{}\n", norm[i], mean[i], i == n));
            }
            let mut out = Out::new(&common.out_dir)?;
            out.text("typicality.csv", &csv)?;
            Ok(out.written)
        }
        Command::Synth { common, logits } => {
            let mut spec: SynthSpec = read_json(required(&common.config, "config")?)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let mut splits = synth_dataset(&spec)?;
            if logits {
                let xt = splits.train.features_f64();
                let yt = splits.train.require_labels()?.to_vec();
                let (xh, xo) = (splits.heldout.features_f64(), splits.ood.features_f64());
                let l = fitted_head_logits(&xt, &yt, spec.n_classes(), &[&xt, &xh, &xo])?;
                splits.train = splits.train.with_logits(&l[0])?;
                splits.heldout = splits.heldout.with_logits(&l[1])?;
                splits.ood = splits.ood.with_logits(&l[2])?;
            }
            let mut out = Out::new(&common.out_dir)?;
            for (prefix, b) in [
                ("train", &splits.train),
                ("heldout", &splits.heldout),
                ("ood", &splits.ood),
            ] {
                b.save(&out.dir, prefix)?;
                for part in ["features", "logits", "labels"] {
                    let f = format!("{prefix}_{part}.oodt");
                    if out.dir.join(&f).exists() {
                        out.path(&f);
                    }
                }
            }
            Ok(out.written)
        }
    }
}

fn decomposition_json(d: &oodlens::oracle::ErrorDecomposition) -> serde_json::Value {
    json!({
        "auroc_maha": d.auroc_maha,
        "auroc_maha_pca": d.auroc_maha_pca,
        "auroc_oracle": d.auroc_oracle,
        "components": {
            "total_error": d.total_error,
            "indistinguishable": d.indistinguishable,
            "other": d.other,
            "irrelevant": d.irrelevant,
        },
        "chosen_k": d.chosen_k,
        "warnings": d.warnings,
    })
}
