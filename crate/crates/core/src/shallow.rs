//! Small deterministic classifiers for the outlier-exposure and K+1-class
//! experiments.
//!
//! Networks are either a single linear layer or one `tanh` hidden layer.
//! Training is plain gradient descent with a fixed step; batches are drawn
//! from seeded streams so a (seed, config) pair fixes the whole trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, require_finite, row_vec, softmax};
use crate::logit_scores::msp;
use crate::metrics::auroc;
use crate::rng;
use crate::synth::{gaussian_blobs, gaussian_rows, select_rows};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Hidden { width: usize },
}

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

/// Dense layer `z = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, inp),
            bias: DVector::zeros(out),
        }
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `X W^T + 1 b^T` for row-major samples.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weight.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowNet {
    pub architecture: Architecture,
    pub input_dim: usize,
    /// Output width: K, or K + 1 with the extra OOD class.
    pub n_classes: usize,
    pub extra_class: bool,
    pub layers: Vec<Layer>,
}

impl ShallowNet {
    /// Weights drawn `N(0, 1 / fan_in)`, biases zero.
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        n_id_classes: usize,
        extra_class: bool,
        seed: u64,
    ) -> Result<Self> {
        if n_id_classes < 2 {
            return Err(Error::SingleClass(n_id_classes));
        }
        if input_dim == 0 {
            return Err(Error::ShapeMismatch("input dimension is zero".into()));
        }
        let n_classes = n_id_classes + usize::from(extra_class);
        let mut r = rng::stream(seed, 30);
        let mut init = |out: usize, inp: usize| {
            let scale = 1.0 / (inp as f64).sqrt();
            let mut l = Layer::zeros(out, inp);
            for v in l.weight.iter_mut() {
                *v = scale * rng::normal(&mut r);
            }
            l
        };
        let layers = match architecture {
            Architecture::Linear => vec![init(n_classes, input_dim)],
            Architecture::Hidden { width } => {
                if width == 0 {
                    return Err(Error::ShapeMismatch("hidden width is zero".into()));
                }
                vec![init(width, input_dim), init(n_classes, width)]
            }
        };
        Ok(Self {
            architecture,
            input_dim,
            n_classes,
            extra_class,
            layers,
        })
    }

    /// Number of in-distribution classes K.
    pub fn n_id_classes(&self) -> usize {
        self.n_classes - usize::from(self.extra_class)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for i in 0..l.weight.nrows() {
                out.extend(l.weight.row(i).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a network with {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    l.weight[(i, j)] = it.next().unwrap();
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Returns the logits and, for the hidden architecture, the activations.
    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match self.layers.as_slice() {
            [out] => (out.apply(x), None),
            [hidden, out] => {
                let h = hidden.apply(x).map(f64::tanh);
                (out.apply(&h), Some(h))
            }
            _ => unreachable!("networks have one or two layers"),
        }
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                    )
                    .0
            })
            .collect())
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// One OODT tensor per weight and bias, in layer order.
    pub fn to_tensors(&self) -> Result<Vec<(String, TensorF32)>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}_weight"),
                TensorF32::from_matrix(&l.weight)?,
            ));
            out.push((
                format!("layer{i}_bias"),
                TensorF32::from_slice_f64(l.bias.as_slice())?,
            ));
        }
        Ok(out)
    }
}

pub fn accuracy(net: &ShallowNet, x: &DMatrix<f64>, y: &[usize]) -> Result<f64> {
    let pred = net.predict(x)?;
    if y.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CePlusOe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub loss: LossKind,
    /// Weight of the outlier-exposure term.
    pub alpha: f64,
    /// Train with an extra (K+1)-th class for OOD inputs.
    pub extra_class: bool,
    pub epochs: usize,
    /// Zero means full batch.
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Hidden {
                width: DEFAULT_HIDDEN_WIDTH,
            },
            loss: LossKind::Ce,
            alpha: 0.5,
            extra_class: false,
            epochs: 200,
            batch_size: 0,
            step_size: 0.5,
            seed: 0,
        }
    }
}

/// One gradient-descent batch: labeled ID rows and, for OE, outlier rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [usize],
    pub outliers: Option<&'a DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Mean cross-entropy to the uniform distribution over the K ID classes;
    /// zero when no outliers are present.
    pub oe: f64,
}

/// Network-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for i in 0..l.weight.nrows() {
                out.extend(l.weight.row(i).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }
}

fn backprop(
    net: &ShallowNet,
    x: &DMatrix<f64>,
    h: Option<&DMatrix<f64>>,
    dz: &DMatrix<f64>,
    grad: &mut [Layer],
) {
    match (net.layers.as_slice(), h) {
        ([_], None) => {
            grad[0].weight += dz.transpose() * x;
            grad[0].bias += dz.row_sum().transpose();
        }
        ([_, out], Some(h)) => {
            grad[1].weight += dz.transpose() * h;
            grad[1].bias += dz.row_sum().transpose();
            let mut dh = dz * &out.weight;
            dh.zip_apply(h, |g, a| *g *= 1.0 - a * a);
            grad[0].weight += dh.transpose() * x;
            grad[0].bias += dh.row_sum().transpose();
        }
        _ => unreachable!("activation cache matches the architecture"),
    }
}

/// `L = mean CE(f(x), y) + alpha * mean CE(f(x'), uniform_K)` and its
/// analytic gradient.
pub fn loss_and_grad(
    net: &ShallowNet,
    batch: &Batch<'_>,
    alpha: f64,
) -> Result<(LossParts, Gradient)> {
    net.check_input(batch.x)?;
    if batch.x.nrows() != batch.y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows with {} labels",
            batch.x.nrows(),
            batch.y.len()
        )));
    }
    if let Some(&bad) = batch.y.iter().find(|&&c| c >= net.n_classes) {
        return Err(Error::ShapeMismatch(format!(
            "label {bad} outside 0..{}",
            net.n_classes
        )));
    }
    if batch.x.nrows() == 0 {
        return Err(Error::EmptyInput("training batch"));
    }
    let mut grad = net.zeros_like();

    let n = batch.x.nrows() as f64;
    let (z, h) = net.forward_cached(batch.x);
    let mut dz = DMatrix::zeros(z.nrows(), z.ncols());
    let mut ce = 0.0;
    for i in 0..z.nrows() {
        let row = row_vec(&z, i);
        let lp = log_softmax(&row);
        ce -= lp[batch.y[i]];
        for (j, l) in lp.iter().enumerate() {
            dz[(i, j)] = l.exp() / n;
        }
        dz[(i, batch.y[i])] -= 1.0 / n;
    }
    ce /= n;
    backprop(net, batch.x, h.as_ref(), &dz, &mut grad);

    let mut oe = 0.0;
    if let Some(out) = batch.outliers {
        net.check_input(out)?;
        if out.nrows() > 0 {
            let k = net.n_id_classes();
            let m = out.nrows() as f64;
            let (zo, ho) = net.forward_cached(out);
            let mut dzo = DMatrix::zeros(zo.nrows(), zo.ncols());
            for i in 0..zo.nrows() {
                let lp = log_softmax(&row_vec(&zo, i));
                oe -= lp[..k].iter().sum::<f64>() / k as f64;
                for (j, l) in lp.iter().enumerate() {
                    let target = if j < k { 1.0 / k as f64 } else { 0.0 };
                    dzo[(i, j)] = alpha * (l.exp() - target) / m;
                }
            }
            oe /= m;
            backprop(net, out, ho.as_ref(), &dzo, &mut grad);
        }
    }
    let total = ce + alpha * oe;
    if !total.is_finite() {
        return Err(Error::DivergenceDetected { epoch: 0 });
    }
    Ok((LossParts { total, ce, oe }, Gradient { layers: grad }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: ShallowNet,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<LossParts>,
}

fn validate_train(
    net: &ShallowNet,
    y: &[usize],
    outliers: Option<&DMatrix<f64>>,
    cfg: &TrainConfig,
) -> Result<()> {
    let bad = |m: String| Err(Error::BadTrainConfig(m));
    if cfg.epochs == 0 {
        return bad("epochs must be positive".into());
    }
    if !(cfg.step_size.is_finite() && cfg.step_size > 0.0) {
        return bad(format!("step size {} must be positive", cfg.step_size));
    }
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return bad(format!("alpha {} must be non-negative", cfg.alpha));
    }
    if cfg.loss == LossKind::CePlusOe && outliers.is_none() {
        return bad("ce_plus_oe needs an outlier set".into());
    }
    if cfg.extra_class != net.extra_class {
        return bad("extra_class disagrees with the network head".into());
    }
    if cfg.extra_class && !y.contains(&(net.n_classes - 1)) {
        return bad(format!(
            "extra_class training needs OOD rows labeled {}",
            net.n_classes - 1
        ));
    }
    Ok(())
}

/// Gradient descent from `net0`. ID rows are reshuffled each epoch from one
/// stream; outlier batches cycle through an independent stream, so the
/// outlier term never perturbs the ID batch order.
pub fn train(
    net0: &ShallowNet,
    x: &DMatrix<f64>,
    y: &[usize],
    outliers: Option<&DMatrix<f64>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    validate_train(net0, y, outliers, cfg)?;
    require_finite(x)?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("training rows"));
    }
    let outliers = match cfg.loss {
        LossKind::Ce => None,
        LossKind::CePlusOe => outliers,
    };
    let bs = if cfg.batch_size == 0 || cfg.batch_size >= n {
        n
    } else {
        cfg.batch_size
    };
    let mut id_rng = rng::stream(cfg.seed, 20);
    let mut out_rng = rng::stream(cfg.seed, 21);
    let mut out_order: Vec<usize> = Vec::new();
    let mut out_pos = 0usize;

    let mut net = net0.clone();
    let mut params = net.params();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = if bs == n {
            (0..n).collect()
        } else {
            rng::permutation(&mut id_rng, n)
        };
        let mut acc = LossParts {
            total: 0.0,
            ce: 0.0,
            oe: 0.0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let bx = select_rows(x, chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let bo = outliers.map(|o| {
                let m = o.nrows();
                let take = if bs == n { m } else { bs.min(m) };
                let mut idx = Vec::with_capacity(take);
                while idx.len() < take {
                    if out_pos == out_order.len() {
                        out_order = if take == m {
                            (0..m).collect()
                        } else {
                            rng::permutation(&mut out_rng, m)
                        };
                        out_pos = 0;
                    }
                    idx.push(out_order[out_pos]);
                    out_pos += 1;
                }
                select_rows(o, &idx)
            });
            let batch = Batch {
                x: &bx,
                y: &by,
                outliers: bo.as_ref(),
            };
            let (parts, grad) = match loss_and_grad(&net, &batch, cfg.alpha) {
                Ok(v) => v,
                Err(Error::DivergenceDetected { .. }) => {
                    return Err(Error::DivergenceDetected { epoch })
                }
                Err(e) => return Err(e),
            };
            for (p, g) in params.iter_mut().zip(grad.flat()) {
                *p -= cfg.step_size * g;
            }
            net.set_params(&params)?;
            if !net.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            acc.total += parts.total;
            acc.ce += parts.ce;
            acc.oe += parts.oe;
            batches += 1;
        }
        let b = batches as f64;
        trace.push(LossParts {
            total: acc.total / b,
            ce: acc.ce / b,
            oe: acc.oe / b,
        });
    }
    Ok(TrainOutcome {
        net,
        loss_trace: trace,
    })
}

/// `-p(y = K+1 | x)`; larger means more in-distribution.
pub fn kplus1_detect(net: &ShallowNet, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !net.extra_class {
        return Err(Error::NotKPlus1Model);
    }
    let z = net.logits(x)?;
    Ok((0..z.nrows())
        .map(|i| -softmax(&row_vec(&z, i))[net.n_classes - 1])
        .collect())
}

/// Synthetic setup for the ERM vs outlier-exposure comparison.
///
/// ID classes are isotropic blobs. The outlier law is a blob; exposure-like
/// test OOD is a fresh draw from it. The covariate shift adds Gaussian noise
/// and a constant drift to heldout ID rows, labels unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OeTradeoffConfig {
    pub class_means: Vec<Vec<f64>>,
    pub class_std: f64,
    pub n_per_class: usize,
    pub outlier_mean: Vec<f64>,
    pub outlier_std: f64,
    pub n_outliers: usize,
    pub shift_drift: Vec<f64>,
    pub shift_noise_std: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for OeTradeoffConfig {
    fn default() -> Self {
        Self {
            class_means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            class_std: 1.0,
            n_per_class: 200,
            outlier_mean: vec![2.0, 4.0],
            outlier_std: 1.0,
            n_outliers: 400,
            shift_drift: vec![0.0, 3.0],
            shift_noise_std: 0.5,
            train: TrainConfig {
                architecture: Architecture::Linear,
                loss: LossKind::CePlusOe,
                alpha: 0.5,
                extra_class: false,
                epochs: 300,
                batch_size: 0,
                step_size: 0.5,
                seed: 0,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// MSP AUROC, heldout ID vs exposure-like OOD.
    pub detection_auroc: f64,
    pub id_accuracy: f64,
    pub shift_accuracy: f64,
    pub final_loss: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OeTradeoffReport {
    pub config: OeTradeoffConfig,
    pub erm: RunSummary,
    pub oe: RunSummary,
}

/// Trains ERM and OE runs from the same initialization and data, then
/// compares detection and covariate-shift accuracy.
pub fn oe_tradeoff_experiment(cfg: &OeTradeoffConfig) -> Result<OeTradeoffReport> {
    let d = cfg.outlier_mean.len();
    if cfg.class_means.iter().any(|m| m.len() != d) || cfg.shift_drift.len() != d {
        return Err(Error::ConfigInvalid(
            "class means, outlier mean and drift must share a dimension".into(),
        ));
    }
    let mut r = rng::stream(cfg.seed, 40);
    let (x_tr, y_tr) = gaussian_blobs(&mut r, &cfg.class_means, cfg.class_std, cfg.n_per_class);
    let outliers = gaussian_rows(
        &mut r,
        cfg.n_outliers,
        &cfg.outlier_mean,
        &vec![cfg.outlier_std; d],
    );
    let (x_ho, y_ho) = gaussian_blobs(&mut r, &cfg.class_means, cfg.class_std, cfg.n_per_class);
    let ood_test = gaussian_rows(
        &mut r,
        cfg.n_outliers,
        &cfg.outlier_mean,
        &vec![cfg.outlier_std; d],
    );
    let noise = gaussian_rows(
        &mut r,
        x_ho.nrows(),
        &cfg.shift_drift,
        &vec![cfg.shift_noise_std; d],
    );
    let x_shift = &x_ho + noise;

    let k = cfg.class_means.len();
    let init_seed = cfg.seed ^ cfg.train.seed;
    let net0 = ShallowNet::new(cfg.train.architecture, d, k, false, init_seed)?;
    let run = |loss: LossKind| -> Result<RunSummary> {
        let tc = TrainConfig {
            loss,
            extra_class: false,
            seed: init_seed,
            ..cfg.train.clone()
        };
        let out = train(&net0, &x_tr, &y_tr, Some(&outliers), &tc)?;
        let s_id = msp(&out.net.logits(&x_ho)?)?;
        let s_ood = msp(&out.net.logits(&ood_test)?)?;
        Ok(RunSummary {
            detection_auroc: auroc(&s_id, &s_ood)?,
            id_accuracy: accuracy(&out.net, &x_ho, &y_ho)?,
            shift_accuracy: accuracy(&out.net, &x_shift, &y_ho)?,
            final_loss: *out.loss_trace.last().expect("epochs > 0"),
        })
    };
    let erm = run(LossKind::Ce)?;
    let oe = run(LossKind::CePlusOe)?;
    Ok(OeTradeoffReport {
        config: cfg.clone(),
        erm,
        oe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(
        seed: u64,
        d: usize,
        n: usize,
        k: usize,
    ) -> (DMatrix<f64>, Vec<usize>, DMatrix<f64>) {
        let mut r = rng::stream(seed, 0);
        let x = gaussian_rows(&mut r, n, &vec![0.0; d], &vec![1.0; d]);
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        let o = gaussian_rows(&mut r, n, &vec![1.0; d], &vec![2.0; d]);
        (x, y, o)
    }

    #[test]
    fn oe_term_at_uniform_output_is_ln_k() {
        let mut net = ShallowNet::new(Architecture::Linear, 3, 4, false, 0).unwrap();
        let zeros = vec![0.0; net.n_params()];
        net.set_params(&zeros).unwrap();
        let (x, y, o) = tiny_batch(1, 3, 8, 4);
        let (parts, _) = loss_and_grad(
            &net,
            &Batch {
                x: &x,
                y: &y,
                outliers: Some(&o),
            },
            0.5,
        )
        .unwrap();
        assert!((parts.oe - 4f64.ln()).abs() < 1e-14);
        assert!((parts.ce - 4f64.ln()).abs() < 1e-14);
        assert!((parts.total - (parts.ce + 0.5 * parts.oe)).abs() < 1e-15);
    }

    #[test]
    fn single_sample_ce_is_neg_log_p() {
        let mut net = ShallowNet::new(Architecture::Linear, 1, 2, false, 0).unwrap();
        net.set_params(&[0.0, 0.0, 2.0, 0.0]).unwrap(); // logits (2, 0)
        let x = DMatrix::from_element(1, 1, 1.0);
        let (parts, _) = loss_and_grad(
            &net,
            &Batch {
                x: &x,
                y: &[0],
                outliers: None,
            },
            0.0,
        )
        .unwrap();
        let p = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((parts.ce + p.ln()).abs() < 1e-14);
    }

    #[test]
    fn oe_lower_bound_holds() {
        for seed in 0..20 {
            let net = ShallowNet::new(Architecture::Hidden { width: 5 }, 3, 3, seed % 2 == 0, seed)
                .unwrap();
            let (x, y, o) = tiny_batch(seed, 3, 6, 3);
            let (parts, _) = loss_and_grad(
                &net,
                &Batch {
                    x: &x,
                    y: &y,
                    outliers: Some(&o),
                },
                1.0,
            )
            .unwrap();
            assert!(parts.oe >= 3f64.ln() - 1e-12);
        }
    }

    fn fd_check(net: &ShallowNet, batch: &Batch<'_>, alpha: f64) -> f64 {
        let (_, g) = loss_and_grad(net, batch, alpha).unwrap();
        let analytic = g.flat();
        let base = net.params();
        let h = 1e-4;
        let mut probe = net.clone();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params(&p).unwrap();
            let up = loss_and_grad(&probe, batch, alpha).unwrap().0.total;
            p[i] = base[i] - h;
            probe.set_params(&p).unwrap();
            let down = loss_and_grad(&probe, batch, alpha).unwrap().0.total;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        diff / scale
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            for arch in [Architecture::Linear, Architecture::Hidden { width: 4 }] {
                let net = ShallowNet::new(arch, 3, 3, false, seed).unwrap();
                let (x, y, o) = tiny_batch(seed + 100, 3, 7, 3);
                let b = Batch {
                    x: &x,
                    y: &y,
                    outliers: Some(&o),
                };
                let err = fd_check(&net, &b, 0.7);
                assert!(err < 1e-5, "seed {seed} {arch:?}: {err}");
            }
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let mut r = rng::stream(3, 0);
        let means = vec![vec![-3.0, 0.0], vec![3.0, 0.0]];
        let (x, y) = gaussian_blobs(&mut r, &means, 1.0, 200);
        let (xh, yh) = gaussian_blobs(&mut r, &means, 1.0, 200);
        let net = ShallowNet::new(Architecture::Linear, 2, 2, false, 1).unwrap();
        let cfg = TrainConfig {
            architecture: Architecture::Linear,
            epochs: 100,
            ..TrainConfig::default()
        };
        let out = train(&net, &x, &y, None, &cfg).unwrap();
        assert!(accuracy(&out.net, &xh, &yh).unwrap() >= 0.99);
        assert!(out.loss_trace.last().unwrap().total < out.loss_trace[0].total);
    }

    #[test]
    fn zero_alpha_matches_plain_ce_bitwise() {
        let mut r = rng::stream(4, 0);
        let (x, y) = gaussian_blobs(&mut r, &[vec![-1.0, 0.0], vec![1.0, 0.0]], 1.0, 50);
        let o = gaussian_rows(&mut r, 30, &[0.0, 3.0], &[1.0, 1.0]);
        let net = ShallowNet::new(Architecture::Hidden { width: 6 }, 2, 2, false, 2).unwrap();
        let base = TrainConfig {
            architecture: Architecture::Hidden { width: 6 },
            epochs: 20,
            batch_size: 16,
            step_size: 0.1,
            seed: 5,
            ..TrainConfig::default()
        };
        let plain = train(
            &net,
            &x,
            &y,
            None,
            &TrainConfig {
                loss: LossKind::Ce,
                ..base.clone()
            },
        )
        .unwrap();
        let oe0 = train(
            &net,
            &x,
            &y,
            Some(&o),
            &TrainConfig {
                loss: LossKind::CePlusOe,
                alpha: 0.0,
                ..base
            },
        )
        .unwrap();
        assert_eq!(plain.net.params(), oe0.net.params());
        for (a, b) in plain.loss_trace.iter().zip(&oe0.loss_trace) {
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn huge_step_diverges() {
        let mut r = rng::stream(5, 0);
        let (mut x, y) = gaussian_blobs(&mut r, &[vec![-1.0, 0.0], vec![1.0, 0.0]], 1.0, 20);
        x.scale_mut(1e300);
        let net = ShallowNet::new(Architecture::Linear, 2, 2, false, 0).unwrap();
        let cfg = TrainConfig {
            architecture: Architecture::Linear,
            step_size: 1e3,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&net, &x, &y, None, &cfg),
            Err(Error::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        let net = ShallowNet::new(Architecture::Linear, 2, 2, false, 0).unwrap();
        let x = DMatrix::zeros(4, 2);
        let y = vec![0, 1, 0, 1];
        let cfg = TrainConfig {
            loss: LossKind::CePlusOe,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&net, &x, &y, None, &cfg),
            Err(Error::BadTrainConfig(_))
        ));
        let kp = ShallowNet::new(Architecture::Linear, 2, 2, true, 0).unwrap();
        let cfg = TrainConfig {
            extra_class: true,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&kp, &x, &y, None, &cfg),
            Err(Error::BadTrainConfig(_))
        ));
        assert!(matches!(
            kplus1_detect(&net, &x),
            Err(Error::NotKPlus1Model)
        ));
    }

    #[test]
    fn saturated_extra_class_scores_near_minus_one() {
        let mut net = ShallowNet::new(Architecture::Linear, 2, 2, true, 0).unwrap();
        // Logit of the extra class grows with x[1]; ID logits are flat.
        net.set_params(&[0.0, 0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0])
            .unwrap();
        let s = kplus1_detect(&net, &DMatrix::from_row_slice(1, 2, &[0.0, 10.0])).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn oe_with_zero_alpha_gives_identical_runs() {
        let mut cfg = OeTradeoffConfig::default();
        cfg.train.alpha = 0.0;
        cfg.train.epochs = 30;
        let rep = oe_tradeoff_experiment(&cfg).unwrap();
        assert_eq!(rep.erm.detection_auroc, rep.oe.detection_auroc);
        assert_eq!(rep.erm.shift_accuracy, rep.oe.shift_accuracy);
    }
}
