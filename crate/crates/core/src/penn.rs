//! Probabilistic ensemble of small MLPs with Gaussian heads.
//!
//! Each member maps normalized features to a mean and a log-variance per
//! target and is trained on a bootstrap resample with the Gaussian negative
//! log-likelihood. Predictions split the mixture variance by the law of total
//! variance: the mean of member variances is the aleatoric part, the variance
//! of member means the epistemic part.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::validator::{Dataset, FeatureStats};

pub const MODEL_FORMAT: &str = "adaptcbf-penn";
pub const MODEL_VERSION: u32 = 1;
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;
pub const MIN_TRAINING_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `outputs x inputs`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// Dense network: tanh hidden layers, linear output of width `2 * targets`
/// laid out as `[means.., log_vars..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMember {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutput {
    pub means: Vec<f64>,
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_vars: Vec<f64>,
}

/// Parameter gradients, shaped like the layers.
pub type Gradients = Vec<Layer>;

impl MlpMember {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "layer biases",
                    expected: l.weights.nrows(),
                    got: l.biases.len(),
                });
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "layer inputs",
                    expected: layers[i - 1].weights.nrows(),
                    got: l.weights.ncols(),
                });
            }
        }
        let out = layers.last().unwrap().weights.nrows();
        if out == 0 || !out.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "output width must be a positive even number (mean and log-variance per target), got {out}"
            )));
        }
        let member = Self { layers };
        if !member.params_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(member)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::from_layers(
            sizes
                .windows(2)
                .map(|w| Layer {
                    weights: DMatrix::zeros(w[1], w[0]),
                    biases: DVector::zeros(w[1]),
                })
                .collect(),
        )
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| dist.sample(rng)),
                    biases: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn targets(&self) -> usize {
        self.layers.last().unwrap().weights.nrows() / 2
    }

    /// Single-sample forward pass on already-normalized features.
    pub fn forward(&self, features: &[f64]) -> Result<MemberOutput> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        let x = DMatrix::from_column_slice(features.len(), 1, features);
        let out = self.forward_batch(&x).output;
        let t = self.targets();
        Ok(MemberOutput {
            means: (0..t).map(|i| out[(i, 0)]).collect(),
            log_vars: (0..t).map(|i| clamp_log_var(out[(t + i, 0)])).collect(),
        })
    }

    /// Columns are samples. Keeps every activation for backprop; the output
    /// is the raw (unclamped) last layer.
    fn forward_batch(&self, inputs: &DMatrix<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.biases;
            }
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(a);
            a = z;
        }
        ForwardCache {
            activations,
            output: a,
        }
    }

    /// Mean over the batch of [`nll_loss`], and its exact gradient.
    pub fn loss_and_gradients(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, Gradients) {
        let cache = self.forward_batch(inputs);
        let t = self.targets();
        let batch = inputs.ncols() as f64;
        let out = &cache.output;
        let mut delta = DMatrix::zeros(out.nrows(), out.ncols());
        let mut loss = 0.0;
        for c in 0..out.ncols() {
            for i in 0..t {
                let mean = out[(i, c)];
                let raw = out[(t + i, c)];
                let lv = clamp_log_var(raw);
                let resid = targets[(i, c)] - mean;
                let precision = (-lv).exp();
                loss += 0.5 * (lv + resid * resid * precision);
                delta[(i, c)] = -resid * precision / batch;
                delta[(t + i, c)] = if raw > LOG_VAR_MIN && raw < LOG_VAR_MAX {
                    0.5 * (1.0 - resid * resid * precision) / batch
                } else {
                    0.0
                };
            }
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let a_prev = &cache.activations[i];
            let weights = &delta * a_prev.transpose();
            let biases = delta.column_sum();
            grads.push(Layer { weights, biases });
            if i > 0 {
                let mut back = layer.weights.transpose() * &delta;
                // a_prev = tanh(z_prev)
                back.zip_apply(a_prev, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        grads.reverse();
        (loss / batch, grads)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.weights.iter());
            v.extend(l.biases.iter());
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().expect("parameter vector too short");
            }
            for b in l.biases.iter_mut() {
                *b = it.next().expect("parameter vector too short");
            }
        }
    }
}

pub fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
    let mut v = Vec::new();
    for l in grads {
        v.extend(l.weights.iter());
        v.extend(l.biases.iter());
    }
    v
}

struct ForwardCache {
    /// Input of each layer.
    activations: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Gaussian negative log-likelihood summed over targets, constant dropped:
/// `sum_t 0.5 * (log_var + (target - mean)^2 exp(-log_var))`.
pub fn nll_loss(output: &MemberOutput, targets: &[f64]) -> f64 {
    output
        .means
        .iter()
        .zip(&output.log_vars)
        .zip(targets)
        .map(|((m, lv), y)| 0.5 * (lv + (y - m).powi(2) * (-lv).exp()))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub members: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            members: 5,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs at least 2 members, got {}",
                self.members
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs and batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidParameter(
                "learning rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden layers must be non-empty".into()));
        }
        Ok(())
    }
}

/// Full-training-set loss of each member before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_nll: Vec<f64>,
    pub final_nll: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub mean: f64,
    pub aleatoric_var: f64,
    pub epistemic_var: f64,
}

impl TargetPrediction {
    pub fn total_var(&self) -> f64 {
        self.aleatoric_var + self.epistemic_var
    }
}

/// Per-target moments of the ensemble mixture. Target 0 is the safety label,
/// target 1 the progress label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub targets: Vec<TargetPrediction>,
}

impl EnsemblePrediction {
    pub fn from_members(outputs: &[MemberOutput]) -> Self {
        let m = outputs.len() as f64;
        let t = outputs.first().map_or(0, |o| o.means.len());
        let targets = (0..t)
            .map(|i| {
                let mean = outputs.iter().map(|o| o.means[i]).sum::<f64>() / m;
                let aleatoric_var = outputs.iter().map(|o| o.log_vars[i].exp()).sum::<f64>() / m;
                let epistemic_var = outputs.iter().map(|o| (o.means[i] - mean).powi(2)).sum::<f64>() / m;
                TargetPrediction {
                    mean,
                    aleatoric_var,
                    epistemic_var,
                }
            })
            .collect();
        Self { targets }
    }

    pub fn safety(&self) -> &TargetPrediction {
        &self.targets[0]
    }

    pub fn progress(&self) -> &TargetPrediction {
        &self.targets[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<MlpMember>,
    normalization: FeatureStats,
    config: TrainConfig,
}

impl EnsembleModel {
    pub fn new(members: Vec<MlpMember>, normalization: FeatureStats, config: TrainConfig) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let sizes = members[0].sizes();
        if members.iter().any(|m| m.sizes() != sizes) {
            return Err(Error::InvalidParameter("ensemble members must share layer sizes".into()));
        }
        if normalization.dim() != sizes[0] {
            return Err(Error::DimensionMismatch {
                what: "normalization statistics",
                expected: sizes[0],
                got: normalization.dim(),
            });
        }
        Ok(Self {
            members,
            normalization,
            config,
        })
    }

    pub fn members(&self) -> &[MlpMember] {
        &self.members
    }

    pub fn normalization(&self) -> &FeatureStats {
        &self.normalization
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Normalizes raw features with the stored statistics, then combines the
    /// member outputs.
    pub fn predict(&self, raw_features: &[f64]) -> Result<EnsemblePrediction> {
        if raw_features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.feature_dim(),
                got: raw_features.len(),
            });
        }
        let z = self.normalization.normalize(raw_features);
        let outputs = self
            .members
            .iter()
            .map(|m| m.forward(&z))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsemblePrediction::from_members(&outputs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            layer_sizes: self.members[0].sizes(),
            normalization: self.normalization.clone(),
            training: self.config.clone(),
            members: self
                .members
                .iter()
                .map(|m| MemberFile {
                    layers: m
                        .layers
                        .iter()
                        .map(|l| LayerFile {
                            weights: l.weights.transpose().as_slice().to_vec(),
                            biases: l.biases.as_slice().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::parse(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: FileHeader = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if header.format != MODEL_FORMAT {
            return Err(Error::parse(
                path,
                format!("not a model file (format {:?}, expected {MODEL_FORMAT:?})", header.format),
            ));
        }
        if header.version != MODEL_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let sizes = &file.layer_sizes;
        let mut members = Vec::with_capacity(file.members.len());
        for m in file.members {
            if m.layers.len() + 1 != sizes.len() {
                return Err(Error::parse(path, "member depth does not match layer_sizes"));
            }
            let layers = m
                .layers
                .into_iter()
                .zip(sizes.windows(2))
                .map(|(l, w)| {
                    if l.weights.len() != w[0] * w[1] || l.biases.len() != w[1] {
                        return Err(Error::parse(path, "layer array length does not match layer_sizes"));
                    }
                    Ok(Layer {
                        weights: DMatrix::from_row_slice(w[1], w[0], &l.weights),
                        biases: DVector::from_vec(l.biases),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            members.push(MlpMember::from_layers(layers)?);
        }
        Self::new(members, file.normalization, file.training)
    }
}

#[derive(Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    normalization: FeatureStats,
    training: TrainConfig,
    members: Vec<MemberFile>,
}

#[derive(Serialize, Deserialize)]
struct MemberFile {
    layers: Vec<LayerFile>,
}

/// Weights are stored row-major (`outputs x inputs`).
#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

/// Train on a validator dataset with its stored normalization statistics.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<EnsembleModel> {
    let features: Vec<Vec<f64>> = dataset.rows.iter().map(|r| r.features.clone()).collect();
    let targets: Vec<Vec<f64>> = dataset.rows.iter().map(|r| r.targets().to_vec()).collect();
    Ok(train_with_report(&features, &targets, dataset.meta.normalization.clone(), config)?.0)
}

/// Train on raw feature rows. Each member gets its own bootstrap resample and
/// initialization drawn from stream `member` of the configured seed.
pub fn train_with_report(
    features: &[Vec<f64>],
    targets: &[Vec<f64>],
    normalization: FeatureStats,
    config: &TrainConfig,
) -> Result<(EnsembleModel, TrainingReport)> {
    config.check()?;
    let n = features.len();
    if n < MIN_TRAINING_ROWS {
        return Err(Error::DatasetTooSmall {
            rows: n,
            min: MIN_TRAINING_ROWS,
        });
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            what: "target rows",
            expected: n,
            got: targets.len(),
        });
    }
    let dim = normalization.dim();
    let n_targets = targets[0].len();
    if features.iter().any(|f| f.len() != dim) || targets.iter().any(|t| t.len() != n_targets) {
        return Err(Error::InvalidInput("ragged training rows".into()));
    }
    if targets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training targets"));
    }
    let x = DMatrix::from_fn(dim, n, |i, c| (features[c][i] - normalization.mean[i]) / normalization.std[i]);
    let y = DMatrix::from_fn(n_targets, n, |i, c| targets[c][i]);
    let mut sizes = vec![dim];
    sizes.extend(&config.hidden);
    sizes.push(2 * n_targets);

    let trained = (0..config.members)
        .into_par_iter()
        .map(|member| train_member(member, &sizes, &x, &y, config))
        .collect::<Result<Vec<_>>>()?;
    let (members, (initial_nll, final_nll)): (Vec<_>, (Vec<_>, Vec<_>)) =
        trained.into_iter().map(|(m, a, b)| (m, (a, b))).unzip();
    let model = EnsembleModel::new(members, normalization, config.clone())?;
    Ok((model, TrainingReport { initial_nll, final_nll }))
}

fn train_member(
    member: usize,
    sizes: &[usize],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &TrainConfig,
) -> Result<(MlpMember, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(member as u64);
    let mut net = MlpMember::random(sizes, &mut rng)?;
    let n = x.ncols();
    let mut sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let initial = net.loss_and_gradients(x, y).0;

    let mut velocity: Vec<f64> = vec![0.0; net.params_flat().len()];
    let mut params = net.params_flat();
    for epoch in 0..config.epochs {
        sample.shuffle(&mut rng);
        for (b, chunk) in sample.chunks(config.batch).enumerate() {
            let xb = x.select_columns(chunk);
            let yb = y.select_columns(chunk);
            let (loss, grads) = net.loss_and_gradients(&xb, &yb);
            if !loss.is_finite() {
                return Err(Error::NanLoss { member, epoch, batch: b });
            }
            let g = flatten_gradients(&grads);
            for ((p, v), gi) in params.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *v = config.momentum * *v + gi;
                *p -= config.learning_rate * *v;
            }
            net.set_params_flat(&params);
        }
    }
    let last = net.loss_and_gradients(x, y).0;
    if !last.is_finite() {
        return Err(Error::NanLoss {
            member,
            epoch: config.epochs,
            batch: 0,
        });
    }
    Ok((net, initial, last))
}
