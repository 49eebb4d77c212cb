//! Labeled rollouts for the ensemble regressor.
//!
//! Each row pairs a feature vector (state relative to goal, then the raw gain
//! coefficients) with the validator's labels. Rows are generated in parallel;
//! row `i` draws from its own ChaCha stream so the output does not depend on
//! scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{validate_horizon, ValidationSettings, MEMBERSHIP_TOL};
use crate::barrier::ClassKParams;
use crate::dynamics::StateVec;
use crate::error::{Error, Result};
use crate::qp_filter::SafetyLoop;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAX_RETRIES: usize = 100;

/// Draws an initial state and a goal.
pub trait ScenarioSampler: Send + Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> (StateVec, StateVec);
}

/// Draws a gain vector.
pub trait ParamSampler: Send + Sync {
    fn degree(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> ClassKParams;
}

/// Uniform initial states and goals in axis-aligned boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformScenario {
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    pub goal_lower: Vec<f64>,
    pub goal_upper: Vec<f64>,
}

fn uniform_in(rng: &mut ChaCha8Rng, lower: &[f64], upper: &[f64]) -> StateVec {
    StateVec::from_iterator(
        lower.len(),
        lower.iter().zip(upper).map(|(lo, hi)| {
            if hi > lo {
                rng.random_range(*lo..*hi)
            } else {
                *lo
            }
        }),
    )
}

impl ScenarioSampler for UniformScenario {
    fn sample(&self, rng: &mut ChaCha8Rng) -> (StateVec, StateVec) {
        let x0 = uniform_in(rng, &self.x0_lower, &self.x0_upper);
        let goal = uniform_in(rng, &self.goal_lower, &self.goal_upper);
        (x0, goal)
    }
}

/// Gains log-uniform between per-coefficient bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogUniformParams {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LogUniformParams {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidParameter(
                "parameter sampler bounds must be non-empty and of equal length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(*l > 0.0 && u >= l)) {
            return Err(Error::InvalidParameter(
                "parameter sampler bounds must satisfy 0 < lower <= upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }
}

impl ParamSampler for LogUniformParams {
    fn degree(&self) -> usize {
        self.lower.len()
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> ClassKParams {
        let coeffs = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                if hi > lo {
                    rng.random_range(lo.ln()..hi.ln()).exp()
                } else {
                    *lo
                }
            })
            .collect();
        ClassKParams::new(coeffs).expect("bounds are positive")
    }
}

/// `(x - goal) ++ k`.
pub fn candidate_features(x: &StateVec, goal: &StateVec, params: &ClassKParams) -> Vec<f64> {
    x.iter()
        .zip(goal.iter())
        .map(|(a, b)| a - b)
        .chain(params.as_slice().iter().copied())
        .collect()
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation; degenerate columns get unit scale.
    pub fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let n = rows.clone().count();
        if n == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub features: Vec<f64>,
    pub safety_target: f64,
    pub progress_target: f64,
    pub validated: bool,
}

impl DatasetRow {
    pub fn targets(&self) -> [f64; 2] {
        [self.safety_target, self.progress_target]
    }
}

/// Sidecar metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub normalization: FeatureStats,
    pub seed: u64,
    pub requested_rows: usize,
    pub rows: usize,
    /// Rows dropped after exhausting their resampling budget.
    pub rejected_rows: usize,
    pub model: String,
    pub barrier: String,
    pub validation: ValidationSettings,
    /// Free-form echo of the generating configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
    pub meta: DatasetMeta,
}

/// Sample `n` labeled rollouts. Samples with `x0` outside the inner safe set
/// of the drawn gains are redrawn, up to 100 times per row.
pub fn generate_dataset(
    safety_loop: &SafetyLoop,
    scenarios: &dyn ScenarioSampler,
    params: &dyn ParamSampler,
    n: usize,
    settings: &ValidationSettings,
    seed: u64,
) -> Result<Dataset> {
    settings.check()?;
    let dim = safety_loop.model.state_dim() + params.degree();
    let rows: Vec<Option<DatasetRow>> = (0..n)
        .into_par_iter()
        .map(|i| generate_row(safety_loop, scenarios, params, settings, seed, i as u64))
        .collect::<Result<_>>()?;
    let requested = rows.len();
    let rows: Vec<DatasetRow> = rows.into_iter().flatten().collect();
    let normalization = FeatureStats::from_rows(dim, rows.iter().map(|r| r.features.as_slice()));
    let meta = DatasetMeta {
        version: DATASET_FORMAT_VERSION,
        feature_names: (0..dim).map(|i| format!("feature_{i}")).collect(),
        normalization,
        seed,
        requested_rows: requested,
        rows: rows.len(),
        rejected_rows: requested - rows.len(),
        model: safety_loop.model.name().to_string(),
        barrier: safety_loop.barrier.name().to_string(),
        validation: *settings,
        config: serde_json::Value::Null,
    };
    Ok(Dataset { rows, meta })
}

fn generate_row(
    safety_loop: &SafetyLoop,
    scenarios: &dyn ScenarioSampler,
    params: &dyn ParamSampler,
    settings: &ValidationSettings,
    seed: u64,
    index: u64,
) -> Result<Option<DatasetRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    for _ in 0..MAX_RETRIES {
        let (x0, goal) = scenarios.sample(&mut rng);
        let k = params.sample(&mut rng);
        let spec = safety_loop.spec(&k);
        if spec.evaluate(&x0)?.stack.inner_margin() < -MEMBERSHIP_TOL {
            continue;
        }
        let policy = safety_loop.policy(&k, &goal);
        let report = validate_horizon(&spec, &policy, &x0, &goal, settings)?;
        return Ok(Some(DatasetRow {
            features: candidate_features(&x0, &goal, &k),
            safety_target: report.safety_target,
            progress_target: report.progress_target,
            validated: report.validated,
        }));
    }
    Ok(None)
}

/// `data.csv` -> `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.meta.feature_names.len()
    }

    pub fn validated_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.validated).count() as f64 / self.rows.len() as f64
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header: Vec<String> = self.meta.feature_names.clone();
        header.extend(["safety_target", "progress_target", "validated"].map(String::from));
        w.write_record(&header)
            .map_err(|e| Error::parse(csv_path, e))?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.features.iter().map(|v| v.to_string()).collect();
            rec.push(row.safety_target.to_string());
            rec.push(row.progress_target.to_string());
            rec.push(if row.validated { "1" } else { "0" }.to_string());
            w.write_record(&rec).map_err(|e| Error::parse(csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;

        let side = sidecar_path(csv_path);
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::parse(&side, e))?;
        let mut f = File::create(&side).map_err(|e| Error::io(&side, e))?;
        f.write_all(json.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(&side, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let side = sidecar_path(csv_path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&side, e))?;
        if meta.version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                found: meta.version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let dim = meta.feature_names.len();
        let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header = rdr.headers().map_err(|e| Error::parse(csv_path, e))?;
        if header.len() != dim + 3 {
            return Err(Error::parse(
                csv_path,
                format!("expected {} columns, header has {}", dim + 3, header.len()),
            ));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(csv_path, e))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::parse(csv_path, format!("row {}: missing column {i}", line + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::parse(csv_path, format!("row {}: {e}", line + 1)))
            };
            let features = (0..dim).map(num).collect::<Result<Vec<_>>>()?;
            let validated = match rec.get(dim + 2) {
                Some("1") => true,
                Some("0") => false,
                other => {
                    return Err(Error::parse(
                        csv_path,
                        format!("row {}: bad validated flag {other:?}", line + 1),
                    ))
                }
            };
            rows.push(DatasetRow {
                features,
                safety_target: num(dim)?,
                progress_target: num(dim + 1)?,
                validated,
            });
        }
        Ok(Self { rows, meta })
    }
}
