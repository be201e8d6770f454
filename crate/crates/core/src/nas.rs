//! Hyperparameter enumeration: exact parameter counts per configuration,
//! simulated latency per point, joining of externally supplied accuracy
//! metrics, Pareto-front extraction, and the regression/classification
//! metrics used to fill the accuracy slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::pipesim::{simulate, PipelineConfig, StageLatencyTable};

// ---------------------------------------------------------------------------
// parameter counting

/// Exact parameter count from the shape formulas of every weight tensor.
/// The enumeration oracle is [`crate::mamba::MambaWeights::count_elements`].
pub fn param_count(config: &MambaConfig) -> usize {
    let d = config.model_dim;
    let ed = config.inner_dim();
    let n = config.state_dim;
    let k = config.conv_kernel;
    let patch = d * config.patch_dim() + d;
    let block = 2 * d                      // norm gamma/beta
        + 2 * (ed * d + ed)                // main and gate in-projections
        + ed * k                           // depthwise conv kernels
        + (ed * ed + ed)                   // per-channel step-size projection
        + 2 * (n * ed + n)                 // B and C projections
        + ed * n                           // transition matrix A
        + ed                               // skip vector
        + (d * ed + d);                    // out-projection
    let head = config.out_dim * d + config.out_dim;
    patch + config.num_blocks * block + head
}

/// Model size in bytes at a uniform bit-width (norm gamma/beta stay 16-bit).
pub fn model_bytes(config: &MambaConfig, bits: u32) -> usize {
    let per_param = bits.div_ceil(8) as usize;
    let norm_params = 2 * config.model_dim * config.num_blocks;
    (param_count(config) - norm_params) * per_param + norm_params * 2
}

// ---------------------------------------------------------------------------
// sweep

/// Value lists for the five searched hyperparameters plus the fixed
/// geometry the candidates share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub model_dim: Vec<usize>,
    pub expand: Vec<usize>,
    pub patch_size: Vec<usize>,
    pub state_dim: Vec<usize>,
    pub num_blocks: Vec<usize>,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_dim: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
}

fn default_kernel() -> usize {
    4
}

impl SweepGrid {
    /// The shipped default: the pose-estimation configuration and its
    /// neighbors. Illustrative, not a published candidate list.
    pub fn mars_default() -> Self {
        SweepGrid {
            model_dim: vec![16, 20, 24],
            expand: vec![1, 2],
            patch_size: vec![2, 4],
            state_dim: vec![4, 8, 16],
            num_blocks: vec![1, 2, 3],
            in_channels: 5,
            in_height: 8,
            in_width: 8,
            out_dim: 57,
            conv_kernel: 4,
        }
    }

    /// Cartesian product in deterministic order (d, e, p, n, m innermost
    /// last). Invalid geometry combinations are skipped.
    pub fn enumerate(&self) -> Vec<MambaConfig> {
        let mut out = Vec::new();
        for &d in &self.model_dim {
            for &e in &self.expand {
                for &p in &self.patch_size {
                    for &n in &self.state_dim {
                        for &m in &self.num_blocks {
                            let c = MambaConfig {
                                model_dim: d,
                                expand: e,
                                patch_size: p,
                                state_dim: n,
                                num_blocks: m,
                                conv_kernel: self.conv_kernel,
                                in_channels: self.in_channels,
                                in_height: self.in_height,
                                in_width: self.in_width,
                                out_dim: self.out_dim,
                                h_bits: 24,
                                act_bits: 8,
                            };
                            if c.validate().is_ok() {
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Whether smaller or larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    LowerBetter,
    HigherBetter,
}

/// One externally supplied accuracy value, keyed by the config tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub d: usize,
    pub e: usize,
    pub p: usize,
    pub n: usize,
    pub m: usize,
    pub metric: f64,
}

/// Metrics file: accuracy values plus their polarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(default = "default_polarity")]
    pub polarity: Polarity,
    pub entries: Vec<MetricEntry>,
}

fn default_polarity() -> Polarity {
    Polarity::LowerBetter
}

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NasPoint {
    pub config: MambaConfig,
    pub param_count: usize,
    pub model_bytes: usize,
    pub latency_cycles: u64,
    pub metric: Option<f64>,
    pub metric_polarity: Polarity,
    pub on_front: bool,
}

/// Largest divisor of `dim` that does not exceed `requested`, so every sweep
/// point gets a valid uniform workload split.
pub fn units_for(dim: usize, requested: usize) -> usize {
    (1..=requested.min(dim)).rev().find(|u| dim % u == 0).unwrap_or(1)
}

/// Evaluates the grid: exact parameter count, simulated latency with the
/// given preset, and metrics joined from the optional file. Points without a
/// metric entry carry `None`; metric entries matching no point are an error.
pub fn sweep(
    grid: &SweepGrid,
    table: &StageLatencyTable,
    requested_units: usize,
    clock_hz: f64,
    metrics: Option<&MetricsFile>,
) -> Result<Vec<NasPoint>> {
    let configs = grid.enumerate();
    if configs.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let polarity = metrics.map(|m| m.polarity).unwrap_or(Polarity::LowerBetter);
    let mut points = Vec::with_capacity(configs.len());
    for config in configs {
        let units = units_for(config.model_dim, requested_units);
        let pc = PipelineConfig::from_model(&config, units, clock_hz);
        let report = simulate(&pc, table)?;
        let metric = metrics.and_then(|m| {
            m.entries
                .iter()
                .find(|e| {
                    e.d == config.model_dim
                        && e.e == config.expand
                        && e.p == config.patch_size
                        && e.n == config.state_dim
                        && e.m == config.num_blocks
                })
                .map(|e| e.metric)
        });
        points.push(NasPoint {
            param_count: param_count(&config),
            model_bytes: model_bytes(&config, config.act_bits),
            latency_cycles: report.frame_latency_cycles,
            metric,
            metric_polarity: polarity,
            on_front: false,
            config,
        });
    }
    if let Some(m) = metrics {
        let unmatched: Vec<String> = m
            .entries
            .iter()
            .filter(|e| {
                !points.iter().any(|p| {
                    p.config.model_dim == e.d
                        && p.config.expand == e.e
                        && p.config.patch_size == e.p
                        && p.config.state_dim == e.n
                        && p.config.num_blocks == e.m
                })
            })
            .map(|e| format!("d{}_e{}_p{}_n{}_m{}", e.d, e.e, e.p, e.n, e.m))
            .collect();
        if !unmatched.is_empty() {
            return Err(Error::UnmatchedMetrics(unmatched));
        }
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Pareto extraction

/// An objective to minimize or maximize over sweep points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Params,
    Bytes,
    Latency,
    Metric,
}

impl Objective {
    /// Objective value oriented so smaller is always better.
    fn value(&self, p: &NasPoint) -> Result<f64> {
        let v = match self {
            Objective::Params => Some(p.param_count as f64),
            Objective::Bytes => Some(p.model_bytes as f64),
            Objective::Latency => Some(p.latency_cycles as f64),
            Objective::Metric => p.metric.map(|m| match p.metric_polarity {
                Polarity::LowerBetter => m,
                Polarity::HigherBetter => -m,
            }),
        };
        v.ok_or_else(|| {
            Error::MissingObjective(format!(
                "point {} has no {self:?} value",
                p.config.key()
            ))
        })
    }
}

/// Returns exactly the non-dominated points under the given objectives,
/// in stable order by the first objective. Dominance is non-strict: equal
/// on every objective and better on at least one excludes the other.
pub fn pareto_front(points: &[NasPoint], objectives: &[Objective]) -> Result<Vec<NasPoint>> {
    if objectives.is_empty() {
        return Err(Error::Config("no objectives given".into()));
    }
    let mut vals = Vec::with_capacity(points.len());
    for p in points {
        let row: Vec<f64> = objectives
            .iter()
            .map(|o| o.value(p))
            .collect::<Result<_>>()?;
        vals.push(row);
    }
    // sort candidates by first objective (then the rest) and scan, keeping
    // points no current front member dominates
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        vals[a]
            .iter()
            .zip(&vals[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|c| !c.is_eq())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let dominates = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
    };
    let mut front_idx: Vec<usize> = Vec::new();
    for &i in &order {
        if !front_idx.iter().any(|&j| dominates(&vals[j], &vals[i])) {
            front_idx.push(i);
        }
    }
    // the scan order is already stable by first objective
    Ok(front_idx
        .into_iter()
        .map(|i| {
            let mut p = points[i].clone();
            p.on_front = true;
            p
        })
        .collect())
}

/// Marks `on_front` in place over a full sweep result.
pub fn mark_front(points: &mut [NasPoint], objectives: &[Objective]) -> Result<()> {
    let front = pareto_front(points, objectives)?;
    for p in points.iter_mut() {
        p.on_front = front.iter().any(|f| f.config == p.config);
    }
    Ok(())
}

/// CSV rows for a sweep result (plot-ready).
pub fn sweep_csv(points: &[NasPoint]) -> String {
    let mut out =
        String::from("d,e,p,n,m,params,bytes,latency_cycles,metric,on_front\n");
    for p in points {
        let c = &p.config;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.model_dim,
            c.expand,
            c.patch_size,
            c.state_dim,
            c.num_blocks,
            p.param_count,
            p.model_bytes,
            p.latency_cycles,
            p.metric.map(|m| m.to_string()).unwrap_or_default(),
            p.on_front
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// accuracy metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Regression errors per coordinate axis (outputs interleaved x, y, z).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub axis: String,
    pub mae: f64,
    pub rmse: f64,
}

/// Evaluation record: MAE/RMSE for regression (with a per-axis breakdown
/// when the output length is a multiple of three), top-1 accuracy for
/// classification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: Task,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub per_axis: Option<Vec<AxisMetrics>>,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Computes MAE/RMSE (regression; `ground_truth` rows match prediction rows)
/// or top-1 accuracy (classification; `ground_truth` holds one class index
/// per row).
pub fn eval_metrics(
    predictions: &[Vec<f32>],
    ground_truth: &[Vec<f32>],
    task: Task,
) -> Result<MetricRecord> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} ground-truth rows",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    match task {
        Task::Regression => {
            let dim = predictions[0].len();
            let mut abs_sum = 0.0f64;
            let mut sq_sum = 0.0f64;
            let mut axis_abs = [0.0f64; 3];
            let mut axis_sq = [0.0f64; 3];
            let mut n = 0usize;
            for (p, g) in predictions.iter().zip(ground_truth) {
                if p.len() != dim || g.len() != dim {
                    return Err(Error::InvalidInput(format!(
                        "row length mismatch: {} vs {} (expected {dim})",
                        p.len(),
                        g.len()
                    )));
                }
                for (i, (pv, gv)) in p.iter().zip(g).enumerate() {
                    let d = (*pv as f64 - *gv as f64).abs();
                    abs_sum += d;
                    sq_sum += d * d;
                    axis_abs[i % 3] += d;
                    axis_sq[i % 3] += d * d;
                    n += 1;
                }
            }
            let per_axis = if dim % 3 == 0 {
                let per = (n / 3) as f64;
                Some(
                    ["x", "y", "z"]
                        .iter()
                        .enumerate()
                        .map(|(a, name)| AxisMetrics {
                            axis: name.to_string(),
                            mae: axis_abs[a] / per,
                            rmse: (axis_sq[a] / per).sqrt(),
                        })
                        .collect(),
                )
            } else {
                None
            };
            Ok(MetricRecord {
                task,
                mae: Some(abs_sum / n as f64),
                rmse: Some((sq_sum / n as f64).sqrt()),
                per_axis,
                accuracy: None,
                count: predictions.len(),
            })
        }
        Task::Classification => {
            let mut correct = 0usize;
            for (p, g) in predictions.iter().zip(ground_truth) {
                if g.len() != 1 {
                    return Err(Error::InvalidInput(
                        "classification ground truth must hold one class index per row".into(),
                    ));
                }
                let argmax = p
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.total_cmp(b))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if argmax == g[0] as usize {
                    correct += 1;
                }
            }
            Ok(MetricRecord {
                task,
                mae: None,
                rmse: None,
                per_axis: None,
                accuracy: Some(correct as f64 / predictions.len() as f64),
                count: predictions.len(),
            })
        }
    }
}
