//! Analytic trial-duration model and its calibration against measured
//! speedups.
//!
//! A training step costs `t_step_base` plus the gradient all-reduce. The
//! all-reduce follows the ring model per level: `w` participants move
//! `2(w-1)/w` of the gradient volume and pay `2(w-1)` hop latencies. Jobs
//! wider than a node run an intra-node ring at node width followed by an
//! inter-node ring across the `k` nodes.

mod calibrate;
pub mod reference;

pub use calibrate::{calibrate, CalibrationResult, Residual, SearchBounds, SearchConfig, SearchSummary};
pub use reference::{format_hms, parse_hms, Method, ReferenceRow, ReferenceTable};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archmodel::{build_unet3d, count_params, UNetOptions};
use crate::clustersim::{
    plan_data_parallel, plan_experiment_parallel, simulate, speedup, ClusterTopology, GroupPolicy, SimError,
};
use crate::hpgrid::{ExperimentSpec, DEFAULT_EPOCHS};

/// Training samples after a 70/15/15 split of 484 volumes.
pub const DEFAULT_SAMPLES_TRAIN: u64 = 338;
pub const DEFAULT_GPUS_PER_NODE: usize = 4;
/// GPU counts of the reference benchmark.
pub const REFERENCE_GPU_COUNTS: [usize; 7] = [1, 2, 4, 8, 12, 16, 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid count {0}: must be at least 1")]
    InvalidCount(i64),
    #[error("invalid cost model: {0}")]
    Model(String),
    #[error("malformed input: {0}")]
    Input(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Per-trial duration multipliers (mean 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Heterogeneity {
    /// Multipliers spread linearly over experiment ids from `2 - h` to `h`,
    /// so `h` is the max/mean ratio. Requires `1 <= h < 2`.
    Spread(f64),
    Explicit(Vec<f64>),
}

impl Heterogeneity {
    pub fn multipliers(&self, grid_size: usize) -> Result<Vec<f64>, CostError> {
        match self {
            Heterogeneity::Spread(h) => {
                if !(*h >= 1.0 && *h < 2.0) {
                    return Err(CostError::Model(format!("heterogeneity spread {h} outside [1, 2)")));
                }
                if grid_size <= 1 {
                    return Ok(vec![1.0; grid_size]);
                }
                let last = (grid_size - 1) as f64;
                Ok((0..grid_size)
                    .map(|i| 1.0 + (h - 1.0) * (2.0 * i as f64 / last - 1.0))
                    .collect())
            }
            Heterogeneity::Explicit(m) => {
                if m.len() != grid_size {
                    return Err(CostError::Model(format!(
                        "{} heterogeneity multipliers for a grid of {grid_size}",
                        m.len()
                    )));
                }
                if m.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(CostError::Model("heterogeneity multipliers must be positive".into()));
                }
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                if (mean - 1.0).abs() > 1e-9 {
                    return Err(CostError::Model(format!(
                        "heterogeneity multipliers average {mean}, not 1"
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

/// Missing keys take the [`Default`] values when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Seconds per step for one replica at the default batch.
    pub t_step_base: f64,
    /// Seconds per ring hop inside a node.
    pub sync_overhead_intra: f64,
    /// Seconds per ring hop between nodes.
    pub sync_overhead_inter: f64,
    /// Effective all-reduce bandwidths, bytes/s. `inf` removes the volume term.
    pub beta_intra: f64,
    pub beta_inter: f64,
    /// Number of experiments in the hyper-parameter batch.
    pub grid_size: usize,
    pub heterogeneity: Heterogeneity,
    pub epochs: u64,
    pub samples_train: u64,
    pub grad_bytes: u64,
}

/// Gradient bytes of the default U-Net in f32 (trainable parameters only).
pub fn default_grad_bytes() -> u64 {
    let desc = build_unet3d(UNetOptions::default()).expect("default network builds");
    count_params(&desc, false).expect("default network counts").total * 4
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            t_step_base: 1.0,
            sync_overhead_intra: 0.0,
            sync_overhead_inter: 0.0,
            beta_intra: f64::INFINITY,
            beta_inter: f64::INFINITY,
            grid_size: 16,
            heterogeneity: Heterogeneity::Spread(1.0),
            epochs: DEFAULT_EPOCHS,
            samples_train: DEFAULT_SAMPLES_TRAIN,
            grad_bytes: default_grad_bytes(),
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: &str| Err(CostError::Model(msg.to_string()));
        if !(self.t_step_base > 0.0 && self.t_step_base.is_finite()) {
            return bad("t_step_base must be positive");
        }
        for o in [self.sync_overhead_intra, self.sync_overhead_inter] {
            if !(o >= 0.0 && o.is_finite()) {
                return bad("sync overheads must be non-negative");
            }
        }
        for b in [self.beta_intra, self.beta_inter] {
            if b.is_nan() || b <= 0.0 {
                return bad("bandwidths must be positive");
            }
        }
        if self.grid_size == 0 || self.epochs == 0 || self.samples_train == 0 {
            return bad("grid_size, epochs and samples_train must be at least 1");
        }
        self.heterogeneity.multipliers(self.grid_size)?;
        Ok(())
    }

    /// The experiment grid the model stands for: `grid_size` specs with
    /// the default batch and this model's epoch count.
    pub fn grid(&self) -> Vec<ExperimentSpec> {
        (0..self.grid_size)
            .map(|id| ExperimentSpec {
                epochs: self.epochs,
                ..ExperimentSpec::placeholder(id)
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cost params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let p: Self = toml::from_str(text).map_err(|e| CostError::Input(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

fn ring_time(width: usize, bytes: f64, bandwidth: f64, hop_latency: f64) -> f64 {
    if width <= 1 {
        return 0.0;
    }
    let w = width as f64;
    2.0 * (w - 1.0) / w * bytes / bandwidth + 2.0 * (w - 1.0) * hop_latency
}

/// All-reduce time of one step across `n` GPUs of `topo`.
pub fn allreduce_time(params: &CostParams, n: i64, topo: &ClusterTopology, grad_bytes: u64) -> Result<f64, CostError> {
    if n < 1 {
        return Err(CostError::InvalidCount(n));
    }
    let n = n as usize;
    let m = topo.gpus_per_node.max(1);
    let bytes = grad_bytes as f64;
    let mut t = ring_time(n.min(m), bytes, params.beta_intra, params.sync_overhead_intra);
    if n > m {
        let nodes = n.div_ceil(m);
        t += ring_time(nodes, bytes, params.beta_inter, params.sync_overhead_inter);
    }
    Ok(t)
}

/// Steps per epoch when each of `n` replicas takes `per_replica_batch`.
pub fn steps_per_epoch(samples_train: u64, per_replica_batch: u64, n: usize) -> u64 {
    samples_train.div_ceil(per_replica_batch * n as u64)
}

/// Wall-clock of one experiment trained on `n` GPUs.
pub fn trial_duration(
    params: &CostParams,
    spec: &ExperimentSpec,
    n: i64,
    topo: &ClusterTopology,
) -> Result<f64, CostError> {
    if n < 1 {
        return Err(CostError::InvalidCount(n));
    }
    params.validate()?;
    let multipliers = params.heterogeneity.multipliers(params.grid_size)?;
    let multiplier = *multipliers
        .get(spec.id)
        .ok_or_else(|| CostError::Model(format!("experiment {} outside a grid of {}", spec.id, params.grid_size)))?;
    DurationModel::new(params, topo.gpus_per_node)?.duration(spec, n as usize, multiplier)
}

/// Validated model with multipliers resolved, for repeated evaluation.
pub(crate) struct DurationModel<'a> {
    params: &'a CostParams,
    multipliers: Vec<f64>,
    gpus_per_node: usize,
}

impl<'a> DurationModel<'a> {
    pub(crate) fn new(params: &'a CostParams, gpus_per_node: usize) -> Result<Self, CostError> {
        params.validate()?;
        Ok(Self {
            multipliers: params.heterogeneity.multipliers(params.grid_size)?,
            params,
            gpus_per_node,
        })
    }

    fn duration(&self, spec: &ExperimentSpec, n: usize, multiplier: f64) -> Result<f64, CostError> {
        let p = self.params;
        let topo = ClusterTopology {
            gpus_per_node: self.gpus_per_node,
            ..ClusterTopology::v100_nodes(1)
        };
        let comm = allreduce_time(p, n as i64, &topo, p.grad_bytes)?;
        let steps = steps_per_epoch(p.samples_train, spec.per_replica_batch, n);
        Ok(spec.epochs as f64 * steps as f64 * (p.t_step_base + comm) * multiplier)
    }

    pub(crate) fn by_id(&self, spec: &ExperimentSpec, n: usize) -> f64 {
        // planners reject non-positive durations, so errors surface there
        self.multipliers
            .get(spec.id)
            .and_then(|&m| self.duration(spec, n, m).ok())
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedRow {
    pub n: usize,
    pub dp_elapsed: f64,
    pub dp_speedup: f64,
    pub ep_elapsed: f64,
    pub ep_speedup: f64,
    pub ep_utilization: f64,
}

impl PredictedRow {
    pub fn elapsed(&self, m: Method) -> f64 {
        match m {
            Method::DataParallel => self.dp_elapsed,
            Method::ExperimentParallel => self.ep_elapsed,
        }
    }

    pub fn speedup(&self, m: Method) -> f64 {
        match m {
            Method::DataParallel => self.dp_speedup,
            Method::ExperimentParallel => self.ep_speedup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTable {
    pub rows: Vec<PredictedRow>,
}

fn makespans(
    model: &DurationModel<'_>,
    specs: &[ExperimentSpec],
    n: usize,
    gpus_per_node: usize,
    policy: GroupPolicy,
) -> Result<(f64, f64, f64), CostError> {
    let topo = ClusterTopology::for_gpus(n, gpus_per_node)?;
    let dp = plan_data_parallel(specs, &topo, |s, w| model.by_id(s, w))?;
    let dp = simulate(&dp, &topo)?;
    let ep = plan_experiment_parallel(specs, &topo, policy, |s, w| model.by_id(s, w))?;
    let ep = simulate(&ep, &topo)?;
    Ok((dp.elapsed, ep.elapsed, ep.utilization))
}

fn planned_makespan(schedule: &crate::clustersim::Schedule) -> f64 {
    schedule
        .assignments
        .iter()
        .map(|a| a.start + a.duration)
        .fold(0.0, f64::max)
}

/// Speedups `(data_parallel, experiment_parallel)` per GPU count from the
/// plans alone, skipping the event simulation. Matches `predict_table`.
pub(crate) fn predict_speedups(
    params: &CostParams,
    gpu_counts: &[usize],
    gpus_per_node: usize,
    policy: GroupPolicy,
) -> Result<Vec<(f64, f64)>, CostError> {
    let model = DurationModel::new(params, gpus_per_node)?;
    let specs = params.grid();
    let spans = |n: usize| -> Result<(f64, f64), CostError> {
        let topo = ClusterTopology::for_gpus(n, gpus_per_node)?;
        let dp = plan_data_parallel(&specs, &topo, |s, w| model.by_id(s, w))?;
        let ep = plan_experiment_parallel(&specs, &topo, policy, |s, w| model.by_id(s, w))?;
        Ok((planned_makespan(&dp), planned_makespan(&ep)))
    };
    let (dp1, ep1) = spans(1)?;
    gpu_counts
        .iter()
        .map(|&n| {
            let (dp, ep) = spans(n)?;
            Ok((speedup(dp1, dp)?, speedup(ep1, ep)?))
        })
        .collect()
}

/// Elapsed time and speedup of both strategies at each GPU count. Each
/// method's speedups are relative to its own single-GPU run.
pub fn predict_table(
    params: &CostParams,
    gpu_counts: &[usize],
    gpus_per_node: usize,
    policy: GroupPolicy,
) -> Result<PredictedTable, CostError> {
    let model = DurationModel::new(params, gpus_per_node)?;
    let specs = params.grid();
    let (dp1, ep1, _) = makespans(&model, &specs, 1, gpus_per_node, policy)?;
    let rows = gpu_counts
        .iter()
        .map(|&n| {
            let (dp, ep, util) = makespans(&model, &specs, n, gpus_per_node, policy)?;
            Ok(PredictedRow {
                n,
                dp_elapsed: dp,
                dp_speedup: speedup(dp1, dp)?,
                ep_elapsed: ep,
                ep_speedup: speedup(ep1, ep)?,
                ep_utilization: util,
            })
        })
        .collect::<Result<_, CostError>>()?;
    Ok(PredictedTable { rows })
}
