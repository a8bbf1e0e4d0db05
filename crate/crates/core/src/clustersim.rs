//! Cluster topology, scheduling strategies and a discrete-event makespan
//! simulator.
//!
//! Two strategies are planned. Data parallelism runs the experiments one
//! after another, each spread over every GPU. Experiment parallelism runs
//! independent trials side by side on GPU groups, placed by greedy list
//! scheduling in experiment-id order.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hpgrid::ExperimentSpec;

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid count {0}: must be at least 1")]
    InvalidCount(i64),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("experiment grid is empty")]
    EmptyGrid,
    #[error("infeasible assignment: group of {group} GPUs on a cluster of {total}")]
    InfeasibleAssignment { group: usize, total: usize },
    #[error("invalid duration {duration} for trial {trial}")]
    InvalidDuration { trial: usize, duration: f64 },
    #[error("ScheduleConflict: gpu {gpu} is busy with trial {busy} when trial {trial} starts at {time}s")]
    ScheduleConflict {
        gpu: GpuId,
        busy: usize,
        trial: usize,
        time: f64,
    },
    #[error("trial {trial} uses gpu {gpu}, which is outside the topology")]
    UnknownGpu { trial: usize, gpu: GpuId },
    #[error("invalid time {0}: must be positive and finite")]
    InvalidTime(f64),
}

/// Bandwidth (bytes/s) and latency (s) of one class of link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub bandwidth: f64,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTopology {
    pub node_count: usize,
    pub gpus_per_node: usize,
    pub gpu_memory_bytes: u64,
    pub intra: Link,
    pub inter: Link,
}

impl ClusterTopology {
    /// Nodes of 4 x 16 GiB GPUs with NVLink-class intra-node and
    /// InfiniBand-class inter-node links.
    pub fn v100_nodes(node_count: usize) -> Self {
        Self {
            node_count,
            gpus_per_node: 4,
            gpu_memory_bytes: 16 * GIB,
            intra: Link {
                bandwidth: 150e9,
                latency: 5e-6,
            },
            inter: Link {
                bandwidth: 12.5e9,
                latency: 1e-5,
            },
        }
    }

    /// Smallest topology offering exactly `n` GPUs on nodes of
    /// `gpus_per_node`: a single partial node when `n` fits in one node,
    /// otherwise `n / gpus_per_node` full nodes.
    pub fn for_gpus(n: usize, gpus_per_node: usize) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::InvalidCount(0));
        }
        if gpus_per_node == 0 {
            return Err(SimError::InvalidCount(0));
        }
        let base = Self::v100_nodes(1);
        let topo = if n <= gpus_per_node {
            Self {
                node_count: 1,
                gpus_per_node: n,
                ..base
            }
        } else if n.is_multiple_of(gpus_per_node) {
            Self {
                node_count: n / gpus_per_node,
                gpus_per_node,
                ..base
            }
        } else {
            return Err(SimError::InvalidTopology(format!(
                "{n} GPUs do not fill nodes of {gpus_per_node}"
            )));
        };
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.node_count == 0 || self.gpus_per_node == 0 {
            return Err(SimError::InvalidTopology(
                "node_count and gpus_per_node must be at least 1".into(),
            ));
        }
        for (what, link) in [("intra", self.intra), ("inter", self.inter)] {
            if !(link.bandwidth > 0.0 && link.latency >= 0.0 && link.bandwidth.is_finite() && link.latency.is_finite())
            {
                return Err(SimError::InvalidTopology(format!(
                    "{what}-node link has invalid characteristics"
                )));
            }
        }
        if self.inter.bandwidth > self.intra.bandwidth {
            return Err(SimError::InvalidTopology(
                "inter-node bandwidth exceeds intra-node bandwidth".into(),
            ));
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> usize {
        self.node_count * self.gpus_per_node
    }

    /// All GPUs in (node, slot) order.
    pub fn gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        (0..self.node_count).flat_map(move |node| (0..self.gpus_per_node).map(move |slot| GpuId { node, slot }))
    }

    fn index(&self, gpu: GpuId) -> Option<usize> {
        (gpu.node < self.node_count && gpu.slot < self.gpus_per_node).then(|| gpu.node * self.gpus_per_node + gpu.slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GpuId {
    pub node: usize,
    pub slot: usize,
}

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}g{}", self.node, self.slot)
    }
}

impl std::str::FromStr for GpuId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix('n').ok_or_else(|| format!("bad gpu id `{s}`"))?;
        let (node, slot) = rest.split_once('g').ok_or_else(|| format!("bad gpu id `{s}`"))?;
        Ok(GpuId {
            node: node.parse().map_err(|_| format!("bad gpu id `{s}`"))?,
            slot: slot.parse().map_err(|_| format!("bad gpu id `{s}`"))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sequential,
    SingleNodeDataParallel,
    MultiNodeDataParallel,
    ExperimentParallel,
}

/// Which data-parallel regime `n` GPUs on nodes of `gpus_per_node` fall in.
pub fn select_parallelism_level(n: i64, gpus_per_node: i64) -> Result<StrategyKind, SimError> {
    if n < 1 {
        return Err(SimError::InvalidCount(n));
    }
    if gpus_per_node < 1 {
        return Err(SimError::InvalidCount(gpus_per_node));
    }
    Ok(if n == 1 {
        StrategyKind::Sequential
    } else if n <= gpus_per_node {
        StrategyKind::SingleNodeDataParallel
    } else {
        StrategyKind::MultiNodeDataParallel
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAssignment {
    pub experiment: usize,
    pub gpus: Vec<GpuId>,
    pub start: f64,
    pub duration: f64,
}

impl TrialAssignment {
    pub fn finish(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub strategy: StrategyKind,
    pub assignments: Vec<TrialAssignment>,
}

/// GPUs per trial under experiment parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupPolicy {
    Fixed(usize),
    /// `max(1, floor(n / E))`.
    Auto,
}

impl GroupPolicy {
    pub fn group_size(&self, n: usize, trials: usize) -> usize {
        match *self {
            GroupPolicy::Fixed(k) => k,
            GroupPolicy::Auto => (n / trials.max(1)).max(1),
        }
    }
}

impl std::str::FromStr for GroupPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(GroupPolicy::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(GroupPolicy::Fixed(k)),
            _ => Err(format!("group policy must be `auto` or a positive integer, got `{s}`")),
        }
    }
}

fn checked_duration(trial: usize, duration: f64) -> Result<f64, SimError> {
    if duration > 0.0 && duration.is_finite() {
        Ok(duration)
    } else {
        Err(SimError::InvalidDuration { trial, duration })
    }
}

/// Runs every experiment on all GPUs, back to back in spec order.
/// `duration(spec, width)` gives a trial's run time at a given width.
pub fn plan_data_parallel<F>(
    specs: &[ExperimentSpec],
    topo: &ClusterTopology,
    mut duration: F,
) -> Result<Schedule, SimError>
where
    F: FnMut(&ExperimentSpec, usize) -> f64,
{
    if specs.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    topo.validate()?;
    let n = topo.total_gpus();
    let gpus: Vec<GpuId> = topo.gpus().collect();
    let mut clock = 0.0;
    let mut assignments = Vec::with_capacity(specs.len());
    for spec in specs {
        let d = checked_duration(spec.id, duration(spec, n))?;
        assignments.push(TrialAssignment {
            experiment: spec.id,
            gpus: gpus.clone(),
            start: clock,
            duration: d,
        });
        clock += d;
    }
    Ok(Schedule {
        strategy: select_parallelism_level(n as i64, topo.gpus_per_node as i64)?,
        assignments,
    })
}

/// Partitions the cluster into equal GPU groups. Groups never straddle a
/// node when they fit inside one; larger groups take consecutive GPUs in
/// (node, slot) order. Leftover GPUs stay idle.
pub fn gpu_groups(topo: &ClusterTopology, size: usize) -> Result<Vec<Vec<GpuId>>, SimError> {
    let total = topo.total_gpus();
    if size == 0 || size > total {
        return Err(SimError::InfeasibleAssignment { group: size, total });
    }
    let m = topo.gpus_per_node;
    let groups = if size <= m {
        (0..topo.node_count)
            .flat_map(|node| {
                (0..m / size).map(move |g| (g * size..(g + 1) * size).map(|slot| GpuId { node, slot }).collect())
            })
            .collect()
    } else {
        let all: Vec<GpuId> = topo.gpus().collect();
        all.chunks_exact(size).map(<[GpuId]>::to_vec).collect()
    };
    Ok(groups)
}

#[derive(Debug, PartialEq)]
struct FreeGroup {
    at: f64,
    group: usize,
}

impl Eq for FreeGroup {}

impl Ord for FreeGroup {
    // min-heap on (time, group index)
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.group.cmp(&self.group))
    }
}

impl PartialOrd for FreeGroup {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy list scheduling: trials in spec order each take the GPU group
/// that frees up first, lowest (node, slot) group on ties.
pub fn plan_experiment_parallel<F>(
    specs: &[ExperimentSpec],
    topo: &ClusterTopology,
    policy: GroupPolicy,
    mut duration: F,
) -> Result<Schedule, SimError>
where
    F: FnMut(&ExperimentSpec, usize) -> f64,
{
    if specs.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    topo.validate()?;
    let size = policy.group_size(topo.total_gpus(), specs.len());
    let groups = gpu_groups(topo, size)?;
    let mut heap: BinaryHeap<FreeGroup> = (0..groups.len()).map(|group| FreeGroup { at: 0.0, group }).collect();
    let mut assignments = Vec::with_capacity(specs.len());
    for spec in specs {
        let d = checked_duration(spec.id, duration(spec, size))?;
        let slot = heap.pop().expect("at least one group");
        assignments.push(TrialAssignment {
            experiment: spec.id,
            gpus: groups[slot.group].clone(),
            start: slot.at,
            duration: d,
        });
        heap.push(FreeGroup {
            at: slot.at + d,
            group: slot.group,
        });
    }
    Ok(Schedule {
        strategy: StrategyKind::ExperimentParallel,
        assignments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    // finishes sort first so a GPU released at t can be reused at t
    Finish,
    Start,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Start => "start",
            EventKind::Finish => "finish",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub trial: usize,
    pub gpus: Vec<GpuId>,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MakespanResult {
    pub elapsed: f64,
    pub assignments: Vec<TrialAssignment>,
    /// Busy fraction of each GPU in (node, slot) order.
    pub gpu_utilization: Vec<f64>,
    /// busy time / (n x elapsed)
    pub utilization: f64,
    pub trace: Vec<Event>,
}

/// Replays a schedule event by event, rejecting any GPU that is started
/// while still busy.
pub fn simulate(schedule: &Schedule, topo: &ClusterTopology) -> Result<MakespanResult, SimError> {
    topo.validate()?;
    let n = topo.total_gpus();
    let mut events = Vec::with_capacity(2 * schedule.assignments.len());
    for (i, a) in schedule.assignments.iter().enumerate() {
        checked_duration(a.experiment, a.duration)?;
        if !(a.start >= 0.0 && a.start.is_finite()) {
            return Err(SimError::InvalidTime(a.start));
        }
        if a.gpus.is_empty() {
            return Err(SimError::InfeasibleAssignment { group: 0, total: n });
        }
        let distinct: BTreeSet<_> = a.gpus.iter().collect();
        if distinct.len() != a.gpus.len() {
            return Err(SimError::ScheduleConflict {
                gpu: a.gpus[0],
                busy: a.experiment,
                trial: a.experiment,
                time: a.start,
            });
        }
        for &gpu in &a.gpus {
            if topo.index(gpu).is_none() {
                return Err(SimError::UnknownGpu {
                    trial: a.experiment,
                    gpu,
                });
            }
        }
        events.push((a.start, EventKind::Start, i));
        events.push((a.finish(), EventKind::Finish, i));
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut running: Vec<Option<usize>> = vec![None; n];
    let mut busy = vec![0.0f64; n];
    let mut trace = Vec::with_capacity(events.len());
    let mut elapsed = 0.0f64;
    for (time, kind, i) in events {
        let a = &schedule.assignments[i];
        for &gpu in &a.gpus {
            let g = topo.index(gpu).expect("checked above");
            match kind {
                EventKind::Start => {
                    if let Some(other) = running[g] {
                        return Err(SimError::ScheduleConflict {
                            gpu,
                            busy: schedule.assignments[other].experiment,
                            trial: a.experiment,
                            time,
                        });
                    }
                    running[g] = Some(i);
                }
                EventKind::Finish => {
                    running[g] = None;
                    busy[g] += a.duration;
                }
            }
        }
        elapsed = elapsed.max(time);
        trace.push(Event {
            time,
            trial: a.experiment,
            gpus: a.gpus.clone(),
            kind,
        });
    }
    let total_busy: f64 = busy.iter().sum();
    let (gpu_utilization, utilization) = if elapsed > 0.0 {
        (
            busy.iter().map(|b| (b / elapsed).min(1.0)).collect(),
            (total_busy / (n as f64 * elapsed)).min(1.0),
        )
    } else {
        (vec![0.0; n], 0.0)
    };
    Ok(MakespanResult {
        elapsed,
        assignments: schedule.assignments.clone(),
        gpu_utilization,
        utilization,
        trace,
    })
}

/// `t_base / t_n`.
pub fn speedup(t_base: f64, t_n: f64) -> Result<f64, SimError> {
    for t in [t_base, t_n] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SimError::InvalidTime(t));
        }
    }
    Ok(t_base / t_n)
}

fn gpu_list(gpus: &[GpuId]) -> String {
    gpus.iter().map(GpuId::to_string).collect::<Vec<_>>().join(";")
}

/// `experiment,gpus,start_s,duration_s,finish_s` rows plus a summary.
pub fn result_csv(result: &MakespanResult) -> String {
    let mut out = String::from("experiment,gpus,start_s,duration_s,finish_s\n");
    for a in &result.assignments {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.experiment,
            gpu_list(&a.gpus),
            a.start,
            a.duration,
            a.finish()
        ));
    }
    out.push_str(&format!(
        "# elapsed_s={} utilization={}\n",
        result.elapsed, result.utilization
    ));
    out
}

/// One event per line: `time,gpu,trial,start|finish`.
pub fn trace_csv(result: &MakespanResult) -> String {
    let mut out = String::from("time,gpu,trial,event\n");
    for e in &result.trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.time,
            gpu_list(&e.gpus),
            e.trial,
            e.kind.as_str()
        ));
    }
    out
}

/// Parses a hand-written schedule: `experiment,gpus,start_s,duration_s`
/// with gpus separated by `;`.
pub fn parse_schedule_csv(text: &str) -> Result<Schedule, String> {
    let mut assignments = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("experiment")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(format!("line {}: expected 4 fields", lineno + 1));
        }
        let bad = |what: &str| format!("line {}: bad {what}", lineno + 1);
        assignments.push(TrialAssignment {
            experiment: fields[0].parse().map_err(|_| bad("experiment"))?,
            gpus: fields[1]
                .split(';')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", lineno + 1))?,
            start: fields[2].parse().map_err(|_| bad("start"))?,
            duration: fields[3].parse().map_err(|_| bad("duration"))?,
        });
    }
    Ok(Schedule {
        strategy: StrategyKind::ExperimentParallel,
        assignments,
    })
}
