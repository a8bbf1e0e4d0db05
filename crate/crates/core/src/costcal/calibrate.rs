//! Fits the free parameters of the cost model to a reference table.
//!
//! Speedups are invariant to the absolute step time, so the search runs in
//! units of one compute step (`t_step_base = 1`) over five continuous
//! scalars (intra/inter hop latency, intra/inter volume term, trial
//! heterogeneity) and the integer grid size. The absolute step time is set
//! afterwards from the single-GPU data-parallel elapsed time.
//!
//! Search: a coarse grid over the continuous scalars for every grid size,
//! then pattern-search refinement of the best coarse points (plus seeded
//! random starts) for the most promising grid sizes.

use std::cell::Cell;
use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    predict_speedups, steps_per_epoch, CostError, CostParams, Heterogeneity, Method, ReferenceTable,
    DEFAULT_GPUS_PER_NODE, DEFAULT_SAMPLES_TRAIN,
};
use crate::clustersim::GroupPolicy;
use crate::hpgrid::{DEFAULT_EPOCHS, DEFAULT_PER_REPLICA_BATCH};

const DIMS: usize = 5;

/// Search box. Latencies and volume terms are in units of one compute step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBounds {
    pub grid_size: [usize; 2],
    pub latency_intra: [f64; 2],
    pub latency_inter: [f64; 2],
    pub volume_intra: [f64; 2],
    pub volume_inter: [f64; 2],
    pub heterogeneity: [f64; 2],
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self {
            grid_size: [4, 64],
            latency_intra: [0.0, 0.25],
            latency_inter: [0.0, 0.25],
            volume_intra: [0.0, 1.0],
            volume_inter: [0.0, 2.0],
            heterogeneity: [1.0, 1.95],
        }
    }
}

impl SearchBounds {
    fn lower(&self) -> [f64; DIMS] {
        [
            self.latency_intra[0],
            self.latency_inter[0],
            self.volume_intra[0],
            self.volume_inter[0],
            self.heterogeneity[0],
        ]
    }

    fn upper(&self) -> [f64; DIMS] {
        [
            self.latency_intra[1],
            self.latency_inter[1],
            self.volume_intra[1],
            self.volume_inter[1],
            self.heterogeneity[1],
        ]
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let [e_lo, e_hi] = self.grid_size;
        if e_lo == 0 || e_lo > e_hi {
            return Err(CostError::Input(format!("bad grid_size bounds [{e_lo}, {e_hi}]")));
        }
        for (lo, hi) in self.lower().into_iter().zip(self.upper()) {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(CostError::Input(format!("bad bounds [{lo}, {hi}]")));
            }
        }
        if self.heterogeneity[0] < 1.0 || self.heterogeneity[1] >= 2.0 {
            return Err(CostError::Input("heterogeneity bounds must lie in [1, 2)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, CostError> {
        let b: Self = toml::from_str(text).map_err(|e| CostError::Input(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub seed: u64,
    pub bounds: SearchBounds,
    pub gpus_per_node: usize,
    pub policy: GroupPolicy,
    pub samples_train: u64,
    pub epochs: u64,
    pub grad_bytes: u64,
    /// Grid sizes that get refined after the coarse pass.
    pub refine_grid_sizes: usize,
    /// Seeded random starts per refined grid size.
    pub random_starts: usize,
    pub max_evals_per_start: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bounds: SearchBounds::default(),
            gpus_per_node: DEFAULT_GPUS_PER_NODE,
            policy: GroupPolicy::Auto,
            samples_train: DEFAULT_SAMPLES_TRAIN,
            epochs: DEFAULT_EPOCHS,
            grad_bytes: super::default_grad_bytes(),
            refine_grid_sizes: 6,
            random_starts: 2,
            max_evals_per_start: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub method: Method,
    pub n: usize,
    pub reference_speedup: f64,
    pub predicted_speedup: f64,
    pub reference_elapsed_s: u64,
    pub predicted_elapsed_s: f64,
    /// (predicted - reference) / reference, on speedups.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub evaluations: usize,
    pub coarse_points_per_grid_size: usize,
    /// Best coarse objective for every grid size tried.
    pub coarse_best: Vec<(usize, f64)>,
    pub refined_grid_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub params: CostParams,
    pub residuals: Vec<Residual>,
    pub objective: f64,
    pub summary: SearchSummary,
}

impl CalibrationResult {
    pub fn max_abs_relative(&self) -> f64 {
        self.residuals.iter().map(|r| r.relative.abs()).fold(0.0, f64::max)
    }

    pub fn residuals_csv(&self) -> String {
        let mut out = String::from(
            "method,n,reference_speedup,predicted_speedup,relative_error,reference_elapsed_s,predicted_elapsed_s\n",
        );
        for r in &self.residuals {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{:.1}\n",
                r.method.as_str(),
                r.n,
                r.reference_speedup,
                r.predicted_speedup,
                r.relative,
                r.reference_elapsed_s,
                r.predicted_elapsed_s
            ));
        }
        out
    }
}

/// Candidate point: grid size plus the continuous scalars.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    objective: f64,
    grid_size: usize,
    x: [f64; DIMS],
}

impl Candidate {
    /// Objective first, then grid size, then parameters lexicographically,
    /// so the winner does not depend on evaluation order.
    fn order(&self, other: &Self) -> Ordering {
        self.objective
            .total_cmp(&other.objective)
            .then(self.grid_size.cmp(&other.grid_size))
            .then_with(|| {
                self.x
                    .iter()
                    .zip(&other.x)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
    }
}

struct Problem<'a> {
    reference: &'a ReferenceTable,
    config: &'a SearchConfig,
    gpu_counts: Vec<usize>,
}

impl Problem<'_> {
    /// Normalised parameters (`t_step_base = 1`).
    fn params(&self, grid_size: usize, x: &[f64; DIMS]) -> CostParams {
        let bytes = self.config.grad_bytes as f64;
        let beta = |vol: f64| if vol > 0.0 { bytes / vol } else { f64::INFINITY };
        CostParams {
            t_step_base: 1.0,
            sync_overhead_intra: x[0],
            sync_overhead_inter: x[1],
            beta_intra: beta(x[2]),
            beta_inter: beta(x[3]),
            grid_size,
            heterogeneity: Heterogeneity::Spread(x[4]),
            epochs: self.config.epochs,
            samples_train: self.config.samples_train,
            grad_bytes: self.config.grad_bytes,
        }
    }

    fn objective(&self, grid_size: usize, x: &[f64; DIMS]) -> f64 {
        let params = self.params(grid_size, x);
        let Ok(pred) = predict_speedups(&params, &self.gpu_counts, self.config.gpus_per_node, self.config.policy)
        else {
            return f64::INFINITY;
        };
        self.reference
            .rows()
            .iter()
            .zip(&pred)
            .map(|(row, &(dp, ep))| {
                let d = (dp - row.data_parallel.speedup) / row.data_parallel.speedup;
                let e = (ep - row.experiment_parallel.speedup) / row.experiment_parallel.speedup;
                d * d + e * e
            })
            .sum()
    }
}

fn clamp(x: &mut [f64; DIMS], lo: &[f64; DIMS], hi: &[f64; DIMS]) {
    for i in 0..DIMS {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Hooke-Jeeves pattern search inside the box.
fn pattern_search<F>(
    f: F,
    start: [f64; DIMS],
    lo: [f64; DIMS],
    hi: [f64; DIMS],
    max_evals: usize,
) -> (f64, [f64; DIMS], usize)
where
    F: Fn(&[f64; DIMS]) -> f64,
{
    let evals = Cell::new(0usize);
    let mut eval = |x: &[f64; DIMS]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let range: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
    let mut step: Vec<f64> = range.iter().map(|r| r / 8.0).collect();
    let min_step: Vec<f64> = range.iter().map(|r| r * 1e-13).collect();

    let mut base = start;
    clamp(&mut base, &lo, &hi);
    let mut f_base = eval(&base);

    let explore = |eval: &mut dyn FnMut(&[f64; DIMS]) -> f64, mut x: [f64; DIMS], mut fx: f64, step: &[f64]| {
        for i in 0..DIMS {
            if step[i] <= 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut trial = x;
                trial[i] = (x[i] + dir * step[i]).clamp(lo[i], hi[i]);
                if trial[i] == x[i] {
                    continue;
                }
                let ft = eval(&trial);
                if ft < fx {
                    x = trial;
                    fx = ft;
                    break;
                }
            }
        }
        (x, fx)
    };

    while evals.get() < max_evals {
        let (mut x, mut fx) = explore(&mut eval, base, f_base, &step);
        if fx < f_base {
            // keep extrapolating along the improving direction
            loop {
                let mut pattern = [0.0; DIMS];
                for i in 0..DIMS {
                    pattern[i] = 2.0 * x[i] - base[i];
                }
                clamp(&mut pattern, &lo, &hi);
                base = x;
                f_base = fx;
                if evals.get() >= max_evals {
                    break;
                }
                let f_pattern = eval(&pattern);
                let (x2, f2) = explore(&mut eval, pattern, f_pattern, &step);
                if f2 < f_base {
                    x = x2;
                    fx = f2;
                } else {
                    break;
                }
            }
        } else {
            let mut all_small = true;
            for i in 0..DIMS {
                step[i] *= 0.5;
                all_small &= step[i] <= min_step[i];
            }
            if all_small {
                break;
            }
        }
    }
    (f_base, base, evals.get())
}

fn coarse_points(lo: &[f64; DIMS], hi: &[f64; DIMS]) -> Vec<[f64; DIMS]> {
    // comm terms at 0, 10% and 40% of their range; heterogeneity at 5 levels
    let comm = [0.0, 0.1, 0.4];
    let het = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut points = Vec::with_capacity(comm.len().pow(4) * het.len());
    for &a in &comm {
        for &b in &comm {
            for &c in &comm {
                for &d in &comm {
                    for &h in &het {
                        let frac = [a, b, c, d, h];
                        let mut x = [0.0; DIMS];
                        for i in 0..DIMS {
                            x[i] = lo[i] + frac[i] * (hi[i] - lo[i]);
                        }
                        points.push(x);
                    }
                }
            }
        }
    }
    points
}

/// Fits cost parameters to `reference` by minimising the summed squared
/// relative speedup error over every entry of both methods.
pub fn calibrate(reference: &ReferenceTable, config: &SearchConfig) -> Result<CalibrationResult, CostError> {
    config.bounds.validate()?;
    if config.gpus_per_node == 0 {
        return Err(CostError::InvalidCount(0));
    }
    let problem = Problem {
        reference,
        config,
        gpu_counts: reference.gpu_counts(),
    };
    // every GPU count must map onto whole nodes
    for &n in &problem.gpu_counts {
        crate::clustersim::ClusterTopology::for_gpus(n, config.gpus_per_node)?;
    }
    let lo = config.bounds.lower();
    let hi = config.bounds.upper();
    let grid_sizes: Vec<usize> = (config.bounds.grid_size[0]..=config.bounds.grid_size[1]).collect();
    let points = coarse_points(&lo, &hi);

    // coarse pass: best two points per grid size
    let coarse: Vec<Vec<Candidate>> = grid_sizes
        .par_iter()
        .map(|&e| {
            let mut c: Vec<Candidate> = points
                .iter()
                .map(|x| Candidate {
                    objective: problem.objective(e, x),
                    grid_size: e,
                    x: *x,
                })
                .collect();
            c.sort_by(Candidate::order);
            c.truncate(2);
            c
        })
        .collect();
    let mut evaluations = grid_sizes.len() * points.len();
    let coarse_best: Vec<(usize, f64)> = coarse.iter().map(|c| (c[0].grid_size, c[0].objective)).collect();

    let mut ranked: Vec<&Vec<Candidate>> = coarse.iter().collect();
    ranked.sort_by(|a, b| a[0].order(&b[0]));
    ranked.truncate(config.refine_grid_sizes.max(1));

    let mut starts: Vec<(usize, [f64; DIMS])> = Vec::new();
    for cands in &ranked {
        let e = cands[0].grid_size;
        starts.extend(cands.iter().map(|c| (e, c.x)));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(e as u64);
        for _ in 0..config.random_starts {
            let mut x = [0.0; DIMS];
            for i in 0..DIMS {
                x[i] = if hi[i] > lo[i] {
                    rng.gen_range(lo[i]..=hi[i])
                } else {
                    lo[i]
                };
            }
            starts.push((e, x));
        }
    }
    let refined: Vec<(Candidate, usize)> = starts
        .par_iter()
        .map(|&(e, x0)| {
            let (objective, x, evals) =
                pattern_search(|x| problem.objective(e, x), x0, lo, hi, config.max_evals_per_start);
            (
                Candidate {
                    objective,
                    grid_size: e,
                    x,
                },
                evals,
            )
        })
        .collect();
    evaluations += refined.iter().map(|r| r.1).sum::<usize>();

    let best = refined
        .iter()
        .map(|r| r.0)
        .chain(coarse.iter().map(|c| c[0]))
        .min_by(Candidate::order)
        .expect("at least one candidate");

    let mut params = problem.params(best.grid_size, &best.x);
    // rescale from step units to seconds using the single-GPU baseline
    let steps1 = steps_per_epoch(config.samples_train, DEFAULT_PER_REPLICA_BATCH, 1) as f64;
    let t_step =
        reference.baseline().data_parallel.elapsed_s as f64 / (best.grid_size as f64 * config.epochs as f64 * steps1);
    params.t_step_base = t_step;
    params.sync_overhead_intra *= t_step;
    params.sync_overhead_inter *= t_step;
    params.beta_intra /= t_step;
    params.beta_inter /= t_step;

    let table = super::predict_table(&params, &problem.gpu_counts, config.gpus_per_node, config.policy)?;
    let mut residuals = Vec::with_capacity(2 * table.rows.len());
    for method in Method::ALL {
        for (row, pred) in reference.rows().iter().zip(&table.rows) {
            let r = row.get(method);
            let p = pred.speedup(method);
            residuals.push(Residual {
                method,
                n: row.n,
                reference_speedup: r.speedup,
                predicted_speedup: p,
                reference_elapsed_s: r.elapsed_s,
                predicted_elapsed_s: pred.elapsed(method),
                relative: (p - r.speedup) / r.speedup,
            });
        }
    }
    Ok(CalibrationResult {
        params,
        residuals,
        objective: best.objective,
        summary: SearchSummary {
            evaluations,
            coarse_points_per_grid_size: points.len(),
            coarse_best,
            refined_grid_sizes: ranked.iter().map(|c| c[0].grid_size).collect(),
        },
    })
}
