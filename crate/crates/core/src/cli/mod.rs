//! `dmis` command line: argument parsing, dispatch and exit codes.
//!
//! Exit status is 0 on success, 1 on a domain error (one line on stderr
//! naming the failing operation) and 2 on a usage error.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::archmodel::{
    build_unet3d, convention_search, count_params, layer_csv, layer_table, propagate_shapes, ArchError, TensorShape,
    TransposedWidth, UNetOptions, REFERENCE_PARAM_TOTAL,
};
use crate::clustersim::{
    parse_schedule_csv, plan_data_parallel, plan_experiment_parallel, result_csv, simulate, trace_csv, ClusterTopology,
    GroupPolicy, SimError, GIB,
};
use crate::costcal::{
    calibrate, predict_table, trial_duration, CostError, CostParams, Heterogeneity, ReferenceTable, SearchBounds,
    SearchConfig,
};
use crate::datapipe::{pack_records, preprocess, synth_dataset, CropMode, DataError, SplitConfig};
use crate::hpgrid::{
    cross_product, placeholder_grid, specs_to_csv, ExperimentSpec, GridError, BATCH_AXIS, EPOCHS_AXIS, LR_AXIS,
};
use crate::lossmath::{grad_check, LossError, SmoothingEpsilon, VolumePair};

pub use config::RunConfig;
pub use report::{emit_plot_data, memory_feasibility_check, Feasibility, Report};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Check(String),
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "dmis",
    version,
    about = "Distributed 3D U-Net hyper-parameter search: models and simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    DataParallel,
    ExperimentParallel,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Width {
    Halved,
    Preserved,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand the `[grid]` section into experiment specs (CSV).
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// GPU count used for the global batch and scaled learning rate.
        #[arg(long, default_value_t = 1)]
        gpus: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer table, shapes and parameter counts of the 3D U-Net.
    Arch {
        #[arg(long, default_value_t = 8)]
        base_filters: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        in_channels: usize,
        #[arg(long, default_value_t = 1)]
        out_channels: usize,
        #[arg(long)]
        no_bias: bool,
        #[arg(long, value_enum, default_value_t = Width::Halved)]
        transposed_width: Width,
        /// Leave batchnorm moving mean/variance out of the count.
        #[arg(long)]
        trainable_only: bool,
        /// Input shape `C,H,W,D`.
        #[arg(long, default_value = "4,240,240,152")]
        input: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// List every counting convention against the reference total.
        #[arg(long)]
        conventions: bool,
        /// Check training memory for this per-replica batch.
        #[arg(long)]
        batch: Option<u64>,
        #[arg(long, default_value_t = 16)]
        gpu_memory_gib: u64,
    },
    /// Compare analytic and finite-difference Dice gradients.
    DiceCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Voxels per random volume.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Largest acceptable relative deviation.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Synthesize, preprocess and pack volumes into a record file.
    Pack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Spatial dims `H,W,D`.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Train/val/test ratios `a,b,c`.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        crop: Option<CropMode>,
        #[arg(long)]
        target_depth: Option<usize>,
        #[arg(long)]
        blobs: Option<usize>,
        /// Record file path; defaults to `<out-dir>/dataset.dmis`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Plan and simulate the hyper-parameter batch on a cluster.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        gpus_per_node: Option<usize>,
        #[arg(long, value_enum, default_value_t = Strategy::Both)]
        strategy: Strategy,
        /// Experiments when the config has no `[grid]`; defaults to the
        /// cost model's grid size.
        #[arg(long)]
        grid_size: Option<usize>,
        /// Cost parameters (TOML), e.g. the output of `calibrate`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// GPUs per trial: `auto` or a positive integer.
        #[arg(long, default_value = "auto")]
        policy: GroupPolicy,
        /// Replay a hand-written schedule (`experiment,gpus,start_s,duration_s`).
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit the cost model to a reference table.
    Calibrate {
        /// `bundled` or a CSV of `method,n,elapsed_s,speedup`.
        #[arg(long, default_value = "bundled")]
        reference: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Search bounds (TOML).
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        policy: GroupPolicy,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Elapsed/speedup tables and plot data for reference and model.
    Report {
        #[arg(long, default_value = "bundled")]
        reference: String,
        /// Cost parameters (TOML) to add predictions and residuals.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        policy: GroupPolicy,
        #[arg(long, default_value_t = 4)]
        gpus_per_node: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Grid { .. } => "grid",
            Command::Arch { .. } => "arch",
            Command::DiceCheck { .. } => "dice-check",
            Command::Pack { .. } => "pack",
            Command::Simulate { .. } => "simulate",
            Command::Calibrate { .. } => "calibrate",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(text: &str, what: &str) -> Result<[T; N], CliError> {
    let items: Vec<T> = text
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("{what} `{text}` is not a list of {N} numbers")))?;
    items
        .try_into()
        .map_err(|_| CliError::Config(format!("{what} `{text}` needs exactly {N} values")))
}

fn load_reference(spec: &str) -> Result<ReferenceTable, CliError> {
    if spec == "bundled" {
        Ok(ReferenceTable::bundled())
    } else {
        Ok(ReferenceTable::from_csv(&read_text(Path::new(spec))?)?)
    }
}

fn load_params(path: Option<&Path>, config: &RunConfig) -> Result<CostParams, CliError> {
    match path {
        Some(p) => Ok(CostParams::from_toml(&read_text(p)?)?),
        None => Ok(config.cost.clone().unwrap_or_default()),
    }
}

/// Experiment specs from the config grid, with training defaults filled in
/// for anything the grid does not override.
fn config_specs(config: &RunConfig) -> Result<Option<Vec<ExperimentSpec>>, CliError> {
    let Some(space) = config.hyper_space()? else {
        return Ok(None);
    };
    let t = &config.training;
    let mut specs = cross_product(&space)?;
    for s in &mut specs {
        if !s.assignment.contains_key(BATCH_AXIS) {
            s.per_replica_batch = t.per_replica_batch;
        }
        if !s.assignment.contains_key(LR_AXIS) {
            s.base_lr = t.base_lr;
        }
        if !s.assignment.contains_key(EPOCHS_AXIS) {
            s.epochs = t.epochs;
        }
    }
    Ok(Some(specs))
}

fn cmd_grid(config: &Path, gpus: u64, out: Option<PathBuf>) -> Result<String, CliError> {
    let cfg = RunConfig::load(Some(config))?;
    let space = cfg
        .hyper_space()?
        .ok_or_else(|| CliError::Config("config has no [grid] section".into()))?;
    let specs = config_specs(&cfg)?.expect("grid present");
    let csv = specs_to_csv(&space, &specs, gpus)?;
    match out {
        Some(path) => {
            write_text(&path, &csv)?;
            Ok(format!("{} experiments written to {}\n", specs.len(), path.display()))
        }
        None => Ok(csv),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_arch(
    opts: UNetOptions,
    bn_running_stats: bool,
    input: &str,
    format: Format,
    conventions: bool,
    batch: Option<u64>,
    gpu_memory_gib: u64,
) -> Result<String, CliError> {
    let desc = build_unet3d(opts)?;
    let [c, d0, d1, d2] = parse_list::<usize, 4>(input, "input shape")?;
    let input = TensorShape::new(c, d0, d1, d2)?;
    let shapes = propagate_shapes(&desc, input)?;
    let params = count_params(&desc, bn_running_stats)?;
    let mut out = match format {
        Format::Text => layer_table(&desc, &shapes, &params),
        Format::Csv => layer_csv(&desc, &shapes, &params),
        Format::Json => serde_json::to_string_pretty(&params).expect("breakdown serializes") + "\n",
    };
    if conventions {
        out.push_str(&format!(
            "\nconventions vs {REFERENCE_PARAM_TOTAL}:\nbias,bn_running_stats,transposed_width,total,delta\n"
        ));
        for cv in convention_search(opts, REFERENCE_PARAM_TOTAL)? {
            let width = match cv.transposed_width {
                TransposedWidth::Halved => "halved",
                TransposedWidth::Preserved => "preserved",
            };
            out.push_str(&format!(
                "{},{},{width},{},{}\n",
                cv.bias, cv.bn_running_stats, cv.total, cv.delta
            ));
        }
    }
    if let Some(batch) = batch {
        let topo = ClusterTopology {
            gpu_memory_bytes: gpu_memory_gib * GIB,
            ..ClusterTopology::v100_nodes(1)
        };
        let f = memory_feasibility_check(&desc, input, batch, &topo)?;
        out.push_str(&format!(
            "\nmemory: {} (estimate {} B, capacity {} B, headroom {} B)\n",
            if f.fits { "pass" } else { "fail" },
            f.estimate_bytes,
            f.capacity_bytes,
            f.headroom_bytes
        ));
    }
    Ok(out)
}

fn cmd_dice_check(seed: u64, cases: usize, size: usize, epsilon: f64, tolerance: f64) -> Result<String, CliError> {
    if cases == 0 || size == 0 {
        return Err(CliError::Check("cases and size must be at least 1".into()));
    }
    let eps = SmoothingEpsilon::new(epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [size];
    let (mut max_abs, mut max_rel) = (0f64, 0f64);
    for _ in 0..cases {
        let pred: Vec<f64> = (0..size).map(|_| rng.gen_range(0.01..0.99)).collect();
        let truth: Vec<f64> = (0..size).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
        let pair = VolumePair::new(&pred, &shape, &truth, &shape)?;
        let g = grad_check(&pair, eps, 1e-6);
        max_abs = max_abs.max(g.max_abs);
        max_rel = max_rel.max(g.max_rel);
    }
    let line = format!("cases={cases} size={size} max_abs={max_abs:.3e} max_rel={max_rel:.3e}\n");
    if max_rel > tolerance {
        return Err(CliError::Check(format!(
            "gradient deviation {max_rel:.3e} exceeds {tolerance:.1e}"
        )));
    }
    Ok(line)
}

#[allow(clippy::too_many_arguments)]
fn cmd_pack(
    config: Option<&Path>,
    count: Option<usize>,
    dims: Option<String>,
    seed: Option<u64>,
    workers: Option<usize>,
    ratios: Option<String>,
    crop: Option<CropMode>,
    target_depth: Option<usize>,
    blobs: Option<usize>,
    output: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> Result<String, CliError> {
    let cfg = RunConfig::load(config)?;
    let mut d = cfg.data.clone();
    if let Some(v) = count {
        d.count = v;
    }
    if let Some(v) = dims {
        d.dims = parse_list(&v, "dims")?;
    }
    if let Some(v) = seed {
        d.seed = v;
    }
    if let Some(v) = workers {
        d.workers = v;
    }
    if let Some(v) = ratios {
        d.ratios = parse_list(&v, "ratios")?;
    }
    if let Some(v) = crop {
        d.crop = v;
    }
    if target_depth.is_some() {
        d.target_depth = target_depth;
    }
    if let Some(v) = blobs {
        d.blobs = v;
    }
    let path = match output {
        Some(p) => p,
        None => {
            let dir = cfg.out_dir(out_dir);
            report::ensure_dir(&dir)?;
            dir.join("dataset.dmis")
        }
    };
    let depth = d.effective_depth();
    let raw = synth_dataset(d.count, d.dims, d.seed, d.blobs)?;
    let samples = raw
        .iter()
        .map(|v| preprocess(v, depth, d.crop))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = pack_records(
        &samples,
        d.workers,
        &path,
        SplitConfig {
            ratios: d.ratios,
            seed: d.seed,
        },
    )?;
    let bytes = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    Ok(format!(
        "packed {} records ({} bytes, sample shape 4x{}x{}x{}) into {}\n",
        manifest.entries.len(),
        bytes,
        d.dims[0],
        d.dims[1],
        depth,
        path.display()
    ))
}

/// Per-spec durations at `width`, resolved up front so cost-model errors
/// surface with their own message.
fn durations(
    params: &CostParams,
    specs: &[ExperimentSpec],
    width: usize,
    gpus_per_node: usize,
) -> Result<Vec<f64>, CliError> {
    let topo = ClusterTopology {
        gpus_per_node,
        ..ClusterTopology::v100_nodes(1)
    };
    specs
        .iter()
        .map(|s| Ok(trial_duration(params, s, width as i64, &topo)?))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: Option<&Path>,
    nodes: Option<usize>,
    gpus_per_node: Option<usize>,
    strategy: Strategy,
    grid_size: Option<usize>,
    params: Option<&Path>,
    policy: GroupPolicy,
    schedule: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> Result<String, CliError> {
    let cfg = RunConfig::load(config)?;
    let topo = ClusterTopology {
        node_count: nodes.unwrap_or(cfg.topology.nodes),
        gpus_per_node: gpus_per_node.unwrap_or(cfg.topology.gpus_per_node),
        gpu_memory_bytes: cfg.topology.gpu_memory_gib * GIB,
        ..ClusterTopology::v100_nodes(1)
    };
    topo.validate()?;
    let dir = cfg.out_dir(out_dir);
    report::ensure_dir(&dir)?;
    let mut summary = String::new();
    let mut emit = |tag: &str, result: &crate::clustersim::MakespanResult| -> Result<(), CliError> {
        write_text(&dir.join(format!("makespan_{tag}.csv")), &result_csv(result))?;
        write_text(&dir.join(format!("trace_{tag}.csv")), &trace_csv(result))?;
        summary.push_str(&format!(
            "{tag}: elapsed {:.1} s, utilization {:.4}, {} trials on {} GPUs\n",
            result.elapsed,
            result.utilization,
            result.assignments.len(),
            topo.total_gpus()
        ));
        Ok(())
    };

    if let Some(path) = schedule {
        let plan = parse_schedule_csv(&read_text(path)?).map_err(CliError::Config)?;
        emit("schedule", &simulate(&plan, &topo)?)?;
        return Ok(summary);
    }

    let mut params = load_params(params, &cfg)?;
    let specs = match config_specs(&cfg)? {
        Some(specs) => specs,
        None => placeholder_grid(grid_size.unwrap_or(params.grid_size)),
    };
    if matches!(params.heterogeneity, Heterogeneity::Spread(_)) {
        params.grid_size = specs.len();
    }
    let n = topo.total_gpus();
    if matches!(strategy, Strategy::DataParallel | Strategy::Both) {
        let d = durations(&params, &specs, n, topo.gpus_per_node)?;
        let plan = plan_data_parallel(&specs, &topo, |s, _| d[s.id])?;
        emit("data_parallel", &simulate(&plan, &topo)?)?;
    }
    if matches!(strategy, Strategy::ExperimentParallel | Strategy::Both) {
        let width = policy.group_size(n, specs.len());
        let d = durations(&params, &specs, width, topo.gpus_per_node)?;
        let plan = plan_experiment_parallel(&specs, &topo, policy, |s, _| d[s.id])?;
        emit("experiment_parallel", &simulate(&plan, &topo)?)?;
    }
    Ok(summary)
}

fn cmd_calibrate(
    reference: &str,
    seed: u64,
    bounds: Option<&Path>,
    policy: GroupPolicy,
    out_dir: Option<PathBuf>,
) -> Result<String, CliError> {
    let reference = load_reference(reference)?;
    let bounds = match bounds {
        Some(p) => SearchBounds::from_toml(&read_text(p)?)?,
        None => SearchBounds::default(),
    };
    let config = SearchConfig {
        seed,
        bounds,
        policy,
        ..Default::default()
    };
    let fit = calibrate(&reference, &config)?;
    let dir = RunConfig::default().out_dir(out_dir);
    report::ensure_dir(&dir)?;
    write_text(&dir.join("fitted_params.toml"), &fit.params.to_toml())?;
    write_text(&dir.join("residuals.csv"), &fit.residuals_csv())?;
    Ok(format!(
        "grid_size={} objective={:.6e} max_rel_error={:.4} evaluations={}\nwrote {} and {}\n",
        fit.params.grid_size,
        fit.objective,
        fit.max_abs_relative(),
        fit.summary.evaluations,
        dir.join("fitted_params.toml").display(),
        dir.join("residuals.csv").display()
    ))
}

fn cmd_report(
    reference: &str,
    params: Option<&Path>,
    policy: GroupPolicy,
    gpus_per_node: usize,
    out_dir: Option<PathBuf>,
) -> Result<String, CliError> {
    let reference = load_reference(reference)?;
    let mut report = Report::from_reference(&reference);
    if let Some(path) = params {
        let params = CostParams::from_toml(&read_text(path)?)?;
        let table = predict_table(&params, &reference.gpu_counts(), gpus_per_node, policy)?;
        report = report.with_prediction(&table)?;
    }
    let dir = RunConfig::default().out_dir(out_dir);
    report::ensure_dir(&dir)?;
    let csv = report.to_csv();
    write_text(&dir.join("report.csv"), &csv)?;
    emit_plot_data(&report, &dir)?;
    Ok(csv)
}

fn dispatch(command: Command) -> Result<String, CliError> {
    match command {
        Command::Grid { config, gpus, out } => cmd_grid(&config, gpus, out),
        Command::Arch {
            base_filters,
            steps,
            in_channels,
            out_channels,
            no_bias,
            transposed_width,
            trainable_only,
            input,
            format,
            conventions,
            batch,
            gpu_memory_gib,
        } => {
            let opts = UNetOptions {
                base_filters,
                steps,
                in_channels,
                out_channels,
                bias: !no_bias,
                transposed_width: match transposed_width {
                    Width::Halved => TransposedWidth::Halved,
                    Width::Preserved => TransposedWidth::Preserved,
                },
            };
            cmd_arch(
                opts,
                !trainable_only,
                &input,
                format,
                conventions,
                batch,
                gpu_memory_gib,
            )
        }
        Command::DiceCheck {
            seed,
            cases,
            size,
            epsilon,
            tolerance,
        } => cmd_dice_check(seed, cases, size, epsilon, tolerance),
        Command::Pack {
            config,
            count,
            dims,
            seed,
            workers,
            ratios,
            crop,
            target_depth,
            blobs,
            output,
            out_dir,
        } => cmd_pack(
            config.as_deref(),
            count,
            dims,
            seed,
            workers,
            ratios,
            crop,
            target_depth,
            blobs,
            output,
            out_dir,
        ),
        Command::Simulate {
            config,
            nodes,
            gpus_per_node,
            strategy,
            grid_size,
            params,
            policy,
            schedule,
            out_dir,
        } => cmd_simulate(
            config.as_deref(),
            nodes,
            gpus_per_node,
            strategy,
            grid_size,
            params.as_deref(),
            policy,
            schedule.as_deref(),
            out_dir,
        ),
        Command::Calibrate {
            reference,
            seed,
            bounds,
            policy,
            out_dir,
        } => cmd_calibrate(&reference, seed, bounds.as_deref(), policy, out_dir),
        Command::Report {
            reference,
            params,
            policy,
            gpus_per_node,
            out_dir,
        } => cmd_report(&reference, params.as_deref(), policy, gpus_per_node, out_dir),
    }
}

/// Runs one command, writing normal output to `stdout` and diagnostics to
/// `stderr`. Returns the process exit status.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let op = cli.command.name();
    match dispatch(cli.command) {
        Ok(out) => {
            let _ = stdout.write_all(out.as_bytes());
            0
        }
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            let _ = writeln!(stderr, "error: {op}: {msg}");
            1
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(std::iter::once("dmis").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        let (code, _, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"), "{err}");
        assert_eq!(run_capture(&["arch", "--steps", "x"]).0, 2);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn domain_error_is_one_line() {
        let (code, _, err) = run_capture(&["arch", "--input", "4,240,240,155"]);
        assert_eq!(code, 1);
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("error: arch: "), "{err}");
        assert!(err.contains("pool1"), "{err}");
    }

    #[test]
    fn dice_check_passes() {
        let (code, out, _) = run_capture(&["dice-check", "--cases", "10"]);
        assert_eq!(code, 0);
        assert!(out.starts_with("cases=10"));
    }

    #[test]
    fn parse_list_errors() {
        assert_eq!(parse_list::<usize, 3>("1, 2,3", "dims").unwrap(), [1, 2, 3]);
        assert!(parse_list::<usize, 3>("1,2", "dims").is_err());
        assert!(parse_list::<usize, 3>("1,a,3", "dims").is_err());
    }
}
