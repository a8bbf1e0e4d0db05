//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmis::archmodel::{
    build_unet3d, convention_search, count_params, propagate_shapes, ArchError, TensorShape, UNetOptions,
    REFERENCE_PARAM_TOTAL,
};
use dmis::clustersim::{plan_data_parallel, plan_experiment_parallel, simulate, speedup, ClusterTopology, GroupPolicy};
use dmis::costcal::reference::Measurement;
use dmis::costcal::{
    calibrate, default_grad_bytes, parse_hms, predict_table, CostParams, Heterogeneity, Method, ReferenceRow,
    ReferenceTable, SearchConfig, REFERENCE_GPU_COUNTS,
};
use dmis::datapipe::{
    pack_records, preprocess, read_records, split_dataset, synth_dataset, CropMode, DataError, SplitConfig,
    DEFAULT_RATIOS,
};
use dmis::hpgrid::{placeholder_grid, scale_global_batch, scale_lr};
use dmis::lossmath::{dice_loss, dice_loss_grad, grad_check, quadratic_dice_loss, SmoothingEpsilon, VolumePair};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn table_reproduction() -> Outcome {
    let start = Instant::now();
    let reference = ReferenceTable::bundled();
    let fit = calibrate(&reference, &SearchConfig::default()).map_err(|e| e.to_string())?;
    let table = predict_table(&fit.params, &reference.gpu_counts(), 4, GroupPolicy::Auto).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for (r, p) in reference.rows().iter().zip(&table.rows) {
        for m in Method::ALL {
            let rel = (p.speedup(m) - r.get(m).speedup).abs() / r.get(m).speedup;
            worst = worst.max(rel);
            check(
                rel <= 0.15,
                format!(
                    "n={} {}: predicted {:.3} vs {}",
                    r.n,
                    m.as_str(),
                    p.speedup(m),
                    r.get(m).speedup
                ),
            )?;
        }
        if r.n >= 2 {
            check(
                p.ep_speedup > p.dp_speedup,
                format!(
                    "n={}: experiment-parallel {:.3} not above data-parallel {:.3}",
                    r.n, p.ep_speedup, p.dp_speedup
                ),
            )?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "14 entries, worst relative error {:.2}%, EP > DP for n >= 2, E = {}, {secs:.1} s",
        worst * 100.0,
        fit.params.grid_size
    ))
}

fn speedup_arithmetic() -> Outcome {
    let s = |a: &str, b: &str| speedup(parse_hms(a).unwrap() as f64, parse_hms(b).unwrap() as f64).unwrap();
    let dp = s("44:18:02", "3:21:44");
    let ep = s("44:20:19", "2:55:06");
    check((dp - 13.18).abs() <= 0.01, format!("data-parallel {dp}"))?;
    check((ep - 15.19).abs() <= 0.01, format!("experiment-parallel {ep}"))?;
    Ok(format!("{dp:.4} and {ep:.4}"))
}

fn parameter_count() -> Outcome {
    let desc = build_unet3d(UNetOptions::default()).map_err(|e| e.to_string())?;
    let total = count_params(&desc, true).map_err(|e| e.to_string())?.total;
    check(total == 352_513, format!("default descriptor counts {total}"))?;
    let search = convention_search(UNetOptions::default(), REFERENCE_PARAM_TOTAL).map_err(|e| e.to_string())?;
    let best = search[0];
    check(
        best.delta != 0 || best.total == REFERENCE_PARAM_TOTAL,
        "inconsistent search",
    )?;
    if best.delta == 0 {
        return Ok(format!("exact match under {best:?}"));
    }
    check(
        best.total == 409_192 && best.delta == 2_399,
        format!("closest convention moved: {best:?}"),
    )?;
    Ok(format!(
        "no convention gives {REFERENCE_PARAM_TOTAL}; default {total}, closest {} (delta +{}) as documented",
        best.total, best.delta
    ))
}

fn shape_contract() -> Outcome {
    let desc = build_unet3d(UNetOptions::default()).map_err(|e| e.to_string())?;
    let shapes = propagate_shapes(&desc, TensorShape::new(4, 240, 240, 152).unwrap()).map_err(|e| e.to_string())?;
    let out = *shapes.last().unwrap();
    check(
        out == TensorShape::new(1, 240, 240, 152).unwrap(),
        format!("output {out}"),
    )?;
    match propagate_shapes(&desc, TensorShape::new(4, 240, 240, 155).unwrap()) {
        Err(ArchError::Shape {
            name,
            axis: 2,
            size: 155,
            ..
        }) if name == "pool1" => {}
        other => return Err(format!("155-deep input gave {other:?}")),
    }
    Ok("(4,240,240,152) -> (1,240,240,152); depth 155 rejected at pool1".into())
}

fn dice_correctness() -> Outcome {
    let start = Instant::now();
    let eps = SmoothingEpsilon::default();
    let s4 = [4usize];
    let ones = [1.0f64; 4];
    let halves = [0.5f64; 4];
    let zeros = [0.0f64; 4];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;

    let pair = VolumePair::new(&ones, &s4, &ones, &s4).unwrap();
    check(close(dice_loss(&pair, eps), 0.0), "perfect match")?;
    for g in dice_loss_grad(&pair, eps) {
        check(close(g, -(2.0 * 8.1 - 8.1) / (8.1 * 8.1)), format!("gradient {g}"))?;
    }
    check(close(quadratic_dice_loss(&pair, eps), 0.0), "quadratic perfect match")?;
    let pair = VolumePair::new(&halves, &s4, &ones, &s4).unwrap();
    check(close(dice_loss(&pair, eps), 1.0 - 4.1 / 6.1), "half prediction")?;
    check(
        close(quadratic_dice_loss(&pair, eps), 1.0 - 4.1 / 5.1),
        "quadratic half prediction",
    )?;
    let pair = VolumePair::new(&zeros, &s4, &zeros, &s4).unwrap();
    check(close(dice_loss(&pair, eps), 0.0), "empty volumes")?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f64;
    for case in 0..100 {
        let shape = [rng.gen_range(1..5usize), rng.gen_range(1..5), rng.gen_range(1..5)];
        let n: usize = shape.iter().product();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let pair = VolumePair::new(&pred, &shape, &truth, &shape).unwrap();
        let g = grad_check(&pair, eps, 1e-6);
        worst = worst.max(g.max_rel);
        check(
            g.max_rel < 1e-5,
            format!("case {case}: relative deviation {:.3e}", g.max_rel),
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("gradient suite took {secs:.1} s"))?;
    Ok(format!(
        "closed forms exact to 1e-12; 100 gradient checks, worst relative {worst:.2e}"
    ))
}

fn scaling_rules() -> Outcome {
    for n in 1..=32i64 {
        check(
            scale_global_batch(2, n) == Ok(2 * n as u64),
            format!("global batch at n={n}"),
        )?;
        check(
            scale_lr(1e-4, n) == Ok(1e-4 * n as f64),
            format!("learning rate at n={n}"),
        )?;
    }
    Ok("batch 2n and lr 1e-4 n for n = 1..32".into())
}

fn pipeline_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let raw = synth_dataset(16, [16, 16, 20], 42, 2).map_err(|e| e.to_string())?;
    let samples: Vec<_> = raw
        .iter()
        .map(|v| preprocess(v, 16, CropMode::Leading))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut first: Option<Vec<u8>> = None;
    let mut manifest = None;
    for workers in [1, 2, 4, 8] {
        let path = dir.path().join(format!("w{workers}.dmis"));
        let m = pack_records(&samples, workers, &path, SplitConfig::default()).map_err(|e| e.to_string())?;
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        match &first {
            None => first = Some(bytes),
            Some(b) => check(*b == bytes, format!("workers={workers} output differs"))?,
        }
        if workers == 1 {
            let back = read_records(&path, &m).map_err(|e| e.to_string())?;
            check(back == samples, "round-trip is not bit-exact")?;
            manifest = Some(m);
        }
    }
    let m = manifest.unwrap();
    let path = dir.path().join("w1.dmis");
    let mut bytes = first.unwrap();
    let e = &m.entries[7];
    bytes[(e.offset + e.length - 100) as usize] ^= 0x01;
    fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    match read_records(&path, &m) {
        Err(DataError::CorruptRecord { id }) if id == e.id => {}
        other => return Err(format!("corrupted byte gave {:?}", other.map(|v| v.len()))),
    }
    Ok(format!(
        "workers 1/2/4/8 byte-identical ({} bytes), round-trip exact, corruption names {}",
        bytes.len(),
        e.id
    ))
}

fn scheduler_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shapes = [(1, 1), (1, 2), (2, 1), (1, 3), (1, 4), (2, 2), (4, 1)];
    for case in 0..200 {
        let (nodes, per_node) = shapes[rng.gen_range(0..shapes.len())];
        let n = nodes * per_node;
        let e = rng.gen_range(1..=6usize);
        // quarter-second grid so ties occur
        let durations: Vec<f64> = (0..e).map(|_| rng.gen_range(1..=40) as f64 * 0.25).collect();
        let policy = if rng.gen_bool(0.5) {
            GroupPolicy::Auto
        } else {
            GroupPolicy::Fixed(rng.gen_range(1..=n))
        };
        let topo = ClusterTopology {
            node_count: nodes,
            gpus_per_node: per_node,
            ..ClusterTopology::v100_nodes(1)
        };
        let specs = placeholder_grid(e);
        let ep = plan_experiment_parallel(&specs, &topo, policy, |s, _| durations[s.id]).map_err(|e| e.to_string())?;
        let got = simulate(&ep, &topo).map_err(|e| e.to_string())?.elapsed;
        let want = common::greedy_makespan(nodes, per_node, policy.group_size(n, e), &durations);
        check(
            got == want,
            format!("case {case}: {nodes}x{per_node} {policy:?} {durations:?}: {got} vs {want}"),
        )?;
        let dp = plan_data_parallel(&specs, &topo, |s, _| durations[s.id]).map_err(|e| e.to_string())?;
        let got = simulate(&dp, &topo).map_err(|e| e.to_string())?.elapsed;
        check(
            got == common::serial_makespan(&durations),
            format!("case {case}: serial makespan {got}"),
        )?;
    }
    Ok("200 seeded cases match the brute-force greedy re-enactment exactly".into())
}

fn calibration_self_consistency() -> Outcome {
    let bytes = default_grad_bytes() as f64;
    let t = 0.35;
    let truth = CostParams {
        t_step_base: t,
        sync_overhead_intra: 0.02 * t,
        sync_overhead_inter: 0.08 * t,
        beta_intra: bytes / (0.05 * t),
        beta_inter: bytes / (0.5 * t),
        grid_size: 20,
        heterogeneity: Heterogeneity::Spread(1.25),
        ..Default::default()
    };
    let table = predict_table(&truth, &REFERENCE_GPU_COUNTS, 4, GroupPolicy::Auto).map_err(|e| e.to_string())?;
    let m = |elapsed: f64, speedup: f64| Measurement {
        elapsed_s: elapsed.round() as u64,
        speedup,
    };
    let reference = ReferenceTable::new(
        table
            .rows
            .iter()
            .map(|r| ReferenceRow {
                n: r.n,
                data_parallel: m(r.dp_elapsed, r.dp_speedup),
                experiment_parallel: m(r.ep_elapsed, r.ep_speedup),
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let fit = calibrate(&reference, &SearchConfig::default()).map_err(|e| e.to_string())?;
    let worst = fit.max_abs_relative();
    check(worst < 1e-6, format!("worst relative error {worst:.3e}"))?;
    Ok(format!(
        "synthetic table (E = 20) recovered, worst relative error {worst:.1e}"
    ))
}

fn split_rule() -> Outcome {
    let s = split_dataset(484, DEFAULT_RATIOS, 0).map_err(|e| e.to_string())?;
    check(s.sizes() == (338, 72, 74), format!("sizes {:?}", s.sizes()))?;
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    check(all == (0..484).collect::<Vec<_>>(), "splits overlap or miss indices")?;
    Ok("484 -> (338, 72, 74), disjoint and covering".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("table reproduction", table_reproduction),
        ("speedup arithmetic", speedup_arithmetic),
        ("parameter count", parameter_count),
        ("shape contract", shape_contract),
        ("dice loss correctness", dice_correctness),
        ("scaling rules", scaling_rules),
        ("pipeline determinism", pipeline_determinism),
        ("scheduler oracle equivalence", scheduler_oracle),
        ("calibration self-consistency", calibration_self_consistency),
        ("split rule", split_rule),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
