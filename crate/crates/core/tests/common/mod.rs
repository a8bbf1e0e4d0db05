//! Independent re-enactment of the scheduling policies, written without
//! reference to the library's planner or event engine.

#![allow(dead_code)]

use dmis::clustersim::GpuId;

/// GPU groups of `size`: whole groups inside each node when they fit,
/// otherwise consecutive GPUs in node-major order.
pub fn groups(nodes: usize, per_node: usize, size: usize) -> Vec<Vec<GpuId>> {
    let mut out = Vec::new();
    if size <= per_node {
        for node in 0..nodes {
            let mut slot = 0;
            while slot + size <= per_node {
                out.push((slot..slot + size).map(|s| GpuId { node, slot: s }).collect());
                slot += size;
            }
        }
    } else {
        let all: Vec<GpuId> = (0..nodes)
            .flat_map(|node| (0..per_node).map(move |slot| GpuId { node, slot }))
            .collect();
        let mut i = 0;
        while i + size <= all.len() {
            out.push(all[i..i + size].to_vec());
            i += size;
        }
    }
    out
}

/// Trials in order; each waits for the group whose GPUs are all free
/// soonest, lowest group on ties. Returns the makespan.
pub fn greedy_makespan(nodes: usize, per_node: usize, size: usize, durations: &[f64]) -> f64 {
    let gs = groups(nodes, per_node, size);
    let mut free = vec![vec![0.0f64; per_node]; nodes];
    let mut makespan = 0.0f64;
    for &d in durations {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gs.iter().enumerate() {
            let ready = g.iter().map(|id| free[id.node][id.slot]).fold(0.0, f64::max);
            if best.is_none_or(|(t, _)| ready < t) {
                best = Some((ready, gi));
            }
        }
        let (start, gi) = best.expect("at least one group");
        let end = start + d;
        for id in &gs[gi] {
            free[id.node][id.slot] = end;
        }
        makespan = makespan.max(end);
    }
    makespan
}

/// Back-to-back execution on the whole cluster.
pub fn serial_makespan(durations: &[f64]) -> f64 {
    let mut t = 0.0;
    for &d in durations {
        t += d;
    }
    t
}
