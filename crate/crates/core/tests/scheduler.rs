mod common;

use proptest::prelude::*;

use dmis::clustersim::{plan_data_parallel, plan_experiment_parallel, simulate, ClusterTopology, GroupPolicy};
use dmis::hpgrid::placeholder_grid;

fn topo(nodes: usize, per_node: usize) -> ClusterTopology {
    ClusterTopology {
        node_count: nodes,
        gpus_per_node: per_node,
        ..ClusterTopology::v100_nodes(1)
    }
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Option<usize>)> {
    (
        1usize..4,
        1usize..5,
        prop::collection::vec(1u32..400, 1..20),
        prop::option::of(1usize..17),
    )
        .prop_map(|(nodes, per_node, d, k)| {
            let n = nodes * per_node;
            (
                nodes,
                per_node,
                d.into_iter().map(|x| x as f64 * 0.125).collect(),
                k.map(|k| (k - 1) % n + 1),
            )
        })
}

proptest! {
    #[test]
    fn makespan_bounds_and_conservation((nodes, per_node, durations, k) in case()) {
        let t = topo(nodes, per_node);
        let n = t.total_gpus();
        let policy = k.map_or(GroupPolicy::Auto, GroupPolicy::Fixed);
        let specs = placeholder_grid(durations.len());
        let plan = plan_experiment_parallel(&specs, &t, policy, |s, _| durations[s.id]).unwrap();
        let r = simulate(&plan, &t).unwrap();
        let work: f64 = r.assignments.iter().map(|a| a.duration * a.gpus.len() as f64).sum();
        let longest = durations.iter().copied().fold(0.0, f64::max);
        prop_assert!(work <= n as f64 * r.elapsed * (1.0 + 1e-12));
        prop_assert!(r.elapsed >= longest);
        prop_assert!(r.elapsed * (1.0 + 1e-12) >= work / n as f64);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.utilization));
        prop_assert!(r.gpu_utilization.iter().all(|u| (0.0..=1.0 + 1e-12).contains(u)));
        let finish = r.assignments.iter().map(|a| a.start + a.duration).fold(0.0, f64::max);
        prop_assert_eq!(r.elapsed, finish);
    }

    #[test]
    fn matches_greedy_oracle((nodes, per_node, durations, k) in case()) {
        let t = topo(nodes, per_node);
        let policy = k.map_or(GroupPolicy::Auto, GroupPolicy::Fixed);
        let specs = placeholder_grid(durations.len());
        let plan = plan_experiment_parallel(&specs, &t, policy, |s, _| durations[s.id]).unwrap();
        let want = common::greedy_makespan(nodes, per_node, policy.group_size(t.total_gpus(), specs.len()), &durations);
        prop_assert_eq!(simulate(&plan, &t).unwrap().elapsed, want);
    }

    #[test]
    fn single_gpu_strategies_agree(durations in prop::collection::vec(0.5f64..100.0, 1..30)) {
        let t = topo(1, 1);
        let specs = placeholder_grid(durations.len());
        let dp = plan_data_parallel(&specs, &t, |s, _| durations[s.id]).unwrap();
        let ep = plan_experiment_parallel(&specs, &t, GroupPolicy::Auto, |s, _| durations[s.id]).unwrap();
        let (dp, ep) = (simulate(&dp, &t).unwrap(), simulate(&ep, &t).unwrap());
        prop_assert_eq!(dp.elapsed, ep.elapsed);
        prop_assert_eq!(dp.elapsed, common::serial_makespan(&durations));
    }

    #[test]
    fn simulation_is_deterministic((nodes, per_node, durations, k) in case()) {
        let t = topo(nodes, per_node);
        let policy = k.map_or(GroupPolicy::Auto, GroupPolicy::Fixed);
        let specs = placeholder_grid(durations.len());
        let plan = plan_experiment_parallel(&specs, &t, policy, |s, _| durations[s.id]).unwrap();
        prop_assert_eq!(simulate(&plan, &t).unwrap(), simulate(&plan, &t).unwrap());
    }
}

#[test]
fn worked_examples() {
    let specs = placeholder_grid(3);
    let d = [10.0, 6.0, 5.0];
    let plan = plan_experiment_parallel(&specs, &topo(1, 2), GroupPolicy::Fixed(1), |s, _| d[s.id]).unwrap();
    assert_eq!(simulate(&plan, &topo(1, 2)).unwrap().elapsed, 11.0);
    assert_eq!(common::greedy_makespan(1, 2, 1, &d), 11.0);

    let four = placeholder_grid(4);
    let p = plan_experiment_parallel(&four, &topo(1, 4), GroupPolicy::Fixed(1), |_, _| 10.0).unwrap();
    assert_eq!(simulate(&p, &topo(1, 4)).unwrap().elapsed, 10.0);
    let p = plan_experiment_parallel(&four, &topo(1, 2), GroupPolicy::Fixed(1), |_, _| 10.0).unwrap();
    assert_eq!(simulate(&p, &topo(1, 2)).unwrap().elapsed, 20.0);
    assert!(plan_experiment_parallel(&four, &topo(1, 2), GroupPolicy::Fixed(3), |_, _| 10.0).is_err());
}
