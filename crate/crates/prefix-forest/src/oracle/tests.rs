use super::*;
use crate::forest::{annotate, build_forest, tree_token_total, Trajectory};
use crate::packer::heuristic::heuristic_pack;
use crate::packer::multi::multi_path_dp;
use crate::packer::single::{reconstruct_plan, single_path_dp};
use crate::synth::{random_tree, RandomTreeParams};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn root_two_leaves() -> TrajectoryTree {
    build_forest(&[
        Trajectory::new("a", vec![1, 2, 3, 4, 5, 10, 11, 12]),
        Trajectory::new("b", vec![1, 2, 3, 4, 5, 20, 21, 22, 23]),
    ])
    .unwrap()
}

#[test]
fn group_cost_examples() {
    let tree = root_two_leaves();
    assert_eq!(group_cost(&tree, &["a"]).unwrap(), 8);
    assert_eq!(group_cost(&tree, &["a", "b"]).unwrap(), 12);
    assert_eq!(group_cost(&tree, &[]).unwrap(), 0);
    assert!(matches!(
        group_cost(&tree, &["nope"]),
        Err(OracleError::UnknownLeaf(_))
    ));
}

#[test]
fn group_cost_monotone_and_subadditive() {
    let mut rng = StdRng::seed_from_u64(21);
    let params = RandomTreeParams::default();
    for _ in 0..100 {
        let tree = random_tree(&mut rng, &params);
        let ids = tree.trajectory_ids();
        let n = ids.len();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        for _ in 0..10 {
            let a_mask = rng.gen_range(0..(1usize << n));
            let b_mask = rng.gen_range(0..(1usize << n));
            let pick = |mask: usize| -> Vec<&str> {
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| refs[i]).collect()
            };
            let ca = group_cost(&tree, &pick(a_mask)).unwrap();
            let cb = group_cost(&tree, &pick(b_mask)).unwrap();
            let cab = group_cost(&tree, &pick(a_mask | b_mask)).unwrap();
            assert!(cab >= ca.max(cb), "monotone");
            assert!(cab <= ca + cb, "subadditive");
        }
    }
}

#[test]
fn brute_force_examples() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    let (cost, plan) = brute_force_optimal(&tree, &ann, Capacity(12)).unwrap();
    assert_eq!(cost, 12);
    assert_eq!(plan.traversals.len(), 1);

    // below every pairwise group cost: singletons forced
    let (cost, plan) = brute_force_optimal(&tree, &ann, Capacity(9)).unwrap();
    assert_eq!(cost, 17);
    assert_eq!(plan.traversals.len(), 2);

    // whole tree fits
    let (cost, _) = brute_force_optimal(&tree, &ann, Capacity(100)).unwrap();
    assert_eq!(cost, tree_token_total(&tree));

    assert!(matches!(
        brute_force_optimal(&tree, &ann, Capacity(5)),
        Err(OracleError::NoFeasiblePacking { .. })
    ));
}

#[test]
fn too_many_leaves_rejected() {
    let trajectories: Vec<Trajectory> = (0..9)
        .map(|i| Trajectory::new(format!("t{i}"), vec![0, 10 + i]))
        .collect();
    let tree = build_forest(&trajectories).unwrap();
    let ann = annotate(&tree);
    assert!(matches!(
        brute_force_optimal(&tree, &ann, Capacity(100)),
        Err(OracleError::TooManyLeaves { .. })
    ));
}

#[test]
fn antichain_examples() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    // root feasible star: (n-1) * L(root)
    assert_eq!(brute_force_antichain(&tree, &ann, Capacity(12)).unwrap(), 5);
    // only leaves feasible: zero savings
    assert_eq!(brute_force_antichain(&tree, &ann, Capacity(11)).unwrap(), 0);
}

#[test]
fn oracle_invariant_under_relabeling_and_reordering() {
    let mut rng = StdRng::seed_from_u64(22);
    let params = RandomTreeParams {
        leaves: 2..=6,
        ..Default::default()
    };
    for _ in 0..50 {
        let mut trajectories = crate::synth::random_trajectories(&mut rng, &params);
        let tree = build_forest(&trajectories).unwrap();
        let ann = annotate(&tree);
        let max_l = tree
            .leaves()
            .iter()
            .map(|&u| ann.prefix_len[u])
            .max()
            .unwrap();
        let cap = Capacity(rng.gen_range(max_l..=tree_token_total(&tree) + 5));
        let (cost, _) = brute_force_optimal(&tree, &ann, cap).unwrap();

        trajectories.reverse();
        for (i, t) in trajectories.iter_mut().enumerate() {
            t.id = format!("renamed-{i:02}");
        }
        let permuted = build_forest(&trajectories).unwrap();
        let pann = annotate(&permuted);
        let (cost2, _) = brute_force_optimal(&permuted, &pann, cap).unwrap();
        assert_eq!(cost, cost2);
    }
}

#[test]
fn validate_plan_flags_violations() {
    let tree = root_two_leaves();
    let ann = annotate(&tree);
    let cap = Capacity(12);
    let plan = multi_path_dp(&tree, &ann, cap).unwrap();
    assert!(validate_plan(&tree, &ann, &plan, cap).is_empty());

    let mut missing = plan.clone();
    missing.traversals[0].leaves.retain(|id| id != "b");
    let violations = validate_plan(&tree, &ann, &missing, cap);
    assert!(violations
        .iter()
        .any(|v| matches!(v, PlanViolation::UncoveredLeaf { id } if id == "b")));

    let tight = validate_plan(&tree, &ann, &plan, Capacity(11));
    assert!(tight
        .iter()
        .any(|v| matches!(v, PlanViolation::CapacityExceeded { .. })));

    let mut lying = plan.clone();
    lying.traversals[0].cost += 1;
    let violations = validate_plan(&tree, &ann, &lying, cap);
    assert!(violations
        .iter()
        .any(|v| matches!(v, PlanViolation::CostMismatch { .. })));
}

/// Randomized agreement: the DPs, the heuristic sandwich, the accounting
/// identities and monotonicity, all against the brute-force ground truth.
/// The acceptance suite runs the full-size corpora; this is the inner loop.
#[test]
fn packers_agree_with_oracle_on_random_trees() {
    let mut rng = StdRng::seed_from_u64(23);
    let params = RandomTreeParams {
        duplicate_prob: 0.1,
        ..Default::default()
    };
    for case in 0..120 {
        let tree = random_tree(&mut rng, &params);
        if tree.trajectory_count() > MAX_ORACLE_LEAVES {
            continue;
        }
        let ann = annotate(&tree);
        let max_l = tree
            .leaves()
            .iter()
            .map(|&u| ann.prefix_len[u])
            .max()
            .unwrap();
        let total = tree_token_total(&tree);
        let cap = Capacity(rng.gen_range(max_l..=total + 5));

        let (oracle_cost, oracle_plan) = brute_force_optimal(&tree, &ann, cap).unwrap();
        assert!(validate_plan(&tree, &ann, &oracle_plan, cap).is_empty());

        let multi = multi_path_dp(&tree, &ann, cap).unwrap();
        assert_eq!(multi.total_cost, oracle_cost, "case {case}");
        assert!(validate_plan(&tree, &ann, &multi, cap).is_empty());

        let single = single_path_dp(&tree, &ann, cap).unwrap();
        assert_eq!(
            single.savings,
            brute_force_antichain(&tree, &ann, cap).unwrap(),
            "case {case}"
        );
        let single_plan = reconstruct_plan(&tree, &ann, &single);
        assert!(validate_plan(&tree, &ann, &single_plan, cap).is_empty());

        let heuristic = heuristic_pack(&tree, &ann, cap).unwrap();
        assert!(validate_plan(&tree, &ann, &heuristic, cap).is_empty());

        let unpruned = crate::packer::multi::multi_path_dp_with(
            &tree,
            &ann,
            cap,
            &crate::packer::multi::ExactLimits::default(),
            false,
        )
        .unwrap();
        assert_eq!(unpruned.total_cost, multi.total_cost, "pruning is lossless");

        let linear = crate::forest::linear_token_total(&tree, &ann);
        assert!(oracle_cost <= heuristic.total_cost);
        assert!(heuristic.total_cost <= linear);
        assert!(multi.total_cost <= single_plan.total_cost);
        assert!(single_plan.total_cost <= linear);
        assert!(multi.total_cost >= total);
        if total <= cap.0 {
            assert_eq!(multi.total_cost, total);
        }
        // a nonzero root paid once means equality only when everything fits
        if multi.total_cost == total && tree.node(tree.root()).len() > 0 {
            assert_eq!(multi.traversals.len(), 1);
            assert!(total <= cap.0);
        }

        // capacity monotonicity
        let wider = multi_path_dp(&tree, &ann, Capacity(cap.0 + 3)).unwrap();
        assert!(wider.total_cost <= multi.total_cost);
    }
}
