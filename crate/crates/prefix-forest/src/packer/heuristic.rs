//! Scalable approximate packer for trees too large for the exact DP.
//!
//! Leaves are taken deepest-first in depth buckets (so leaves of similar
//! depth in the same subtree stay together), accumulated depth-first into
//! the current traversal, and a fresh traversal starts whenever the next
//! leaf's uncovered path would overflow the budget. A node re-entered by a
//! later traversal is paid again there.

use crate::forest::{linear_token_total, NodeId, TrajectoryTree, TreeAnnotations};

use super::{check_leaves_fit, Capacity, PackError, PackMethod, PackPlan, Traversal};

/// Leaves whose depths land in the same bucket of this width are grouped;
/// scaling with C keeps roughly eight depth classes per batch.
fn bucket_width(cap: Capacity) -> u64 {
    (cap.0.div_ceil(8)).max(1)
}

pub fn heuristic_pack(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<PackPlan, PackError> {
    check_leaves_fit(tree, ann, cap)?;

    // DFS leaf order keeps subtrees contiguous; the stable bucket sort then
    // pulls deeper bands first without interleaving unrelated subtrees
    // inside a band.
    let width = bucket_width(cap);
    let mut leaf_order: Vec<NodeId> = tree.leaves();
    leaf_order.sort_by_key(|&u| std::cmp::Reverse(ann.prefix_len[u] / width));

    let n = tree.node_count();
    // epoch stamps instead of a per-traversal hash set
    let mut covered: Vec<u64> = vec![0; n];
    let mut epoch = 1u64;

    let mut traversals: Vec<Traversal> = Vec::new();
    let mut cur_nodes: Vec<NodeId> = Vec::new();
    let mut cur_leaves: Vec<String> = Vec::new();
    let mut cur_cost = 0u64;

    for &leaf in &leaf_order {
        // uncovered tail of the root path; stops at the first covered
        // ancestor because traversals cover full root paths
        let mut uncovered = 0u64;
        let mut probe = Some(leaf);
        while let Some(u) = probe {
            if covered[u] == epoch {
                break;
            }
            uncovered += tree.node(u).len() as u64;
            probe = tree.node(u).parent;
        }
        if cur_cost + uncovered > cap.0 && !cur_leaves.is_empty() {
            flush(tree, &mut traversals, &mut cur_nodes, &mut cur_leaves, cur_cost);
            cur_cost = 0;
            epoch += 1;
            uncovered = ann.prefix_len[leaf];
        }
        let mut u = Some(leaf);
        while let Some(v) = u {
            if covered[v] == epoch {
                break;
            }
            covered[v] = epoch;
            cur_nodes.push(v);
            u = tree.node(v).parent;
        }
        cur_cost += uncovered;
        cur_leaves.extend(tree.node(leaf).leaf_ids.iter().cloned());
    }
    if !cur_leaves.is_empty() {
        flush(tree, &mut traversals, &mut cur_nodes, &mut cur_leaves, cur_cost);
    }

    let total_cost: u64 = traversals.iter().map(|t| t.cost).sum();
    let mut plan = PackPlan {
        method: PackMethod::Heuristic,
        total_cost,
        savings: linear_token_total(tree, ann) - total_cost,
        traversals,
    };
    plan.normalize();
    Ok(plan)
}

fn flush(
    tree: &TrajectoryTree,
    traversals: &mut Vec<Traversal>,
    nodes: &mut Vec<NodeId>,
    leaves: &mut Vec<String>,
    cost: u64,
) {
    let mut t = Traversal {
        leaves: std::mem::take(leaves),
        nodes: std::mem::take(nodes),
        cost,
        shared_node: None,
    };
    t.nodes.sort_unstable();
    debug_assert_eq!(
        cost,
        t.nodes.iter().map(|&u| tree.node(u).len() as u64).sum::<u64>()
    );
    traversals.push(t);
}

/// ERR: fraction of baseline tokens a plan actually eliminates. At most POR,
/// with equality when the whole tree fits one traversal.
pub fn effective_reuse_ratio(
    plan: &PackPlan,
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
) -> f64 {
    let linear = linear_token_total(tree, ann);
    if linear == 0 {
        return 0.0;
    }
    1.0 - plan.total_cost as f64 / linear as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{annotate, build_forest, por, tree_token_total, Trajectory};

    fn star(leaves: usize, prefix: usize, suffix: usize) -> TrajectoryTree {
        let trajectories: Vec<Trajectory> = (0..leaves)
            .map(|i| {
                let mut tokens: Vec<u32> = (0..prefix as u32).collect();
                tokens.extend((0..suffix as u32).map(|k| 1000 + i as u32 * 100 + k));
                Trajectory::new(format!("t{i:02}"), tokens)
            })
            .collect();
        build_forest(&trajectories).unwrap()
    }

    #[test]
    fn whole_tree_fits_one_traversal() {
        let tree = star(5, 6, 3);
        let ann = annotate(&tree);
        let total = tree_token_total(&tree);
        let plan = heuristic_pack(&tree, &ann, Capacity(total)).unwrap();
        assert_eq!(plan.traversals.len(), 1);
        assert_eq!(plan.total_cost, total);
        let err = effective_reuse_ratio(&plan, &tree, &ann);
        assert!((err - por(&tree, &ann)).abs() < 1e-15);
    }

    #[test]
    fn tight_capacity_on_a_star() {
        let tree = star(6, 4, 2);
        let ann = annotate(&tree);
        // exactly one leaf's full length: every traversal re-enters the root
        let max_l = tree
            .leaves()
            .iter()
            .map(|&u| ann.prefix_len[u])
            .max()
            .unwrap();
        let plan = heuristic_pack(&tree, &ann, Capacity(max_l)).unwrap();
        for t in &plan.traversals {
            assert!(t.cost <= max_l);
            assert_eq!(t.leaves.len(), 1);
        }
        assert_eq!(plan.total_cost, linear_token_total(&tree, &ann));
        assert_eq!(effective_reuse_ratio(&plan, &tree, &ann), 0.0);
    }

    #[test]
    fn roomier_star_shares_the_root() {
        let tree = star(6, 4, 2);
        let ann = annotate(&tree);
        // room for the prefix plus three suffixes
        let plan = heuristic_pack(&tree, &ann, Capacity(10)).unwrap();
        assert_eq!(plan.traversals.len(), 2);
        assert_eq!(plan.total_cost, 20);
    }

    #[test]
    fn infeasible_leaf_is_an_error() {
        let tree = star(2, 4, 4);
        let ann = annotate(&tree);
        assert!(matches!(
            heuristic_pack(&tree, &ann, Capacity(7)),
            Err(PackError::InfeasibleLeaf { .. })
        ));
    }
}
