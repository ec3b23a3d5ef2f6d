//! Single-path packing: each traversal shares exactly one root-to-node path;
//! everything below the shared node is linearized per trajectory.
//!
//! The selection maximizing total savings is found by a tree DP over
//! feasible nodes, where a node u is feasible when its shared prefix plus
//! all residuals fit the budget: L(u) + R(u) <= C.

use crate::forest::{linear_token_total, NodeId, TrajectoryTree, TreeAnnotations};

use super::{check_leaves_fit, induced_nodes, Capacity, PackError, PackMethod, PackPlan, Traversal};

/// L(u) + R(u) <= C: selecting u yields one traversal that fits.
pub fn feasible(u: NodeId, ann: &TreeAnnotations, cap: Capacity) -> bool {
    ann.prefix_len[u] + ann.residual[u] <= cap.0
}

/// Savings from selecting u: the prefix is paid once instead of n(u) times.
pub fn saving(u: NodeId, ann: &TreeAnnotations) -> u64 {
    (ann.leaf_count[u] - 1) * ann.prefix_len[u]
}

#[derive(Debug, Clone)]
pub struct SinglePathSolution {
    pub savings: u64,
    /// Antichain of selected nodes; their subtrees partition the trajectories.
    pub selected: Vec<NodeId>,
    /// DP value per node; `None` marks a subtree that cannot be covered.
    pub table: Vec<Option<u64>>,
}

/// Maximum-savings antichain selection.
///
/// DP(u) = 0 at single-trajectory leaves; at internal nodes the better of
/// selecting u (if feasible) or delegating to the children. A leaf node
/// terminating several identical trajectories behaves like a feasible
/// internal node: packing its m trajectories together saves (m-1)*L.
pub fn single_path_dp(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<SinglePathSolution, PackError> {
    check_leaves_fit(tree, ann, cap)?;
    let n = tree.node_count();
    let mut table: Vec<Option<u64>> = vec![None; n];
    // true when the optimum at u selects u itself
    let mut take: Vec<bool> = vec![false; n];
    for u in tree.post_order() {
        let node = tree.node(u);
        if node.is_leaf() {
            // feasible by the precondition: L(u) <= C and R(u) = 0
            table[u] = Some(saving(u, ann));
            take[u] = true;
            continue;
        }
        let children_sum: Option<u64> = node
            .children
            .iter()
            .try_fold(0u64, |acc, &c| table[c].map(|v| acc + v));
        let select = feasible(u, ann, cap).then(|| saving(u, ann));
        // prefer selecting u on ties: fewer traversals
        table[u] = match (select, children_sum) {
            (Some(s), Some(c)) if s >= c => {
                take[u] = true;
                Some(s)
            }
            (Some(s), None) => {
                take[u] = true;
                Some(s)
            }
            (_, other) => other.or(select),
        };
    }
    let root = tree.root();
    let savings = table[root].expect("every leaf fits, so the root is coverable");
    let mut selected = Vec::new();
    let mut stack = vec![root];
    while let Some(u) = stack.pop() {
        if take[u] {
            selected.push(u);
        } else {
            for &c in tree.node(u).children.iter().rev() {
                stack.push(c);
            }
        }
    }
    selected.sort_unstable();
    Ok(SinglePathSolution {
        savings,
        selected,
        table,
    })
}

/// Expand a selection into a plan: each selected node becomes one traversal
/// covering its whole subtree at cost L(u) + R(u).
pub fn reconstruct_plan(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    solution: &SinglePathSolution,
) -> PackPlan {
    let mut traversals = Vec::with_capacity(solution.selected.len());
    for &u in &solution.selected {
        let mut leaves = Vec::new();
        let mut leaf_nodes = Vec::new();
        let mut stack = vec![u];
        while let Some(v) = stack.pop() {
            let node = tree.node(v);
            if node.is_leaf() {
                leaf_nodes.push(v);
                leaves.extend(node.leaf_ids.iter().cloned());
            }
            stack.extend(node.children.iter().copied());
        }
        leaves.sort();
        traversals.push(Traversal {
            leaves,
            nodes: induced_nodes(tree, &leaf_nodes),
            cost: ann.prefix_len[u] + ann.residual[u],
            shared_node: Some(u),
        });
    }
    let total_cost: u64 = traversals.iter().map(|t| t.cost).sum();
    let mut plan = PackPlan {
        method: PackMethod::Single,
        total_cost,
        savings: linear_token_total(tree, ann) - total_cost,
        traversals,
    };
    plan.normalize();
    plan
}
