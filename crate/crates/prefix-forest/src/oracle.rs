//! Brute-force ground truth for the packing problem, plus plan validation.
//!
//! Deliberately independent of the DP implementations: optimal costs come
//! from enumerating every set partition of the trajectories, optimal savings
//! from enumerating every node subset. Small inputs only.

use serde::Serialize;
use thiserror::Error;

use crate::forest::{linear_token_total, NodeId, TrajectoryTree, TreeAnnotations};
use crate::packer::single::{feasible, saving};
use crate::packer::{Capacity, PackMethod, PackPlan, Traversal};

pub const MAX_ORACLE_LEAVES: usize = 8;
pub const MAX_ORACLE_NODES: usize = 16;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown leaf id `{0}`")]
    UnknownLeaf(String),
    #[error("{count} trajectories exceed the oracle limit of {limit}")]
    TooManyLeaves { count: usize, limit: usize },
    #[error("{count} nodes exceed the oracle limit of {limit}")]
    TooManyNodes { count: usize, limit: usize },
    #[error("no feasible packing: leaf `{id}` alone needs {required} > capacity {capacity}")]
    NoFeasiblePacking {
        id: String,
        required: u64,
        capacity: u64,
    },
}

/// Tokens one traversal over these trajectories pays: segment lengths over
/// the union of their root paths, each node once.
pub fn group_cost(tree: &TrajectoryTree, ids: &[&str]) -> Result<u64, OracleError> {
    let mut leaf_nodes = Vec::with_capacity(ids.len());
    for id in ids {
        leaf_nodes.push(
            tree.leaf_node(id)
                .ok_or_else(|| OracleError::UnknownLeaf(id.to_string()))?,
        );
    }
    Ok(steiner_cost(tree, &leaf_nodes))
}

fn steiner_cost(tree: &TrajectoryTree, leaf_nodes: &[NodeId]) -> u64 {
    let mut mark = vec![false; tree.node_count()];
    let mut cost = 0u64;
    for &leaf in leaf_nodes {
        let mut cur = Some(leaf);
        while let Some(u) = cur {
            if mark[u] {
                break;
            }
            mark[u] = true;
            cost += tree.node(u).len() as u64;
            cur = tree.node(u).parent;
        }
    }
    cost
}

/// Exact optimum by enumerating all set partitions of the trajectory ids
/// (restricted-growth strings), keeping those whose every group fits C.
/// Group costs are memoized per id-subset bitmask. Ties break like the DP:
/// fewer traversals, then the lexicographically smallest grouping.
pub fn brute_force_optimal(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<(u64, PackPlan), OracleError> {
    let ids = tree.trajectory_ids();
    let n = ids.len();
    if n > MAX_ORACLE_LEAVES {
        return Err(OracleError::TooManyLeaves {
            count: n,
            limit: MAX_ORACLE_LEAVES,
        });
    }
    for id in &ids {
        let leaf = tree.leaf_node(id).expect("id from the tree");
        if ann.prefix_len[leaf] > cap.0 {
            return Err(OracleError::NoFeasiblePacking {
                id: id.clone(),
                required: ann.prefix_len[leaf],
                capacity: cap.0,
            });
        }
    }
    let leaf_nodes: Vec<NodeId> = ids
        .iter()
        .map(|id| tree.leaf_node(id).expect("id from the tree"))
        .collect();

    let mut memo: Vec<Option<u64>> = vec![None; 1 << n];
    let mut subset_cost = |mask: usize| -> u64 {
        if let Some(c) = memo[mask] {
            return c;
        }
        let members: Vec<NodeId> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| leaf_nodes[i])
            .collect();
        let c = steiner_cost(tree, &members);
        memo[mask] = Some(c);
        c
    };

    // restricted-growth strings: assignment[i] <= 1 + max(assignment[..i])
    let mut assignment = vec![0usize; n];
    let mut best: Option<(u64, usize, Vec<Vec<String>>)> = None;
    loop {
        let group_count = assignment.iter().copied().max().unwrap_or(0) + 1;
        let mut masks = vec![0usize; group_count];
        for (i, &g) in assignment.iter().enumerate() {
            masks[g] |= 1 << i;
        }
        let mut total = 0u64;
        let mut ok = true;
        for &m in &masks {
            let c = subset_cost(m);
            if c > cap.0 {
                ok = false;
                break;
            }
            total += c;
        }
        if ok {
            let mut groups: Vec<Vec<String>> = masks
                .iter()
                .map(|&m| {
                    (0..n)
                        .filter(|i| m & (1 << i) != 0)
                        .map(|i| ids[i].clone())
                        .collect()
                })
                .collect();
            groups.sort();
            let candidate = (total, group_count, groups);
            if best.as_ref().is_none_or(|b| candidate < *b) {
                best = Some(candidate);
            }
        }
        if !next_partition(&mut assignment) {
            break;
        }
    }

    let (cost, _, groups) = best.expect("singleton partition is always feasible");
    let traversals: Vec<Traversal> = groups
        .iter()
        .map(|g| {
            let nodes: Vec<NodeId> = {
                let members: Vec<NodeId> = g
                    .iter()
                    .map(|id| tree.leaf_node(id).expect("id from the tree"))
                    .collect();
                crate::packer::induced_nodes(tree, &members)
            };
            let cost = nodes.iter().map(|&u| tree.node(u).len() as u64).sum();
            Traversal {
                leaves: g.clone(),
                nodes,
                cost,
                shared_node: None,
            }
        })
        .collect();
    let mut plan = PackPlan {
        method: PackMethod::Multi,
        total_cost: cost,
        savings: linear_token_total(tree, ann) - cost,
        traversals,
    };
    plan.normalize();
    Ok((cost, plan))
}

/// Advance a restricted-growth string to the next set partition; false once
/// exhausted.
fn next_partition(a: &mut [usize]) -> bool {
    let n = a.len();
    for i in (1..n).rev() {
        let max_prefix = a[..i].iter().copied().max().unwrap_or(0);
        if a[i] <= max_prefix {
            a[i] += 1;
            for x in &mut a[i + 1..] {
                *x = 0;
            }
            return true;
        }
    }
    false
}

/// Exhaustive maximum of sum (n(u)-1)*L(u) over feasible node subsets that
/// are antichains covering every trajectory exactly once.
pub fn brute_force_antichain(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<u64, OracleError> {
    let n = tree.node_count();
    if n > MAX_ORACLE_NODES {
        return Err(OracleError::TooManyNodes {
            count: n,
            limit: MAX_ORACLE_NODES,
        });
    }
    let leaves = tree.leaves();
    for &leaf in &leaves {
        if ann.prefix_len[leaf] > cap.0 {
            let id = tree.node(leaf).leaf_ids[0].clone();
            return Err(OracleError::NoFeasiblePacking {
                id,
                required: ann.prefix_len[leaf],
                capacity: cap.0,
            });
        }
    }
    // ancestors-or-self per node as a bitmask
    let mut anc = vec![0u32; n];
    for u in 0..n {
        for v in tree.path_from_root(u) {
            anc[u] |= 1 << v;
        }
    }
    let mut best: Option<u64> = None;
    'subsets: for set in 0u32..(1 << n) {
        let mut savings = 0u64;
        for u in 0..n {
            if set & (1 << u) == 0 {
                continue;
            }
            if !feasible(u, ann, cap) {
                continue 'subsets;
            }
            // antichain: no selected strict ancestor
            if anc[u] & set & !(1 << u) != 0 {
                continue 'subsets;
            }
            savings += saving(u, ann);
        }
        // every leaf has exactly one selected ancestor-or-self
        for &leaf in &leaves {
            if (anc[leaf] & set).count_ones() != 1 {
                continue 'subsets;
            }
        }
        best = Some(best.map_or(savings, |b: u64| b.max(savings)));
    }
    Ok(best.expect("selecting every leaf node is feasible"))
}

/// Named invariant violations of a plan; empty means valid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PlanViolation {
    UncoveredLeaf { id: String },
    DuplicateLeaf { id: String },
    UnknownLeaf { id: String },
    CapacityExceeded { traversal: usize, cost: u64, capacity: u64 },
    NodeSetMismatch { traversal: usize },
    CostMismatch { traversal: usize, stated: u64, actual: u64 },
    SharedNodeMismatch { traversal: usize, shared_node: NodeId },
    TotalCostMismatch { stated: u64, actual: u64 },
    SavingsMismatch { stated: u64, actual: u64 },
}

/// Check partition, capacity and cost-consistency invariants. Traversals
/// with a `shared_node` are costed with linearized residuals, the others by
/// paying each induced node once.
pub fn validate_plan(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    cap: Capacity,
) -> Vec<PlanViolation> {
    let mut violations = Vec::new();
    let mut seen: std::collections::BTreeMap<&str, usize> = Default::default();
    for t in &plan.traversals {
        for id in &t.leaves {
            if tree.leaf_node(id).is_none() {
                violations.push(PlanViolation::UnknownLeaf { id: id.clone() });
            } else {
                *seen.entry(id).or_default() += 1;
            }
        }
    }
    for id in tree.trajectory_ids() {
        match seen.get(id.as_str()) {
            None => violations.push(PlanViolation::UncoveredLeaf { id }),
            Some(1) => {}
            Some(_) => violations.push(PlanViolation::DuplicateLeaf { id }),
        }
    }

    for (i, t) in plan.traversals.iter().enumerate() {
        let leaf_nodes: Vec<NodeId> = t
            .leaves
            .iter()
            .filter_map(|id| tree.leaf_node(id))
            .collect();
        let induced = crate::packer::induced_nodes(tree, &leaf_nodes);
        let mut stated_nodes = t.nodes.clone();
        stated_nodes.sort_unstable();
        stated_nodes.dedup();
        if stated_nodes != induced {
            violations.push(PlanViolation::NodeSetMismatch { traversal: i });
        }
        let actual = match t.shared_node {
            None => induced.iter().map(|&u| tree.node(u).len() as u64).sum(),
            Some(su) => {
                let on_path = |leaf: NodeId| tree.path_from_root(leaf).contains(&su);
                if !leaf_nodes.iter().all(|&l| on_path(l)) {
                    violations.push(PlanViolation::SharedNodeMismatch {
                        traversal: i,
                        shared_node: su,
                    });
                }
                // prefix once, residuals linearized per trajectory
                let residual: u64 = t
                    .leaves
                    .iter()
                    .filter_map(|id| tree.leaf_node(id))
                    .map(|l| ann.prefix_len[l] - ann.prefix_len[su])
                    .sum();
                ann.prefix_len[su] + residual
            }
        };
        if actual != t.cost {
            violations.push(PlanViolation::CostMismatch {
                traversal: i,
                stated: t.cost,
                actual,
            });
        }
        if t.cost > cap.0 {
            violations.push(PlanViolation::CapacityExceeded {
                traversal: i,
                cost: t.cost,
                capacity: cap.0,
            });
        }
    }

    let total: u64 = plan.traversals.iter().map(|t| t.cost).sum();
    if total != plan.total_cost {
        violations.push(PlanViolation::TotalCostMismatch {
            stated: plan.total_cost,
            actual: total,
        });
    }
    let linear = linear_token_total(tree, ann);
    let expected_savings = linear.saturating_sub(total);
    if plan.savings != expected_savings {
        violations.push(PlanViolation::SavingsMismatch {
            stated: plan.savings,
            actual: expected_savings,
        });
    }
    violations
}

#[cfg(test)]
mod tests;
