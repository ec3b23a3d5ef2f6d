//! Multi-path packing: traversals may branch below the shared node, nesting
//! shared sub-prefixes. Exact optimum via a bottom-up state DP.
//!
//! Every node keeps a candidate set of states. A state is the non-decreasing
//! vector of loads of the traversals arriving at the node (tokens each has
//! already committed strictly below it) plus the cumulative cost. Child
//! states are lifted by the child's segment length, components exceeding the
//! local remaining capacity C - L(u) are discarded, and the lifted items are
//! combined by exhaustive bin packing. Exponential in the worst case and
//! gated by explicit limits; the companion brute-force oracle validates it.

use std::collections::BTreeMap;

use crate::forest::{linear_token_total, NodeId, TrajectoryTree, TreeAnnotations};

use super::{check_leaves_fit, traversal_from_ids, Capacity, PackError, PackMethod, PackPlan};

/// Gates for the exact mode. Exceeding any limit aborts with
/// [`PackError::ExactModeLimitExceeded`] rather than silently approximating.
#[derive(Debug, Clone)]
pub struct ExactLimits {
    /// Max lifted items combined at one node.
    pub max_items: usize,
    /// Max surviving states per node after pruning.
    pub max_states: usize,
    /// Max bin-packing enumerations per node.
    pub max_expansions: usize,
}

impl Default for ExactLimits {
    fn default() -> Self {
        ExactLimits {
            max_items: 12,
            max_states: 10_000,
            max_expansions: 2_000_000,
        }
    }
}

#[derive(Debug, Clone)]
struct State {
    /// Non-decreasing loads of the traversals arriving here.
    loads: Vec<u64>,
    /// Minimum cumulative segment length below this node. Always equals the
    /// load sum; kept separate because the recurrence derives it from child
    /// costs plus per-bin edge charges, and the equality is the checked
    /// interpretation of that recurrence.
    cost: u64,
    /// Chosen state index per child slot.
    choice: Vec<usize>,
    /// Per bin (aligned with `loads`): the lifted items it holds, each the
    /// (child slot, child bin) it came from. Empty contents mark a leaf
    /// node's terminal traversal.
    bins: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy)]
struct Item {
    load: u64,
    child_slot: usize,
    comp: usize,
}

pub fn multi_path_dp(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<PackPlan, PackError> {
    multi_path_dp_with(tree, ann, cap, &ExactLimits::default(), true)
}

pub fn multi_path_dp_with(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
    limits: &ExactLimits,
    prune: bool,
) -> Result<PackPlan, PackError> {
    check_leaves_fit(tree, ann, cap)?;
    let mut states: Vec<Vec<State>> = vec![Vec::new(); tree.node_count()];

    for u in tree.post_order() {
        let node = tree.node(u);
        if node.is_leaf() {
            states[u] = vec![State {
                loads: vec![0],
                cost: 0,
                choice: Vec::new(),
                bins: vec![Vec::new()],
            }];
            continue;
        }
        // Some leaf below u fits alone, so L(u) <= C.
        let cu = cap.0 - ann.prefix_len[u];
        let child_lens: Vec<u64> = node
            .children
            .iter()
            .map(|&c| tree.node(c).len() as u64)
            .collect();
        let m = node.children.len();
        let mut found: BTreeMap<Vec<u64>, State> = BTreeMap::new();
        let mut expansions = 0usize;

        let mut idxs = vec![0usize; m];
        'combos: loop {
            // Lift the chosen child states; a component exceeding the local
            // capacity makes the whole combination unusable.
            let mut items: Vec<Item> = Vec::new();
            let mut base_cost = 0u64;
            let mut liftable = true;
            'lift: for (slot, &c) in node.children.iter().enumerate() {
                let st = &states[c][idxs[slot]];
                base_cost += st.cost;
                for (comp, &ld) in st.loads.iter().enumerate() {
                    let lifted = ld + child_lens[slot];
                    if lifted > cu {
                        liftable = false;
                        break 'lift;
                    }
                    items.push(Item {
                        load: lifted,
                        child_slot: slot,
                        comp,
                    });
                }
            }
            if liftable {
                if items.len() > limits.max_items {
                    return Err(PackError::ExactModeLimitExceeded {
                        node: u,
                        what: "lifted items",
                        value: items.len(),
                        limit: limits.max_items,
                    });
                }
                let mut budget = Budget {
                    node: u,
                    used: &mut expansions,
                    limit: limits.max_expansions,
                };
                pack_items(&items, cu, &mut budget, &idxs, base_cost, &child_lens, &mut found)?;
            }
            // odometer over child state indices
            let mut i = 0;
            loop {
                if i == m {
                    break 'combos;
                }
                idxs[i] += 1;
                if idxs[i] < states[node.children[i]].len() {
                    break;
                }
                idxs[i] = 0;
                i += 1;
            }
        }

        let mut list: Vec<State> = found.into_values().collect();
        if prune {
            list = dominance_prune(list);
        }
        if list.len() > limits.max_states {
            return Err(PackError::ExactModeLimitExceeded {
                node: u,
                what: "surviving states",
                value: list.len(),
                limit: limits.max_states,
            });
        }
        states[u] = list;
    }

    Ok(build_plan(tree, ann, &states))
}

struct Budget<'a> {
    node: NodeId,
    used: &'a mut usize,
    limit: usize,
}

impl Budget<'_> {
    fn charge(&mut self) -> Result<(), PackError> {
        *self.used += 1;
        if *self.used > self.limit {
            return Err(PackError::ExactModeLimitExceeded {
                node: self.node,
                what: "bin packings",
                value: *self.used,
                limit: self.limit,
            });
        }
        Ok(())
    }
}

/// Exhaustively assign items to bins of capacity `cu`. Bins are created in
/// first-use order so each set partition appears once; items lifted from the
/// same child are distinct traversals there and may not share a bin.
fn pack_items(
    items: &[Item],
    cu: u64,
    budget: &mut Budget<'_>,
    idxs: &[usize],
    base_cost: u64,
    child_lens: &[u64],
    found: &mut BTreeMap<Vec<u64>, State>,
) -> Result<(), PackError> {
    struct Bin {
        load: u64,
        slot_mask: u32,
        contents: Vec<(usize, usize)>,
    }
    fn rec(
        idx: usize,
        items: &[Item],
        cu: u64,
        bins: &mut Vec<Bin>,
        budget: &mut Budget<'_>,
        complete: &mut impl FnMut(&[Bin]),
    ) -> Result<(), PackError> {
        if idx == items.len() {
            budget.charge()?;
            complete(bins);
            return Ok(());
        }
        let it = items[idx];
        for b in 0..bins.len() {
            if bins[b].load + it.load <= cu && bins[b].slot_mask & (1 << it.child_slot) == 0 {
                bins[b].load += it.load;
                bins[b].slot_mask |= 1 << it.child_slot;
                bins[b].contents.push((it.child_slot, it.comp));
                rec(idx + 1, items, cu, bins, budget, complete)?;
                bins[b].contents.pop();
                bins[b].slot_mask &= !(1 << it.child_slot);
                bins[b].load -= it.load;
            }
        }
        bins.push(Bin {
            load: it.load,
            slot_mask: 1 << it.child_slot,
            contents: vec![(it.child_slot, it.comp)],
        });
        rec(idx + 1, items, cu, bins, budget, complete)?;
        bins.pop();
        Ok(())
    }

    let choice = idxs.to_vec();
    let mut complete = |bins: &[Bin]| {
        // each bin pays each child edge it uses exactly once
        let mut bins_per_child = vec![0u64; child_lens.len()];
        for b in bins {
            for slot in 0..child_lens.len() {
                if b.slot_mask & (1 << slot) != 0 {
                    bins_per_child[slot] += 1;
                }
            }
        }
        let cost = base_cost
            + child_lens
                .iter()
                .zip(&bins_per_child)
                .map(|(w, t)| w * t)
                .sum::<u64>();
        debug_assert_eq!(cost, bins.iter().map(|b| b.load).sum::<u64>());

        let mut order: Vec<usize> = (0..bins.len()).collect();
        order.sort_by(|&a, &b| {
            bins[a]
                .load
                .cmp(&bins[b].load)
                .then_with(|| bins[a].contents.cmp(&bins[b].contents))
        });
        let loads: Vec<u64> = order.iter().map(|&i| bins[i].load).collect();
        let contents: Vec<Vec<(usize, usize)>> =
            order.iter().map(|&i| bins[i].contents.clone()).collect();
        found.entry(loads.clone()).or_insert_with(|| State {
            loads,
            cost,
            choice: choice.clone(),
            bins: contents,
        });
    };
    let mut bins: Vec<Bin> = Vec::new();
    rec(0, items, cu, &mut bins, budget, &mut complete)
}

/// Drop any state for which another state has no more bins, component-wise
/// smaller-or-equal loads (aligned at the tail, the shorter vector padded
/// with zero loads in front) and no higher cost. Mutual domination cannot
/// occur: loads are deduplicated and zero loads never appear in bins.
fn dominance_prune(states: Vec<State>) -> Vec<State> {
    let dominates = |b: &State, a: &State| -> bool {
        if b.loads.len() > a.loads.len() || b.cost > a.cost {
            return false;
        }
        let pad = a.loads.len() - b.loads.len();
        b.loads.iter().zip(&a.loads[pad..]).all(|(&x, &y)| x <= y)
    };
    let keep: Vec<bool> = states
        .iter()
        .enumerate()
        .map(|(i, a)| {
            !states
                .iter()
                .enumerate()
                .any(|(j, b)| j != i && dominates(b, a))
        })
        .collect();
    states
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Pick the best root state and materialize a plan from the recorded bins.
fn build_plan(tree: &TrajectoryTree, ann: &TreeAnnotations, states: &[Vec<State>]) -> PackPlan {
    let root = tree.root();
    let root_len = tree.node(root).len() as u64;
    // each traversal additionally pays the root's own segment once
    let total_of = |s: &State| s.cost + s.loads.len() as u64 * root_len;
    let best_total = states[root]
        .iter()
        .map(total_of)
        .min()
        .expect("root always has at least the all-singletons state");

    let mut best: Option<PackPlan> = None;
    for (si, s) in states[root].iter().enumerate() {
        if total_of(s) != best_total {
            continue;
        }
        let groups = collect_groups(tree, states, si);
        let traversals = groups
            .iter()
            .map(|ids| traversal_from_ids(tree, ids))
            .collect::<Vec<_>>();
        let total_cost: u64 = traversals.iter().map(|t| t.cost).sum();
        debug_assert_eq!(total_cost, best_total);
        let mut plan = PackPlan {
            method: PackMethod::Multi,
            total_cost,
            savings: linear_token_total(tree, ann) - total_cost,
            traversals,
        };
        plan.normalize();
        let better = match &best {
            None => true,
            Some(b) => plan.grouping_key() < b.grouping_key(),
        };
        if better {
            best = Some(plan);
        }
    }
    best.expect("at least one optimal state")
}

/// Expand a root state into its per-traversal trajectory id groups.
fn collect_groups(tree: &TrajectoryTree, states: &[Vec<State>], root_state: usize) -> Vec<Vec<String>> {
    let root = tree.root();
    let state = &states[root][root_state];
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); state.loads.len()];
    // (node, state index, bin index, group index)
    let mut work: Vec<(NodeId, usize, usize, usize)> = (0..state.loads.len())
        .map(|g| (root, root_state, g, g))
        .collect();
    while let Some((u, si, bi, g)) = work.pop() {
        let node = tree.node(u);
        let st = &states[u][si];
        if node.is_leaf() {
            groups[g].extend(node.leaf_ids.iter().cloned());
            continue;
        }
        for &(slot, child_bin) in &st.bins[bi] {
            work.push((node.children[slot], st.choice[slot], child_bin, g));
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::io::{tree_from_spec, TreeSpec};
    use crate::forest::{annotate, build_forest, tree_token_total, Trajectory};
    use crate::packer::single::{reconstruct_plan, single_path_dp};

    fn root_two_leaves() -> TrajectoryTree {
        build_forest(&[
            Trajectory::new("a", vec![1, 2, 3, 4, 5, 10, 11, 12]),
            Trajectory::new("b", vec![1, 2, 3, 4, 5, 20, 21, 22, 23]),
        ])
        .unwrap()
    }

    fn leaf(seg: Vec<u32>, id: &str) -> TreeSpec {
        TreeSpec {
            segment: seg,
            children: vec![],
            leaf_ids: vec![id.into()],
        }
    }

    /// r(2) -> u(2) -> {v1(2) -> {a(1), b(1)}, v5(2) -> {c(1), d(1)}}
    fn nested_tree() -> TrajectoryTree {
        let spec = TreeSpec {
            segment: vec![1, 2],
            children: vec![TreeSpec {
                segment: vec![3, 4],
                children: vec![
                    TreeSpec {
                        segment: vec![5, 6],
                        children: vec![leaf(vec![7], "a"), leaf(vec![8], "b")],
                        leaf_ids: vec![],
                    },
                    TreeSpec {
                        segment: vec![9, 10],
                        children: vec![leaf(vec![11], "c"), leaf(vec![12], "d")],
                        leaf_ids: vec![],
                    },
                ],
                leaf_ids: vec![],
            }],
            leaf_ids: vec![],
        };
        tree_from_spec(&spec).unwrap()
    }

    #[test]
    fn whole_tree_in_one_traversal() {
        let tree = root_two_leaves();
        let ann = annotate(&tree);
        let plan = multi_path_dp(&tree, &ann, Capacity(12)).unwrap();
        assert_eq!(plan.total_cost, 12);
        assert_eq!(plan.traversals.len(), 1);
        assert_eq!(plan.traversals[0].leaves, vec!["a", "b"]);
        assert_eq!(plan.savings, 5);
    }

    #[test]
    fn splits_when_capacity_forces_it() {
        let tree = root_two_leaves();
        let ann = annotate(&tree);
        let plan = multi_path_dp(&tree, &ann, Capacity(9)).unwrap();
        assert_eq!(plan.total_cost, 17);
        assert_eq!(plan.traversals.len(), 2);
        assert_eq!(plan.savings, 0);
    }

    #[test]
    fn multi_path_beats_single_path_on_nested_sharing() {
        let tree = nested_tree();
        let ann = annotate(&tree);
        let cap = Capacity(12);
        let multi = multi_path_dp(&tree, &ann, cap).unwrap();
        assert_eq!(multi.total_cost, tree_token_total(&tree));
        assert_eq!(multi.total_cost, 12);
        assert_eq!(multi.traversals.len(), 1);

        let single = reconstruct_plan(&tree, &ann, &single_path_dp(&tree, &ann, cap).unwrap());
        assert_eq!(single.total_cost, 16);
        assert!(multi.total_cost < single.total_cost);
    }

    #[test]
    fn infeasible_leaf_is_an_error() {
        let tree = root_two_leaves();
        let ann = annotate(&tree);
        assert!(matches!(
            multi_path_dp(&tree, &ann, Capacity(8)),
            Err(PackError::InfeasibleLeaf { .. })
        ));
    }

    #[test]
    fn item_limit_triggers() {
        let trajectories: Vec<Trajectory> = (0..14)
            .map(|i| Trajectory::new(format!("t{i:02}"), vec![0, 100 + i]))
            .collect();
        let tree = build_forest(&trajectories).unwrap();
        let ann = annotate(&tree);
        let limits = ExactLimits {
            max_items: 12,
            ..ExactLimits::default()
        };
        assert!(matches!(
            multi_path_dp_with(&tree, &ann, Capacity(100), &limits, true),
            Err(PackError::ExactModeLimitExceeded { .. })
        ));
    }

    #[test]
    fn deterministic_output() {
        let tree = nested_tree();
        let ann = annotate(&tree);
        let a = multi_path_dp(&tree, &ann, Capacity(9)).unwrap();
        let b = multi_path_dp(&tree, &ann, Capacity(9)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn pruning_preserves_the_optimum() {
        let tree = nested_tree();
        let ann = annotate(&tree);
        for c in 8..=16 {
            let with = multi_path_dp_with(&tree, &ann, Capacity(c), &ExactLimits::default(), true);
            let without =
                multi_path_dp_with(&tree, &ann, Capacity(c), &ExactLimits::default(), false);
            match (with, without) {
                (Ok(a), Ok(b)) => assert_eq!(a.total_cost, b.total_cost, "C = {c}"),
                (Err(_), Err(_)) => {}
                other => panic!("pruned/unpruned disagree at C = {c}: {other:?}"),
            }
        }
    }
}
