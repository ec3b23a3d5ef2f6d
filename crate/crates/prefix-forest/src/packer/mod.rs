//! Capacity-constrained packing of trajectory trees into traversals.
//!
//! A traversal is one unit of packed work: a set of trajectories processed
//! together, paying each covered tree node once, under the token budget C.
//! The exact packers live in [`single`] and [`multi`], the scalable
//! approximation in [`heuristic`].

pub mod heuristic;
pub mod multi;
pub mod single;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{NodeId, TrajectoryTree, TreeAnnotations};

/// Token budget per traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Capacity(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackMethod {
    Single,
    Multi,
    Heuristic,
}

impl std::fmt::Display for PackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PackMethod::Single => write!(f, "single"),
            PackMethod::Multi => write!(f, "multi"),
            PackMethod::Heuristic => write!(f, "heuristic"),
        }
    }
}

/// One packed batch worth of work: the trajectories it covers, the induced
/// node set (union of their root-to-leaf paths), and its token cost.
///
/// For single-path traversals `shared_node` records the selected node; the
/// cost then counts the shared prefix once and linearizes every residual
/// below it, so segments shared between residuals are paid per trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Traversal {
    pub leaves: Vec<String>,
    pub nodes: Vec<NodeId>,
    pub cost: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_node: Option<NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackPlan {
    pub method: PackMethod,
    pub total_cost: u64,
    pub savings: u64,
    pub traversals: Vec<Traversal>,
}

impl PackPlan {
    /// Canonical ordering used by every packer: leaves sorted within each
    /// traversal, traversals sorted by their leaf lists.
    pub fn normalize(&mut self) {
        for t in &mut self.traversals {
            t.leaves.sort();
            t.nodes.sort_unstable();
        }
        self.traversals.sort_by(|a, b| a.leaves.cmp(&b.leaves));
    }

    /// Tie-break key: fewer traversals first, then the lexicographically
    /// smallest normalized grouping.
    pub fn grouping_key(&self) -> (usize, Vec<Vec<String>>) {
        let mut groups: Vec<Vec<String>> = self
            .traversals
            .iter()
            .map(|t| {
                let mut l = t.leaves.clone();
                l.sort();
                l
            })
            .collect();
        groups.sort();
        (groups.len(), groups)
    }
}

#[derive(Debug, Error)]
pub enum PackError {
    #[error("leaf `{id}` needs {required} tokens but capacity is {capacity}")]
    InfeasibleLeaf {
        id: String,
        required: u64,
        capacity: u64,
    },
    #[error(
        "exact packer limit exceeded at node {node}: {what} {value} > {limit} \
         (use the heuristic packer for trees this size)"
    )]
    ExactModeLimitExceeded {
        node: NodeId,
        what: &'static str,
        value: usize,
        limit: usize,
    },
}

/// Every trajectory must fit in a traversal of its own, otherwise no plan
/// covers it.
pub(crate) fn check_leaves_fit(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
) -> Result<(), PackError> {
    for (u, node) in tree.nodes() {
        if !node.leaf_ids.is_empty() && ann.prefix_len[u] > cap.0 {
            return Err(PackError::InfeasibleLeaf {
                id: node.leaf_ids[0].clone(),
                required: ann.prefix_len[u],
                capacity: cap.0,
            });
        }
    }
    Ok(())
}

/// Union of root-to-leaf paths for the given leaf nodes, ascending.
pub(crate) fn induced_nodes(tree: &TrajectoryTree, leaf_nodes: &[NodeId]) -> Vec<NodeId> {
    let mut set = BTreeSet::new();
    for &leaf in leaf_nodes {
        let mut cur = leaf;
        loop {
            if !set.insert(cur) {
                break;
            }
            match tree.node(cur).parent {
                Some(p) => cur = p,
                None => break,
            }
        }
    }
    set.into_iter().collect()
}

/// Build a traversal from trajectory ids with the shared (each node once)
/// cost model.
pub(crate) fn traversal_from_ids(tree: &TrajectoryTree, ids: &[String]) -> Traversal {
    let mut leaf_nodes: Vec<NodeId> = ids
        .iter()
        .map(|id| tree.leaf_node(id).expect("id resolved by caller"))
        .collect();
    leaf_nodes.sort_unstable();
    leaf_nodes.dedup();
    let nodes = induced_nodes(tree, &leaf_nodes);
    let cost = nodes.iter().map(|&u| tree.node(u).len() as u64).sum();
    let mut leaves = ids.to_vec();
    leaves.sort();
    Traversal {
        leaves,
        nodes,
        cost,
        shared_node: None,
    }
}
