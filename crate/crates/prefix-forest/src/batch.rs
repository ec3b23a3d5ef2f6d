//! Packed batch emission: flatten a traversal into the artifacts the model
//! consumes — tokens, restored position ids, the shared-prefix attention
//! mask spec, per-token gradient scale factors, labels and loss masks.
//!
//! Batches are built from slots. A slot is one occurrence of a tree node in
//! the flattened layout; shared traversals use one slot per node, while
//! single-path traversals linearize the residual below the shared node into
//! one slot chain per trajectory. Token `i` may attend token `j` iff `j`'s
//! slot is an ancestor-or-self of `i`'s slot and `j`'s restored position
//! does not exceed `i`'s, which restricted to any root-to-leaf path is
//! exactly the causal mask over that trajectory.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{NodeId, TokenId, TrajectoryTree, TreeAnnotations};
use crate::packer::Traversal;

/// Default refusal threshold for materializing a dense n x n mask.
pub const DENSE_MASK_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("unknown leaf id `{0}`")]
    UnknownLeaf(String),
    #[error("leaf `{id}` is not under the traversal's shared node {shared_node}")]
    LeafOutsideSharedSubtree { id: String, shared_node: NodeId },
    #[error("traversal covers no leaves")]
    EmptyTraversal,
    #[error("batch of {tokens} tokens exceeds the dense mask cap of {cap}")]
    TooLargeForDenseMask { tokens: usize, cap: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedBatch {
    /// Flattened tokens: slot segments in depth-first order.
    pub tokens: Vec<TokenId>,
    /// Tree node behind each slot. Nodes repeat only in single-path layouts,
    /// where each trajectory's residual is its own slot chain.
    pub nodes: Vec<NodeId>,
    /// Per-slot [start, end) token offsets.
    pub spans: Vec<(usize, usize)>,
    pub slot_parent: Vec<Option<usize>>,
    /// Per-slot strict ancestor slots, root first.
    pub ancestors: Vec<Vec<usize>>,
    /// Per-token position in its original trajectory.
    pub position_ids: Vec<u64>,
    /// Per-token gradient scale: summed weight of the in-batch trajectories
    /// reusing the token.
    pub tree_scale: Vec<f64>,
    pub supervised_mask: Vec<bool>,
    /// Next-token target, `None` at trajectory ends and divergent branch
    /// boundaries (excluded from the loss on both packing sides).
    pub labels: Vec<Option<TokenId>>,
    /// Weight of each in-batch trajectory.
    pub leaf_weights: BTreeMap<String, f64>,
    /// Terminal slot of each in-batch trajectory.
    pub leaf_slot: BTreeMap<String, usize>,
    /// Token index -> slot index.
    pub token_slot: Vec<usize>,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The mask spec: may token `i` attend token `j`?
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        let (si, sj) = (self.token_slot[i], self.token_slot[j]);
        let on_path = si == sj || self.ancestors[si].binary_search(&sj).is_ok();
        on_path && self.position_ids[j] <= self.position_ids[i]
    }

    pub fn dense_mask(&self) -> Result<Array2<bool>, BatchError> {
        self.dense_mask_with_cap(DENSE_MASK_CAP)
    }

    pub fn dense_mask_with_cap(&self, cap: usize) -> Result<Array2<bool>, BatchError> {
        let n = self.len();
        if n > cap {
            return Err(BatchError::TooLargeForDenseMask { tokens: n, cap });
        }
        Ok(Array2::from_shape_fn((n, n), |(i, j)| self.allowed(i, j)))
    }

    /// Token indices along one trajectory's root-to-leaf slot chain, in
    /// original order. Restricting the batch to them reproduces the
    /// trajectory's baseline batch.
    pub fn path_token_indices(&self, id: &str) -> Option<Vec<usize>> {
        let &leaf = self.leaf_slot.get(id)?;
        let mut out = Vec::new();
        for &slot in self.ancestors[leaf].iter().chain([&leaf]) {
            let (start, end) = self.spans[slot];
            out.extend(start..end);
        }
        Some(out)
    }
}

struct SlotPlan {
    node: NodeId,
    parent: Option<usize>,
    scale: f64,
}

struct Builder<'a> {
    tree: &'a TrajectoryTree,
    ann: &'a TreeAnnotations,
    slots: Vec<SlotPlan>,
}

impl<'a> Builder<'a> {
    fn push(&mut self, node: NodeId, parent: Option<usize>, scale: f64) -> usize {
        self.slots.push(SlotPlan {
            node,
            parent,
            scale,
        });
        self.slots.len() - 1
    }

    fn finish(
        self,
        leaf_weights: BTreeMap<String, f64>,
        leaf_slot: BTreeMap<String, usize>,
    ) -> PackedBatch {
        let mut batch = PackedBatch {
            tokens: Vec::new(),
            nodes: Vec::new(),
            spans: Vec::new(),
            slot_parent: Vec::new(),
            ancestors: Vec::new(),
            position_ids: Vec::new(),
            tree_scale: Vec::new(),
            supervised_mask: Vec::new(),
            labels: Vec::new(),
            leaf_weights,
            leaf_slot,
            token_slot: Vec::new(),
        };
        for (si, slot) in self.slots.iter().enumerate() {
            let node = self.tree.node(slot.node);
            let start_pos = self.ann.prefix_len[slot.node] - node.len() as u64;
            let span_start = batch.tokens.len();
            for (i, &tok) in node.segment.iter().enumerate() {
                let pos = start_pos + i as u64;
                let label = if i + 1 < node.len() {
                    Some(node.segment[i + 1])
                } else if node.children.len() == 1 {
                    Some(self.tree.node(node.children[0]).segment[0])
                } else {
                    // trajectory end, or a divergent boundary whose target
                    // differs per branch
                    None
                };
                batch.tokens.push(tok);
                batch.position_ids.push(pos);
                batch.tree_scale.push(slot.scale);
                batch
                    .supervised_mask
                    .push(label.is_some() && pos >= node.supervised_cutoff as u64);
                batch.labels.push(label);
                batch.token_slot.push(si);
            }
            batch.spans.push((span_start, batch.tokens.len()));
            batch.nodes.push(slot.node);
            batch.slot_parent.push(slot.parent);
            let ancestors = match slot.parent {
                None => Vec::new(),
                Some(p) => {
                    let mut a = batch.ancestors[p].clone();
                    a.push(p);
                    a
                }
            };
            batch.ancestors.push(ancestors);
        }
        batch
    }
}

/// Flatten a traversal. Shared traversals pay each induced node once;
/// single-path traversals linearize residuals below the shared node, so the
/// emitted token count equals the traversal cost under either model.
pub fn emit(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    traversal: &Traversal,
) -> Result<PackedBatch, BatchError> {
    if traversal.leaves.is_empty() {
        return Err(BatchError::EmptyTraversal);
    }
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_node: HashMap<NodeId, f64> = HashMap::new();
    let mut leaf_nodes: Vec<NodeId> = Vec::new();
    for id in &traversal.leaves {
        let u = tree
            .leaf_node(id)
            .ok_or_else(|| BatchError::UnknownLeaf(id.clone()))?;
        let w = tree.leaf_weight_of(id).expect("looked up above");
        weights.insert(id.clone(), w);
        *per_node.entry(u).or_default() += w;
        leaf_nodes.push(u);
    }
    leaf_nodes.sort_unstable();
    leaf_nodes.dedup();

    match traversal.shared_node {
        None => emit_shared(tree, ann, &leaf_nodes, &per_node, weights),
        Some(su) => emit_single_path(tree, ann, traversal, su, &per_node, weights),
    }
}

fn emit_shared(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    leaf_nodes: &[NodeId],
    per_node: &HashMap<NodeId, f64>,
    weights: BTreeMap<String, f64>,
) -> Result<PackedBatch, BatchError> {
    let mut in_batch = vec![false; tree.node_count()];
    for &leaf in leaf_nodes {
        let mut cur = Some(leaf);
        while let Some(u) = cur {
            if in_batch[u] {
                break;
            }
            in_batch[u] = true;
            cur = tree.node(u).parent;
        }
    }
    // preorder slots over the induced subtree, children in tree order
    let mut builder = Builder {
        tree,
        ann,
        slots: Vec::new(),
    };
    let mut slot_of = vec![usize::MAX; tree.node_count()];
    let mut stack = vec![(tree.root(), None::<usize>)];
    let mut order: Vec<NodeId> = Vec::new();
    while let Some((u, parent)) = stack.pop() {
        let si = builder.push(u, parent, 0.0);
        slot_of[u] = si;
        order.push(u);
        for &c in tree.node(u).children.iter().rev() {
            if in_batch[c] {
                stack.push((c, Some(si)));
            }
        }
    }
    // subtree weight sums over the induced tree, bottom-up
    for &u in order.iter().rev() {
        let mut scale = per_node.get(&u).copied().unwrap_or(0.0);
        for &c in &tree.node(u).children {
            if in_batch[c] {
                scale += builder.slots[slot_of[c]].scale;
            }
        }
        builder.slots[slot_of[u]].scale = scale;
    }
    let leaf_slot = weights
        .keys()
        .map(|id| {
            let u = tree.leaf_node(id).expect("resolved by emit");
            (id.clone(), slot_of[u])
        })
        .collect();
    Ok(builder.finish(weights, leaf_slot))
}

fn emit_single_path(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    traversal: &Traversal,
    shared: NodeId,
    per_node: &HashMap<NodeId, f64>,
    weights: BTreeMap<String, f64>,
) -> Result<PackedBatch, BatchError> {
    let total_weight: f64 = weights.values().sum();
    let mut builder = Builder {
        tree,
        ann,
        slots: Vec::new(),
    };
    let mut leaf_slot: BTreeMap<String, usize> = BTreeMap::new();
    // shared prefix, one slot per path node
    let mut prefix_slot = None;
    for u in tree.path_from_root(shared) {
        prefix_slot = Some(builder.push(u, prefix_slot, total_weight));
    }
    let shared_slot = prefix_slot.expect("path includes the shared node");

    // one linearized residual chain per trajectory, leaves in subtree order
    let mut stack = vec![shared];
    let mut subtree_leaves: Vec<NodeId> = Vec::new();
    while let Some(u) = stack.pop() {
        let node = tree.node(u);
        if node.is_leaf() {
            subtree_leaves.push(u);
        }
        for &c in node.children.iter().rev() {
            stack.push(c);
        }
    }
    for leaf in subtree_leaves {
        if !per_node.contains_key(&leaf) {
            continue;
        }
        let mut ids: Vec<&String> = tree
            .node(leaf)
            .leaf_ids
            .iter()
            .filter(|id| weights.contains_key(*id))
            .collect();
        ids.sort();
        let residual_path: Vec<NodeId> = {
            let full = tree.path_from_root(leaf);
            let cut = full
                .iter()
                .position(|&u| u == shared)
                .ok_or_else(|| BatchError::LeafOutsideSharedSubtree {
                    id: ids[0].clone(),
                    shared_node: shared,
                })?;
            full[cut + 1..].to_vec()
        };
        for id in ids {
            let w = weights[id];
            let mut parent = shared_slot;
            for &u in &residual_path {
                parent = builder.push(u, Some(parent), w);
            }
            leaf_slot.insert(id.clone(), parent);
        }
    }
    let batch = builder.finish(weights, leaf_slot);
    debug_assert_eq!(batch.len() as u64, traversal.cost);
    Ok(batch)
}

/// The baseline comparator's input: one trajectory linearized with plain
/// causal masking, unit position ids and its own weight as the scale.
pub fn baseline_emit(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    leaf_id: &str,
) -> Result<PackedBatch, BatchError> {
    let leaf = tree
        .leaf_node(leaf_id)
        .ok_or_else(|| BatchError::UnknownLeaf(leaf_id.to_string()))?;
    let w = tree.leaf_weight_of(leaf_id).expect("looked up above");
    let mut builder = Builder {
        tree,
        ann,
        slots: Vec::new(),
    };
    let mut parent = None;
    for u in tree.path_from_root(leaf) {
        parent = Some(builder.push(u, parent, w));
    }
    let mut weights = BTreeMap::new();
    weights.insert(leaf_id.to_string(), w);
    let mut leaf_slot = BTreeMap::new();
    leaf_slot.insert(leaf_id.to_string(), parent.expect("path is non-empty"));
    Ok(builder.finish(weights, leaf_slot))
}
