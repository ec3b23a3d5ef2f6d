//! Trajectory tries: merge rollouts that share token prefixes into a tree,
//! annotate it with the per-node quantities the packers consume, and compute
//! dataset overlap metrics (POR, active-trajectory curves).

pub mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into [`TrajectoryTree::nodes`].
pub type NodeId = usize;
/// Opaque token id. No tokenizer is in scope; ids only need to be comparable.
pub type TokenId = u32;

fn default_weight() -> f64 {
    1.0
}

/// One rollout: a token sequence with a loss weight and the first supervised
/// position.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub tokens: Vec<TokenId>,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub supervised_from: usize,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Trajectory {
            id: id.into(),
            tokens,
            weight: 1.0,
            supervised_from: 0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_supervised_from(mut self, supervised_from: usize) -> Self {
        self.supervised_from = supervised_from;
        self
    }

    fn validate(&self) -> Result<(), ForestError> {
        if self.tokens.is_empty() {
            return Err(ForestError::EmptyTrajectory(self.id.clone()));
        }
        if self.supervised_from >= self.tokens.len() {
            return Err(ForestError::SupervisedFromOutOfRange {
                id: self.id.clone(),
                supervised_from: self.supervised_from,
                len: self.tokens.len(),
            });
        }
        if !(self.weight >= 0.0) {
            return Err(ForestError::BadWeight {
                id: self.id.clone(),
                weight: self.weight,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no trajectories given")]
    EmptyInput,
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
    #[error("trajectory `{0}` has no tokens")]
    EmptyTrajectory(String),
    #[error("trajectory `{id}`: supervised_from {supervised_from} out of range for {len} tokens")]
    SupervisedFromOutOfRange {
        id: String,
        supervised_from: usize,
        len: usize,
    },
    #[error("trajectory `{id}`: weight {weight} is not a non-negative number")]
    BadWeight { id: String, weight: f64 },
    #[error(
        "trajectory `{id}` is a strict prefix of `{of}`: a rollout may not \
         terminate at an internal node of the trie"
    )]
    PrefixOfAnother { id: String, of: String },
    #[error("tree spec invalid: {0}")]
    InvalidTreeSpec(String),
}

/// One trie node: a maximal token segment shared by every trajectory whose
/// path passes through it. Trajectories terminating here are listed in
/// `leaf_ids` (only childless nodes terminate trajectories; several identical
/// rollouts may terminate at the same node).
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub segment: Vec<TokenId>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub leaf_ids: Vec<String>,
    pub leaf_weights: Vec<f64>,
    /// First original position that contributes to the loss for tokens of
    /// this node: the max `supervised_from` over all trajectories in the
    /// subtree, so a shared token is supervised only if it is supervised in
    /// every trajectory sharing it.
    pub supervised_cutoff: usize,
}

impl TreeNode {
    /// Segment token count.
    pub fn len(&self) -> usize {
        self.segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment.is_empty()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Sum of weights of trajectories terminating here.
    pub fn leaf_weight(&self) -> f64 {
        self.leaf_weights.iter().sum()
    }
}

/// Trie of token segments. Root-to-leaf paths reproduce the input rollouts.
#[derive(Debug, Clone)]
pub struct TrajectoryTree {
    nodes: Vec<TreeNode>,
    root: NodeId,
    leaf_lookup: HashMap<String, NodeId>,
}

impl TrajectoryTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, u: NodeId) -> &TreeNode {
        &self.nodes[u]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &TreeNode)> {
        self.nodes.iter().enumerate()
    }

    /// Childless nodes in depth-first order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.dfs_order()
            .into_iter()
            .filter(|&u| self.nodes[u].is_leaf())
            .collect()
    }

    /// Node where trajectory `id` terminates.
    pub fn leaf_node(&self, id: &str) -> Option<NodeId> {
        self.leaf_lookup.get(id).copied()
    }

    pub fn leaf_weight_of(&self, id: &str) -> Option<f64> {
        let u = self.leaf_node(id)?;
        let node = &self.nodes[u];
        let pos = node.leaf_ids.iter().position(|x| x == id)?;
        Some(node.leaf_weights[pos])
    }

    /// Total number of trajectories (leaf ids across all nodes).
    pub fn trajectory_count(&self) -> usize {
        self.nodes.iter().map(|n| n.leaf_ids.len()).sum()
    }

    /// All trajectory ids in ascending order.
    pub fn trajectory_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.leaf_lookup.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Preorder depth-first traversal with children in tree order. Iterative:
    /// trees can be deep.
    pub fn dfs_order(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            order.push(u);
            for &c in self.nodes[u].children.iter().rev() {
                stack.push(c);
            }
        }
        order
    }

    /// Reverse postorder companion of [`dfs_order`]: children before parents.
    pub fn post_order(&self) -> Vec<NodeId> {
        let mut order = self.dfs_order();
        order.reverse();
        order
    }

    /// Nodes from the root down to `u`, inclusive.
    pub fn path_from_root(&self, u: NodeId) -> Vec<NodeId> {
        let mut path = vec![u];
        let mut cur = u;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Root-to-leaf token sequences with their ids and weights; the multiset
    /// of sequences equals the input rollouts.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut out = Vec::new();
        // prefix stack maintained along an iterative DFS
        let mut stack: Vec<(NodeId, usize)> = vec![(self.root, 0)];
        let mut prefix: Vec<TokenId> = Vec::new();
        while let Some((u, child_idx)) = stack.pop() {
            let node = &self.nodes[u];
            if child_idx == 0 {
                prefix.extend_from_slice(&node.segment);
                for (id, w) in node.leaf_ids.iter().zip(&node.leaf_weights) {
                    out.push(Trajectory::new(id.clone(), prefix.clone()).with_weight(*w));
                }
            }
            if child_idx < node.children.len() {
                stack.push((u, child_idx + 1));
                stack.push((node.children[child_idx], 0));
            } else {
                prefix.truncate(prefix.len() - node.segment.len());
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

/// Longest-common-prefix merge of rollouts into a trie.
///
/// Two trajectories share a node path exactly as long as their common token
/// prefix; segments are maximal. Identical token sequences merge into one
/// leaf node carrying several ids. A trajectory that is a strict prefix of
/// another is rejected: it would have to terminate at an internal node,
/// which the trie cannot represent.
pub fn build_forest(trajectories: &[Trajectory]) -> Result<TrajectoryTree, ForestError> {
    if trajectories.is_empty() {
        return Err(ForestError::EmptyInput);
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for t in trajectories {
        t.validate()?;
        if seen.insert(&t.id, ()).is_some() {
            return Err(ForestError::DuplicateId(t.id.clone()));
        }
    }

    // Token-level trie first, compacted into maximal segments below.
    struct Trie {
        token: TokenId,
        children: Vec<usize>,
        terminal: Vec<usize>, // indices into `trajectories`
    }
    let mut trie: Vec<Trie> = vec![Trie {
        token: 0,
        children: Vec::new(),
        terminal: Vec::new(),
    }];
    for (ti, t) in trajectories.iter().enumerate() {
        let mut cur = 0usize;
        for &tok in &t.tokens {
            let found = trie[cur].children.iter().find(|&&c| trie[c].token == tok);
            cur = match found {
                Some(&c) => c,
                None => {
                    let c = trie.len();
                    trie.push(Trie {
                        token: tok,
                        children: Vec::new(),
                        terminal: Vec::new(),
                    });
                    trie[cur].children.push(c);
                    c
                }
            };
        }
        trie[cur].terminal.push(ti);
    }
    // A terminal trie node with children means some rollout is a strict
    // prefix of another.
    for n in trie.iter() {
        if !n.terminal.is_empty() && !n.children.is_empty() {
            let id = trajectories[n.terminal[0]].id.clone();
            // find any extension for the error message
            let mut cur = n.children[0];
            while trie[cur].terminal.is_empty() {
                cur = trie[cur].children[0];
            }
            let of = trajectories[trie[cur].terminal[0]].id.clone();
            return Err(ForestError::PrefixOfAnother { id, of });
        }
    }

    // Compact chains of single-child trie nodes into segment nodes. The
    // virtual trie root becomes a synthetic empty root only when the inputs
    // share no first token.
    let mut nodes: Vec<TreeNode> = Vec::new();
    let single_root = trie[0].children.len() == 1;
    let root_id = 0usize;
    nodes.push(TreeNode {
        segment: Vec::new(),
        parent: None,
        children: Vec::new(),
        leaf_ids: Vec::new(),
        leaf_weights: Vec::new(),
        supervised_cutoff: 0,
    });
    // Stack entries: (trie node starting a chain, parent tree node or the
    // marker that the chain extends the root itself).
    enum Attach {
        Parent(NodeId),
        IntoRoot,
    }
    let mut stack: Vec<(usize, Attach)> = Vec::new();
    if single_root {
        stack.push((trie[0].children[0], Attach::IntoRoot));
    } else {
        for &c in trie[0].children.iter().rev() {
            stack.push((c, Attach::Parent(root_id)));
        }
    }
    while let Some((start, attach)) = stack.pop() {
        let mut segment = vec![trie[start].token];
        let mut cur = start;
        while trie[cur].children.len() == 1 && trie[cur].terminal.is_empty() {
            cur = trie[cur].children[0];
            segment.push(trie[cur].token);
        }
        let node_id = match attach {
            Attach::IntoRoot => {
                nodes[root_id].segment = segment;
                root_id
            }
            Attach::Parent(p) => {
                let id = nodes.len();
                nodes.push(TreeNode {
                    segment,
                    parent: Some(p),
                    children: Vec::new(),
                    leaf_ids: Vec::new(),
                    leaf_weights: Vec::new(),
                    supervised_cutoff: 0,
                });
                nodes[p].children.push(id);
                id
            }
        };
        for &ti in &trie[cur].terminal {
            nodes[node_id].leaf_ids.push(trajectories[ti].id.clone());
            nodes[node_id].leaf_weights.push(trajectories[ti].weight);
        }
        for &c in trie[cur].children.iter().rev() {
            stack.push((c, Attach::Parent(node_id)));
        }
    }

    let supervised: HashMap<&str, usize> = trajectories
        .iter()
        .map(|t| (t.id.as_str(), t.supervised_from))
        .collect();
    let mut tree = finish_tree(nodes, root_id)?;
    compute_supervised_cutoffs(&mut tree, &supervised);
    Ok(tree)
}

/// Shared tail of tree construction: leaf lookup plus structural sanity.
fn finish_tree(nodes: Vec<TreeNode>, root: NodeId) -> Result<TrajectoryTree, ForestError> {
    let mut leaf_lookup = HashMap::new();
    for (u, node) in nodes.iter().enumerate() {
        for id in &node.leaf_ids {
            if leaf_lookup.insert(id.clone(), u).is_some() {
                return Err(ForestError::DuplicateId(id.clone()));
            }
        }
    }
    Ok(TrajectoryTree {
        nodes,
        root,
        leaf_lookup,
    })
}

fn compute_supervised_cutoffs(tree: &mut TrajectoryTree, supervised: &HashMap<&str, usize>) {
    for u in tree.post_order() {
        let mut cutoff = 0usize;
        for id in &tree.nodes[u].leaf_ids {
            cutoff = cutoff.max(*supervised.get(id.as_str()).unwrap_or(&0));
        }
        for ci in 0..tree.nodes[u].children.len() {
            let c = tree.nodes[u].children[ci];
            cutoff = cutoff.max(tree.nodes[c].supervised_cutoff);
        }
        tree.nodes[u].supervised_cutoff = cutoff;
    }
}

/// Per-node quantities from one post-order pass: prefix length L, subtree
/// trajectory count n, residual length R, and subtree segment tokens.
#[derive(Debug, Clone)]
pub struct TreeAnnotations {
    /// L(u): token length of the root-to-u path, both endpoints included.
    pub prefix_len: Vec<u64>,
    /// n(u): number of trajectories terminating in u's subtree.
    pub leaf_count: Vec<u64>,
    /// R(u): sum over trajectories in the subtree of the path length from u
    /// (exclusive) to their leaf (inclusive).
    pub residual: Vec<u64>,
    /// Sum of segment lengths over u's subtree, u included.
    pub subtree_tokens: Vec<u64>,
}

impl TreeAnnotations {
    /// Token depth of a node; identical to its prefix length.
    pub fn depth(&self, u: NodeId) -> u64 {
        self.prefix_len[u]
    }
}

pub fn annotate(tree: &TrajectoryTree) -> TreeAnnotations {
    let n = tree.node_count();
    let mut ann = TreeAnnotations {
        prefix_len: vec![0; n],
        leaf_count: vec![0; n],
        residual: vec![0; n],
        subtree_tokens: vec![0; n],
    };
    for u in tree.dfs_order() {
        let node = tree.node(u);
        let parent_len = node.parent.map_or(0, |p| ann.prefix_len[p]);
        ann.prefix_len[u] = parent_len + node.len() as u64;
    }
    for u in tree.post_order() {
        let node = tree.node(u);
        let mut leaves = node.leaf_ids.len() as u64;
        let mut residual = 0u64;
        let mut subtree = node.len() as u64;
        for &c in &node.children {
            leaves += ann.leaf_count[c];
            residual += ann.leaf_count[c] * tree.node(c).len() as u64 + ann.residual[c];
            subtree += ann.subtree_tokens[c];
        }
        ann.leaf_count[u] = leaves;
        ann.residual[u] = residual;
        ann.subtree_tokens[u] = subtree;
    }
    ann
}

/// Total tokens a baseline sequence-packed run processes: each trajectory
/// pays its full root-to-leaf length.
pub fn linear_token_total(tree: &TrajectoryTree, ann: &TreeAnnotations) -> u64 {
    tree.nodes()
        .map(|(u, node)| node.leaf_ids.len() as u64 * ann.prefix_len[u])
        .sum()
}

/// Total tokens under unlimited reuse: every segment paid exactly once.
pub fn tree_token_total(tree: &TrajectoryTree) -> u64 {
    tree.nodes().map(|(_, node)| node.len() as u64).sum()
}

/// Potential Overlap Ratio: fraction of baseline tokens eliminated when the
/// whole tree is processed at once. 0 for a single trajectory; approaches 1
/// as overlap grows.
pub fn por(tree: &TrajectoryTree, ann: &TreeAnnotations) -> f64 {
    let linear = linear_token_total(tree, ann);
    if linear == 0 {
        return 0.0;
    }
    1.0 - tree_token_total(tree) as f64 / linear as f64
}

/// One row of the active-trajectory profile at a token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub position: u64,
    pub baseline_active: u64,
    pub tree_active: u64,
}

/// Active counts per token position: how many sequences the baseline keeps
/// alive at position p, versus how many tree nodes span p. Curve areas equal
/// the two token totals.
pub fn active_trajectory_curve(tree: &TrajectoryTree, ann: &TreeAnnotations) -> Vec<CurvePoint> {
    let max_depth = tree
        .nodes()
        .filter(|(_, n)| n.is_leaf())
        .map(|(u, _)| ann.prefix_len[u])
        .max()
        .unwrap_or(0) as usize;
    let mut baseline = vec![0i64; max_depth + 1];
    let mut treec = vec![0i64; max_depth + 1];
    for (u, node) in tree.nodes() {
        let end = ann.prefix_len[u] as usize;
        let start = end - node.len();
        if node.len() > 0 {
            treec[start] += 1;
            treec[end] -= 1;
        }
        if node.is_leaf() {
            baseline[0] += node.leaf_ids.len() as i64;
            baseline[end] -= node.leaf_ids.len() as i64;
        }
    }
    let mut out = Vec::with_capacity(max_depth);
    let (mut b, mut t) = (0i64, 0i64);
    for p in 0..max_depth {
        b += baseline[p];
        t += treec[p];
        out.push(CurvePoint {
            position: p as u64,
            baseline_active: b as u64,
            tree_active: t as u64,
        });
    }
    out
}

#[cfg(test)]
mod tests;
