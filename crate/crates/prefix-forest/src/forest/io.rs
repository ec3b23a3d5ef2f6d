//! On-disk formats: JSONL trajectory files and recursive tree JSON.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    build_forest, finish_tree, ForestError, NodeId, TokenId, Trajectory, TrajectoryTree, TreeNode,
};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Jsonl {
        line: usize,
        source: serde_json::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Parse one trajectory object per line. Blank lines are skipped; errors
/// carry 1-based line numbers.
pub fn parse_trajectories_jsonl(reader: impl Read) -> Result<Vec<Trajectory>, InputError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|source| InputError::Jsonl { line: i + 1, source })?;
        out.push(t);
    }
    Ok(out)
}

pub fn read_trajectories_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, InputError> {
    parse_trajectories_jsonl(File::open(path)?)
}

/// Recursive tree file node. Leaf ids are only allowed on childless nodes;
/// weights default to 1 and supervision to position 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSpec {
    pub segment: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub leaf_ids: Vec<String>,
}

pub fn read_tree_json(path: impl AsRef<Path>) -> Result<TrajectoryTree, InputError> {
    let spec: TreeSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(tree_from_spec(&spec)?)
}

/// Build a tree from an explicit spec, validating the trie shape: siblings
/// must start with distinct tokens, only the root may have an empty segment,
/// and exactly the childless nodes terminate trajectories. Unlike
/// [`build_forest`] output, explicit trees may contain single-child chains.
pub fn tree_from_spec(spec: &TreeSpec) -> Result<TrajectoryTree, ForestError> {
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut stack: Vec<(&TreeSpec, Option<NodeId>)> = vec![(spec, None)];
    while let Some((s, parent)) = stack.pop() {
        if s.segment.is_empty() && parent.is_some() {
            return Err(ForestError::InvalidTreeSpec(
                "only the root may have an empty segment".into(),
            ));
        }
        if s.segment.is_empty() && s.children.len() == 1 {
            return Err(ForestError::InvalidTreeSpec(
                "an empty root must branch into at least two children".into(),
            ));
        }
        if s.children.is_empty() && s.leaf_ids.is_empty() {
            return Err(ForestError::InvalidTreeSpec(
                "childless node carries no leaf ids".into(),
            ));
        }
        if !s.children.is_empty() && !s.leaf_ids.is_empty() {
            return Err(ForestError::InvalidTreeSpec(format!(
                "internal node carries leaf ids {:?}",
                s.leaf_ids
            )));
        }
        let mut firsts: Vec<TokenId> = Vec::new();
        for c in &s.children {
            match c.segment.first() {
                None => {
                    return Err(ForestError::InvalidTreeSpec(
                        "only the root may have an empty segment".into(),
                    ))
                }
                Some(&t) => {
                    if firsts.contains(&t) {
                        return Err(ForestError::InvalidTreeSpec(format!(
                            "sibling segments share first token {t}"
                        )));
                    }
                    firsts.push(t);
                }
            }
        }
        let id = nodes.len();
        nodes.push(TreeNode {
            segment: s.segment.clone(),
            parent,
            children: Vec::new(),
            leaf_ids: s.leaf_ids.clone(),
            leaf_weights: vec![1.0; s.leaf_ids.len()],
            supervised_cutoff: 0,
        });
        if let Some(p) = parent {
            nodes[p].children.push(id);
        }
        // LIFO pop keeps sibling order: a child's whole subtree is emitted
        // before its next sibling pops.
        for c in s.children.iter().rev() {
            stack.push((c, Some(id)));
        }
    }
    finish_tree(nodes, 0)
}

impl TrajectoryTree {
    /// Inverse of [`tree_from_spec`] up to weights and supervision, which the
    /// tree file format does not carry.
    pub fn to_spec(&self) -> TreeSpec {
        fn build(tree: &TrajectoryTree, u: NodeId) -> TreeSpec {
            let node = tree.node(u);
            TreeSpec {
                segment: node.segment.clone(),
                children: node.children.iter().map(|&c| build(tree, c)).collect(),
                leaf_ids: node.leaf_ids.clone(),
            }
        }
        build(self, self.root())
    }
}

/// Read either input kind and produce a tree.
pub fn read_input(path: impl AsRef<Path>, kind: InputKind) -> Result<TrajectoryTree, InputError> {
    match kind {
        InputKind::Trajectories => {
            let trajectories = read_trajectories_jsonl(path)?;
            Ok(build_forest(&trajectories)?)
        }
        InputKind::Tree => read_tree_json(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Trajectories,
    Tree,
}
