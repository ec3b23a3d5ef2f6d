//! Trajectory-tree packing and gradient restoration.
//!
//! Agent rollouts that branch from shared prefixes form a trie; processing
//! each root-to-leaf path independently recomputes every shared segment.
//! This crate merges rollouts into trajectory trees, solves the
//! capacity-constrained packing problem over them (exact tree DP and a
//! scalable heuristic), emits packed batches with shared-prefix attention
//! masks, restored position ids and per-token gradient scale factors, and
//! verifies on a desk-scale reference transformer that tree-packed training
//! produces the same parameter gradients as the sequence-packed baseline.
//!
//! The reference model is generic over its scalar via
//! [`model::scalar::Scalar`]; verification runs at f64, and the `*32`
//! aliases exist for realism reporting at f32 with relaxed tolerances.

pub mod batch;
pub mod forest;
pub mod model;
pub mod oracle;
pub mod packer;
pub mod report;
pub mod synth;

pub use batch::{baseline_emit, emit, PackedBatch};
pub use forest::{
    active_trajectory_curve, annotate, build_forest, linear_token_total, por, tree_token_total,
    CurvePoint, ForestError, NodeId, TokenId, Trajectory, TrajectoryTree, TreeAnnotations,
    TreeNode,
};
pub use oracle::{brute_force_antichain, brute_force_optimal, group_cost, validate_plan};
pub use packer::heuristic::{effective_reuse_ratio, heuristic_pack};
pub use packer::multi::{multi_path_dp, multi_path_dp_with, ExactLimits};
pub use packer::single::{feasible, reconstruct_plan, single_path_dp};
pub use packer::{Capacity, PackMethod, PackPlan, Traversal};

/// Concrete scalar instantiations of the reference model.
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ParamGrads64 = model::ParamGrads<f64>;
pub type ParamGrads32 = model::ParamGrads<f32>;
