//! Machine-readable reports behind the command-line surface: dataset
//! analysis, packing stats, gradient verification, and the token-ratio
//! throughput model.

use serde::Serialize;
use thiserror::Error;

use crate::batch::BatchError;
use crate::forest::io::InputError;
use crate::forest::{
    active_trajectory_curve, linear_token_total, por, tree_token_total, CurvePoint, ForestError,
    TrajectoryTree, TreeAnnotations,
};
use crate::model::run::{
    compare_grads, negative_controls, prefix_identity_max_abs_err, run_baseline, run_tree,
    FiniteDiffReport, GradReport, NegativeControls, TreeRunOptions,
};
use crate::model::scalar::Scalar;
use crate::model::{init_model, ModelConfig, ModelError, ScalerMode};
use crate::oracle::{brute_force_optimal, validate_plan, OracleError, PlanViolation};
use crate::packer::heuristic::{effective_reuse_ratio, heuristic_pack};
use crate::packer::multi::{multi_path_dp_with, ExactLimits};
use crate::packer::single::{reconstruct_plan, single_path_dp};
use crate::packer::{Capacity, PackError, PackMethod, PackPlan};

/// Wall-clock speedups depend on kernels and cluster hardware that this
/// toolkit deliberately does not model; reports carry this label so the
/// numbers cannot be mistaken for measured speedups.
pub const BENCH_SCOPE_NOTE: &str = "token-processing ratios from the packing cost model; \
     GPU wall-clock speedup is NOT measured by this tool";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("packer produced an invalid plan: {0:?}")]
    PlanInvalid(Vec<PlanViolation>),
}

impl PipelineError {
    /// Process exit code: 2 input errors, 3 size/limit refusals.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Pack(PackError::ExactModeLimitExceeded { .. }) => 3,
            PipelineError::Oracle(OracleError::TooManyLeaves { .. }) => 3,
            PipelineError::Oracle(OracleError::TooManyNodes { .. }) => 3,
            PipelineError::Batch(BatchError::TooLargeForDenseMask { .. }) => 3,
            PipelineError::Model(ModelError::Batch(BatchError::TooLargeForDenseMask {
                ..
            })) => 3,
            _ => 2,
        }
    }
}

pub fn pack_with_method(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    cap: Capacity,
    method: PackMethod,
    limits: &ExactLimits,
) -> Result<PackPlan, PipelineError> {
    let plan = match method {
        PackMethod::Single => {
            let sol = single_path_dp(tree, ann, cap)?;
            reconstruct_plan(tree, ann, &sol)
        }
        PackMethod::Multi => multi_path_dp_with(tree, ann, cap, limits, true)?,
        PackMethod::Heuristic => heuristic_pack(tree, ann, cap)?,
    };
    let violations = validate_plan(tree, ann, &plan, cap);
    if !violations.is_empty() {
        return Err(PipelineError::PlanInvalid(violations));
    }
    Ok(plan)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub nodes: usize,
    pub leaves: usize,
    pub trajectories: usize,
    pub linear_token_total: u64,
    pub tree_token_total: u64,
    pub por: f64,
    pub max_depth: u64,
    /// (leaf depth, trajectory count) pairs, ascending.
    pub depth_histogram: Vec<(u64, u64)>,
    pub baseline_curve_area: u64,
    pub tree_curve_area: u64,
}

pub fn analyze(tree: &TrajectoryTree, ann: &TreeAnnotations) -> (AnalyzeReport, Vec<CurvePoint>) {
    let curve = active_trajectory_curve(tree, ann);
    let mut histogram = std::collections::BTreeMap::new();
    for (u, node) in tree.nodes() {
        if !node.leaf_ids.is_empty() {
            *histogram.entry(ann.prefix_len[u]).or_insert(0u64) += node.leaf_ids.len() as u64;
        }
    }
    let report = AnalyzeReport {
        nodes: tree.node_count(),
        leaves: tree.leaves().len(),
        trajectories: tree.trajectory_count(),
        linear_token_total: linear_token_total(tree, ann),
        tree_token_total: tree_token_total(tree),
        por: por(tree, ann),
        max_depth: histogram.keys().last().copied().unwrap_or(0),
        depth_histogram: histogram.into_iter().collect(),
        baseline_curve_area: curve.iter().map(|p| p.baseline_active).sum(),
        tree_curve_area: curve.iter().map(|p| p.tree_active).sum(),
    };
    (report, curve)
}

#[derive(Debug, Clone, Serialize)]
pub struct PackStats {
    pub method: PackMethod,
    pub capacity: u64,
    pub traversals: usize,
    pub total_cost: u64,
    pub savings: u64,
    pub linear_token_total: u64,
    pub tree_token_total: u64,
    pub por: f64,
    pub err: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_cost: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimality_gap: Option<u64>,
}

pub fn pack_stats(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    cap: Capacity,
    with_oracle: bool,
) -> Result<PackStats, PipelineError> {
    let optimal_cost = if with_oracle {
        Some(brute_force_optimal(tree, ann, cap)?.0)
    } else {
        None
    };
    Ok(PackStats {
        method: plan.method,
        capacity: cap.0,
        traversals: plan.traversals.len(),
        total_cost: plan.total_cost,
        savings: plan.savings,
        linear_token_total: linear_token_total(tree, ann),
        tree_token_total: tree_token_total(tree),
        por: por(tree, ann),
        err: effective_reuse_ratio(plan, tree, ann),
        optimal_cost,
        optimality_gap: optimal_cost.map(|o| plan.total_cost - o),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn default_tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-9,
            Precision::F32 => 1e-4,
        }
    }

    pub fn loss_tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-10,
            Precision::F32 => 1e-4,
        }
    }

    pub fn prefix_tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-12,
            Precision::F32 => 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyRequest {
    pub capacity: Capacity,
    pub method: PackMethod,
    pub model: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Gradient tolerance; precision default when absent.
    pub tolerance: Option<f64>,
    pub disable_scaler: bool,
    pub plain_causal_mask: bool,
    pub limits: ExactLimits,
    /// Also run the finite-difference check (f64 only).
    pub finite_diff_coords: usize,
}

impl VerifyRequest {
    pub fn new(capacity: Capacity) -> Self {
        VerifyRequest {
            capacity,
            method: PackMethod::Multi,
            model: ModelConfig::default(),
            seed: 7,
            precision: Precision::F64,
            tolerance: None,
            disable_scaler: false,
            plain_causal_mask: false,
            limits: ExactLimits::default(),
            finite_diff_coords: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    pub method: PackMethod,
    pub traversals: usize,
    pub total_cost: u64,
    pub savings: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub model: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
    pub capacity: u64,
    pub plan: PlanSummary,
    pub tolerance: f64,
    pub disable_scaler: bool,
    pub plain_causal_mask: bool,
    pub gradients: GradReport,
    pub loss_rel_err: f64,
    pub loss_tolerance: f64,
    pub prefix_max_abs_err: f64,
    pub prefix_tolerance: f64,
    pub negative_controls: NegativeControls,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finite_diff: Option<FiniteDiffReport>,
    pub pass: bool,
}

pub fn run_verify(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    req: &VerifyRequest,
) -> Result<VerifyReport, PipelineError> {
    let plan = pack_with_method(tree, ann, req.capacity, req.method, &req.limits)?;
    match req.precision {
        Precision::F64 => verify_with::<f64>(tree, ann, &plan, req),
        Precision::F32 => verify_with::<f32>(tree, ann, &plan, req),
    }
}

fn verify_with<T: Scalar>(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    req: &VerifyRequest,
) -> Result<VerifyReport, PipelineError> {
    let tolerance = req.tolerance.unwrap_or(req.precision.default_tolerance());
    let loss_tolerance = req.precision.loss_tolerance();
    let prefix_tolerance = req.precision.prefix_tolerance();

    let params = init_model::<T>(req.model, req.seed)?;
    let baseline = run_baseline(tree, ann, &params)?;
    let opts = TreeRunOptions {
        scaler: if req.disable_scaler {
            ScalerMode::Disabled
        } else {
            ScalerMode::Folded
        },
        plain_causal_mask: req.plain_causal_mask,
        ..Default::default()
    };
    let packed = run_tree(tree, ann, plan, &params, &opts)?;
    let gradients = compare_grads(&packed.grads, &baseline.grads, tolerance)?;

    let base_loss = baseline.loss.to_f64_lossy();
    let loss_rel_err = (packed.loss.to_f64_lossy() - base_loss).abs() / base_loss.abs().max(1e-12);
    let prefix_max_abs_err =
        prefix_identity_max_abs_err(tree, ann, plan, &params, req.plain_causal_mask)?;
    let controls = negative_controls(
        tree,
        ann,
        plan,
        &params,
        &baseline.grads,
        tolerance,
        prefix_tolerance,
    )?;
    let finite_diff = if req.finite_diff_coords > 0 && req.precision == Precision::F64 {
        // the finite-difference oracle only resolves at f64
        let params64 = init_model::<f64>(req.model, req.seed)?;
        Some(crate::model::run::finite_diff_check(
            tree,
            ann,
            plan,
            &params64,
            req.seed,
            req.finite_diff_coords,
        )?)
    } else {
        None
    };

    let controls_ok = controls.scaler_disabled_failed != Some(false)
        && controls.plain_causal_failed != Some(false);
    let fd_ok = finite_diff.as_ref().is_none_or(|f| f.max_rel_err <= 1e-6);
    let pass = gradients.pass
        && loss_rel_err <= loss_tolerance
        && prefix_max_abs_err <= prefix_tolerance
        && controls_ok
        && fd_ok;

    Ok(VerifyReport {
        model: req.model,
        seed: req.seed,
        precision: req.precision,
        capacity: req.capacity.0,
        plan: PlanSummary {
            method: plan.method,
            traversals: plan.traversals.len(),
            total_cost: plan.total_cost,
            savings: plan.savings,
        },
        tolerance,
        disable_scaler: req.disable_scaler,
        plain_causal_mask: req.plain_causal_mask,
        gradients,
        loss_rel_err,
        loss_tolerance,
        prefix_max_abs_err,
        prefix_tolerance,
        negative_controls: controls,
        finite_diff,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub capacity: u64,
    pub packer: PackMethod,
    pub trajectories: usize,
    pub nodes: usize,
    pub linear_token_total: u64,
    pub tree_token_total: u64,
    pub plan_total_cost: u64,
    pub traversals: usize,
    pub por: f64,
    pub err: f64,
    /// baseline tokens / packed tokens = 1 / (1 - ERR)
    pub token_ratio: f64,
    /// Upper bound at unlimited memory: 1 / (1 - POR)
    pub full_reuse_ratio: f64,
    pub wall_clock_measured: bool,
    pub note: &'static str,
}

pub fn bench_report(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    cap: Capacity,
) -> BenchReport {
    let linear = linear_token_total(tree, ann);
    let err = effective_reuse_ratio(plan, tree, ann);
    let p = por(tree, ann);
    BenchReport {
        capacity: cap.0,
        packer: plan.method,
        trajectories: tree.trajectory_count(),
        nodes: tree.node_count(),
        linear_token_total: linear,
        tree_token_total: tree_token_total(tree),
        plan_total_cost: plan.total_cost,
        traversals: plan.traversals.len(),
        por: p,
        err,
        token_ratio: 1.0 / (1.0 - err),
        full_reuse_ratio: 1.0 / (1.0 - p),
        wall_clock_measured: false,
        note: BENCH_SCOPE_NOTE,
    }
}
