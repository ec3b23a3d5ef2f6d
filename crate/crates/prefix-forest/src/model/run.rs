//! End-to-end gradient runs over trees and plans, and the checks built on
//! them: baseline-vs-tree gradient comparison, shared-prefix forward
//! identity, central finite differences, and the two negative controls.

use serde::Serialize;

use crate::batch::{baseline_emit, emit, PackedBatch, DENSE_MASK_CAP};
use crate::forest::{TrajectoryTree, TreeAnnotations};
use crate::packer::PackPlan;

use super::scalar::Scalar;
use super::{backward, forward, ModelBatch, ModelError, ModelParams, ParamGrads, ScalerMode};

/// Denominator floor for relative gradient errors at f64; f32 comparisons
/// use the scaled analogue from [`Scalar::rel_floor`].
pub const REL_FLOOR: f64 = 1e-12;
/// A central difference at eps 1e-6 in f64 carries absolute noise near
/// |loss| * machine_eps / (2 * eps), about |loss| * 1e-10. The relative
/// check floors its denominator two decades above that noise, so gradients
/// too small for the difference quotient to resolve are held to an honest
/// absolute tolerance instead of failing on rounding dust.
pub const FD_FLOOR_PER_LOSS: f64 = 2e-2;
pub const FD_FLOOR_MIN: f64 = 1e-2;
pub const FD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct TreeRunOptions {
    pub scaler: ScalerMode,
    pub plain_causal_mask: bool,
    pub dense_mask_cap: usize,
}

impl Default for TreeRunOptions {
    fn default() -> Self {
        TreeRunOptions {
            scaler: ScalerMode::Folded,
            plain_causal_mask: false,
            dense_mask_cap: DENSE_MASK_CAP,
        }
    }
}

pub struct RunOutput<T> {
    pub grads: ParamGrads<T>,
    pub loss: T,
    pub batches: usize,
}

fn run_one<T: Scalar>(
    params: &ModelParams<T>,
    packed: &PackedBatch,
    opts: &TreeRunOptions,
) -> Result<(ParamGrads<T>, T), ModelError> {
    let batch = ModelBatch::new(
        packed,
        &params.config,
        opts.plain_causal_mask,
        opts.dense_mask_cap,
    )?;
    let cache = forward(params, &batch)?;
    let grads = backward(params, &cache, &batch, opts.scaler);
    Ok((grads, cache.loss))
}

/// Sequence-packed reference: every trajectory forward/backward on its own,
/// gradients accumulated in ascending id order so runs are reproducible.
pub fn run_baseline<T: Scalar>(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    params: &ModelParams<T>,
) -> Result<RunOutput<T>, ModelError> {
    let opts = TreeRunOptions::default();
    let mut grads = ParamGrads::zeros_like(params);
    let mut loss = T::zero();
    let mut batches = 0;
    for id in tree.trajectory_ids() {
        let packed = baseline_emit(tree, ann, &id)?;
        let (g, l) = run_one(params, &packed, &opts)?;
        grads.accumulate(&g);
        loss += l;
        batches += 1;
    }
    Ok(RunOutput {
        grads,
        loss,
        batches,
    })
}

/// Tree-packed run: one forward/backward per traversal, accumulated in plan
/// order.
pub fn run_tree<T: Scalar>(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    params: &ModelParams<T>,
    opts: &TreeRunOptions,
) -> Result<RunOutput<T>, ModelError> {
    let mut grads = ParamGrads::zeros_like(params);
    let mut loss = T::zero();
    for traversal in &plan.traversals {
        let packed = emit(tree, ann, traversal)?;
        let (g, l) = run_one(params, &packed, opts)?;
        grads.accumulate(&g);
        loss += l;
    }
    Ok(RunOutput {
        grads,
        loss,
        batches: plan.traversals.len(),
    })
}

/// Elementwise comparison of two gradient sets.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub argmax_param: String,
    pub argmax_index: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative error against `reference` with the denominator floored at
/// [`REL_FLOOR`]; pass iff the max relative error meets `tolerance`.
pub fn compare_grads<T: Scalar>(
    got: &ParamGrads<T>,
    reference: &ParamGrads<T>,
    tolerance: f64,
) -> Result<GradReport, ModelError> {
    let a = got.named_views();
    let b = reference.named_views();
    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        argmax_param: String::new(),
        argmax_index: 0,
        tolerance,
        pass: true,
    };
    for ((name, va), (bname, vb)) in a.iter().zip(b.iter()) {
        if name != bname || va.shape() != vb.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "{name} {:?} vs {bname} {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        for (i, (x, y)) in va.iter().zip(vb.iter()).enumerate() {
            let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
            let abs = (x - y).abs();
            let rel = abs / y.abs().max(T::rel_floor());
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.argmax_param = name.clone();
                report.argmax_index = i;
            }
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    Ok(report)
}

/// Max absolute logits difference between every trajectory's rows in the
/// packed batches and its standalone baseline forward. Near machine zero
/// under the shared-prefix mask; plainly nonzero under a causal mask that
/// leaks across branches.
pub fn prefix_identity_max_abs_err<T: Scalar>(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    params: &ModelParams<T>,
    plain_causal_mask: bool,
) -> Result<f64, ModelError> {
    let opts = TreeRunOptions {
        plain_causal_mask,
        ..Default::default()
    };
    let mut max_err = 0.0f64;
    for traversal in &plan.traversals {
        let packed = emit(tree, ann, traversal)?;
        let batch = ModelBatch::new(
            &packed,
            &params.config,
            opts.plain_causal_mask,
            opts.dense_mask_cap,
        )?;
        let cache = forward(params, &batch)?;
        for id in packed.leaf_weights.keys() {
            let base = baseline_emit(tree, ann, id)?;
            let base_batch = ModelBatch::new(&base, &params.config, false, opts.dense_mask_cap)?;
            let base_cache = forward(params, &base_batch)?;
            let path = packed
                .path_token_indices(id)
                .ok_or_else(|| ModelError::UnknownLeaf(id.clone()))?;
            for (bi, &ti) in path.iter().enumerate() {
                for j in 0..params.config.vocab {
                    let d = (cache.logits[(ti, j)].to_f64_lossy()
                        - base_cache.logits[(bi, j)].to_f64_lossy())
                    .abs();
                    if d > max_err {
                        max_err = d;
                    }
                }
            }
        }
    }
    Ok(max_err)
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteDiffReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub eps: f64,
}

/// Central finite differences of the total tree-packed loss against the
/// analytic gradients, on `coords` uniformly random parameter coordinates.
pub fn finite_diff_check(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    params: &ModelParams<f64>,
    seed: u64,
    coords: usize,
) -> Result<FiniteDiffReport, ModelError> {
    use rand::{Rng, SeedableRng};
    let opts = TreeRunOptions::default();
    let analytic = run_tree(tree, ann, plan, params, &opts)?;
    let loss_of = |p: &ModelParams<f64>| -> Result<f64, ModelError> {
        Ok(run_tree_loss_only(tree, ann, plan, p)?)
    };
    let total = params.param_count();
    let floor = (analytic.loss.abs() * FD_FLOOR_PER_LOSS).max(FD_FLOOR_MIN);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..coords {
        let idx = rng.gen_range(0..total);
        let mut hi = params.clone();
        hi.nudge_flat(idx, FD_EPS);
        let mut lo = params.clone();
        lo.nudge_flat(idx, -FD_EPS);
        let fd = (loss_of(&hi)? - loss_of(&lo)?) / (2.0 * FD_EPS);
        let g = analytic.grads.value_flat(idx);
        let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(FiniteDiffReport {
        checked: coords,
        max_rel_err: max_rel,
        eps: FD_EPS,
    })
}

fn run_tree_loss_only(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    params: &ModelParams<f64>,
) -> Result<f64, ModelError> {
    let opts = TreeRunOptions::default();
    let mut loss = 0.0;
    for traversal in &plan.traversals {
        let packed = emit(tree, ann, traversal)?;
        let batch = ModelBatch::new(&packed, &params.config, false, opts.dense_mask_cap)?;
        loss += forward(params, &batch)?.loss;
    }
    Ok(loss)
}

/// Outcomes of sabotaged runs. Each control is applicable only when the
/// sabotage can change anything: the scaler control needs a reused (or
/// non-unit-weight) token, the mask control a batch whose shared-prefix mask
/// differs from plain causal.
#[derive(Debug, Clone, Serialize)]
pub struct NegativeControls {
    pub scaler_applicable: bool,
    pub scaler_disabled_failed: Option<bool>,
    pub causal_applicable: bool,
    pub plain_causal_failed: Option<bool>,
}

pub fn negative_controls<T: Scalar>(
    tree: &TrajectoryTree,
    ann: &TreeAnnotations,
    plan: &PackPlan,
    params: &ModelParams<T>,
    baseline: &ParamGrads<T>,
    tolerance: f64,
    prefix_tolerance: f64,
) -> Result<NegativeControls, ModelError> {
    let mut scaler_applicable = false;
    let mut causal_applicable = false;
    for traversal in &plan.traversals {
        let packed = emit(tree, ann, traversal)?;
        // the scaler only acts on loss rows: a reused token that carries no
        // loss needs no correction
        scaler_applicable |= packed
            .tree_scale
            .iter()
            .zip(&packed.supervised_mask)
            .any(|(&s, &sup)| sup && s != 1.0);
        let n = packed.len();
        let mask = packed.dense_mask()?;
        causal_applicable |= (0..n).any(|i| (0..i).any(|j| !mask[(i, j)]));
    }
    let scaler_disabled_failed = if scaler_applicable {
        let opts = TreeRunOptions {
            scaler: ScalerMode::Disabled,
            ..Default::default()
        };
        let sabotaged = run_tree(tree, ann, plan, params, &opts)?;
        let report = compare_grads(&sabotaged.grads, baseline, tolerance)?;
        Some(!report.pass)
    } else {
        None
    };
    let plain_causal_failed = if causal_applicable {
        let err = prefix_identity_max_abs_err(tree, ann, plan, params, true)?;
        Some(err > prefix_tolerance)
    } else {
        None
    };
    Ok(NegativeControls {
        scaler_applicable,
        scaler_disabled_failed,
        causal_applicable,
        plain_causal_failed,
    })
}
