//! Command-line surface: ingest trajectory datasets, analyze overlap, pack
//! under a token budget, emit packed batches, verify gradient equivalence
//! against the sequence-packed baseline, and report token-ratio throughput.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error, 3 size or
//! limit exceeded.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use prefix_forest::forest::io::{read_input, InputKind};
use prefix_forest::forest::{annotate, TrajectoryTree, TreeAnnotations};
use prefix_forest::model::ModelConfig;
use prefix_forest::oracle::validate_plan;
use prefix_forest::report::{
    analyze, bench_report, pack_stats, pack_with_method, run_verify, PipelineError, Precision,
    VerifyRequest,
};
use prefix_forest::{emit, Capacity, CurvePoint, ExactLimits, PackMethod, PackPlan};

#[derive(Parser)]
#[command(
    name = "prefix-forest",
    version,
    about = "Trajectory-tree packing and gradient-restoration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset overlap metrics and active-trajectory curves
    Analyze(AnalyzeArgs),
    /// Pack the tree into traversals under a token budget
    Pack(PackArgs),
    /// Write one packed batch file per traversal
    Emit(EmitArgs),
    /// Check tree-packed gradients against the sequence-packed baseline
    Verify(VerifyArgs),
    /// Token-processing ratios for a dataset and capacity
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Trajectories,
    Tree,
}

impl From<KindArg> for InputKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Trajectories => InputKind::Trajectories,
            KindArg::Tree => InputKind::Tree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PackerArg {
    Single,
    Multi,
    Heuristic,
}

impl From<PackerArg> for PackMethod {
    fn from(p: PackerArg) -> Self {
        match p {
            PackerArg::Single => PackMethod::Single,
            PackerArg::Multi => PackMethod::Multi,
            PackerArg::Heuristic => PackMethod::Heuristic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct InputArgs {
    /// Dataset path: trajectory JSONL or a recursive tree JSON
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Trajectories)]
    kind: KindArg,
}

impl InputArgs {
    fn load(&self) -> Result<(TrajectoryTree, TreeAnnotations)> {
        let tree = read_input(&self.input, self.kind.into())
            .map_err(PipelineError::Input)
            .with_context(|| format!("reading {}", self.input.display()))?;
        let ann = annotate(&tree);
        Ok((tree, ann))
    }
}

#[derive(Args)]
struct PackerOpts {
    /// Token budget per traversal
    #[arg(long)]
    capacity: u64,
    #[arg(long, value_enum, default_value_t = PackerArg::Multi)]
    packer: PackerArg,
    /// Exact-mode gate: max lifted items per node
    #[arg(long, default_value_t = ExactLimits::default().max_items)]
    exact_max_items: usize,
    /// Exact-mode gate: max surviving states per node
    #[arg(long, default_value_t = ExactLimits::default().max_states)]
    exact_max_states: usize,
}

impl PackerOpts {
    fn limits(&self) -> ExactLimits {
        ExactLimits {
            max_items: self.exact_max_items,
            max_states: self.exact_max_states,
            ..ExactLimits::default()
        }
    }

    fn pack(&self, tree: &TrajectoryTree, ann: &TreeAnnotations) -> Result<PackPlan> {
        Ok(pack_with_method(
            tree,
            ann,
            Capacity(self.capacity),
            self.packer.into(),
            &self.limits(),
        )?)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Report JSON path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Curves CSV path; defaults to <out with .curves.csv> when --out is set
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Args)]
struct PackArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packer: PackerOpts,
    /// Compare against the brute-force optimum (small trees only)
    #[arg(long)]
    oracle: bool,
    /// Plan JSON path; the plan is inlined into stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packer: PackerOpts,
    /// Existing plan JSON; packs in-process when absent
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Output prefix; batches land in <out><index>.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packer: PackerOpts,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Gradient tolerance; defaults to 1e-9 (f64) or 1e-4 (f32)
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    /// Negative control: force all gradient scales to one (fails by design)
    #[arg(long)]
    disable_scaler: bool,
    /// Negative control: plain causal mask over the flattened batch
    #[arg(long)]
    plain_causal_mask: bool,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    /// Vocab size; defaults to max(97, highest token id + 1)
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, default_value_t = 10_000.0)]
    rope_base: f64,
    /// Finite-difference coordinates to check (f64 only; 0 disables)
    #[arg(long, default_value_t = 20)]
    fd_coords: usize,
    /// Report JSON path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    packer: PackerOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PREFIX_FOREST_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<PipelineError>())
                .map_or(2, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Emit(args) => cmd_emit(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<u8> {
    let (tree, ann) = args.input.load()?;
    let (report, curve) = analyze(&tree, &ann);
    let body = to_pretty(&report)?;
    let curves_path = args
        .curves_out
        .clone()
        .or_else(|| args.out.as_ref().map(|o| o.with_extension("curves.csv")));
    if let Some(path) = &curves_path {
        write_atomic(path, &curve_csv(&curve))?;
        log::info!("curves written to {}", path.display());
    }
    emit_report(&body, args.out.as_deref())?;
    Ok(0)
}

fn cmd_pack(args: PackArgs) -> Result<u8> {
    let (tree, ann) = args.input.load()?;
    let plan = args.packer.pack(&tree, &ann)?;
    let stats = pack_stats(&tree, &ann, &plan, Capacity(args.packer.capacity), args.oracle)?;
    match &args.out {
        Some(path) => {
            write_atomic(path, &to_pretty(&plan)?)?;
            let summary = serde_json::json!({
                "stats": stats,
                "plan_path": path.display().to_string(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        None => {
            let summary = serde_json::json!({ "stats": stats, "plan": plan });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(0)
}

fn cmd_emit(args: EmitArgs) -> Result<u8> {
    let (tree, ann) = args.input.load()?;
    let plan = match &args.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading plan {}", path.display()))?;
            let plan: PackPlan = serde_json::from_str(&text).context("parsing plan JSON")?;
            let violations = validate_plan(&tree, &ann, &plan, Capacity(args.packer.capacity));
            if !violations.is_empty() {
                return Err(PipelineError::PlanInvalid(violations).into());
            }
            plan
        }
        None => args.packer.pack(&tree, &ann)?,
    };
    let mut files = Vec::new();
    let mut total_tokens = 0u64;
    for (i, traversal) in plan.traversals.iter().enumerate() {
        let batch = emit(&tree, &ann, traversal).map_err(PipelineError::Batch)?;
        total_tokens += batch.len() as u64;
        let path = PathBuf::from(format!("{}{i:04}.json", args.out.display()));
        write_atomic(&path, &to_pretty(&batch)?)?;
        files.push(path.display().to_string());
    }
    let summary = serde_json::json!({
        "batches": files.len(),
        "total_tokens": total_tokens,
        "files": files,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let (tree, ann) = args.input.load()?;
    let vocab = match args.vocab {
        Some(v) => v,
        None => {
            let max_token = tree
                .nodes()
                .flat_map(|(_, n)| n.segment.iter().copied())
                .max()
                .unwrap_or(0) as usize;
            let auto = 97.max(max_token + 1);
            anyhow::ensure!(
                auto <= 65_536,
                "token ids up to {max_token} would need a vocab of {auto}; \
                 remap the dataset or pass --vocab explicitly"
            );
            auto
        }
    };
    let req = VerifyRequest {
        capacity: Capacity(args.packer.capacity),
        method: args.packer.packer.into(),
        model: ModelConfig {
            vocab,
            d_model: args.d_model,
            n_heads: args.heads,
            n_layers: args.layers,
            d_ff: args.d_ff,
            rope_base: args.rope_base,
        },
        seed: args.seed,
        precision: match args.precision {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        },
        tolerance: args.tolerance,
        disable_scaler: args.disable_scaler,
        plain_causal_mask: args.plain_causal_mask,
        limits: args.packer.limits(),
        finite_diff_coords: args.fd_coords,
    };
    let report = run_verify(&tree, &ann, &req)?;
    emit_report(&to_pretty(&report)?, args.out.as_deref())?;
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_bench(args: BenchArgs) -> Result<u8> {
    let (tree, ann) = args.input.load()?;
    let plan = args.packer.pack(&tree, &ann)?;
    let report = bench_report(&tree, &ann, &plan, Capacity(args.packer.capacity));
    emit_report(&to_pretty(&report)?, args.out.as_deref())?;
    Ok(0)
}

fn to_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    Ok(body)
}

fn emit_report(body: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut csv = String::from("position,baseline_active,tree_active\n");
    for p in curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            p.position, p.baseline_active, p.tree_active
        ));
    }
    csv
}

/// Write-temp-then-rename so concurrent readers never observe a partial
/// file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}
