//! `hetmerge` command-line front end.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetmerge::container::{read_header, Container};
use hetmerge::eval::barrier_grid;
use hetmerge::merger::reexpress_in_a_basis;
use hetmerge::toy::{calibration_batch, mlp_arch};
use hetmerge::width::ZipLinkage;
use hetmerge::{
    build_alignment_plan, capture_features, depth, evaluate, extend_model, gen_tasks,
    layer_similarity_matrix, load_model, loss_barrier, merge_models, prepare_recipe, save_model,
    train_mlp, AlignOptions, CalibrationBatch, Dataset, ExtensionMode, FeatureCache, HeadPolicy,
    MergeStrategy, ModelBundle, Objective, RecipeOptions, SegmentPlan, Strategy, TaskLabels,
    TaskSpec, TrainConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

const SUBCOMMANDS: &[&str] = &[
    "gen-data",
    "train",
    "capture",
    "align-depth",
    "align-width",
    "merge",
    "eval",
    "barrier",
    "inspect",
];

/// Training-free merging of dense and residual networks that differ in depth
/// and width.
///
/// Every subcommand also accepts `--config file.json`, whose keys mirror the
/// flag names; flags on the command line override values from the file.
/// Set HETMERGE_THREADS to cap the worker threads.
#[derive(Parser, Debug)]
#[command(name = "hetmerge", version, args_override_self = true)]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a seeded synthetic multi-task classification dataset.
    GenData(GenDataArgs),
    /// Train a single-task MLP with SGD.
    Train(TrainArgs),
    /// Record per-layer activations of a model on a calibration batch.
    Capture(CaptureArgs),
    /// Segment the deeper model against the shallower one from captured features.
    AlignDepth(AlignDepthArgs),
    /// Build per-boundary neuron alignments (permutation or elastic zip).
    AlignWidth(AlignWidthArgs),
    /// Merge two models into one.
    Merge(MergeArgs),
    /// Report joint, per-task and average accuracy.
    Eval(EvalArgs),
    /// Loss along the straight line between two models.
    Barrier(BarrierArgs),
    /// Print the JSON header of an HMM1 container.
    Inspect(InspectArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("cannot parse {p:?}")))
        .collect()
}

/// Comma-separated class counts, one per task.
#[derive(Clone, Debug, Serialize)]
#[serde(transparent)]
struct ClassList(Vec<usize>);

fn parse_classes(s: &str) -> Result<ClassList, String> {
    parse_list(s).map(ClassList)
}

fn parse_scales(s: &str) -> Result<(f64, f64), String> {
    match parse_list::<f64>(s)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err("expected two comma-separated numbers, e.g. 0.5,0.5".into()),
    }
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Output directory; receives train/test splits, joint and per task.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classes per task, comma separated.
    #[arg(long, value_parser = parse_classes, default_value = "5,5")]
    classes: ClassList,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 2)]
    clusters_per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 600)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    test_fraction: f64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset written by gen-data (joint or per-task split).
    #[arg(long)]
    data: PathBuf,
    /// Task whose labels the model learns.
    #[arg(long)]
    task: u32,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Use residual blocks after the first layer.
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CalibArgs {
    /// Dataset to draw the calibration batch from.
    #[arg(long)]
    calib: PathBuf,
    /// Calibration batch size.
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Seed for the calibration draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    calib: CalibArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum DepthMethod {
    Sma,
    Lma,
    Oracle,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum OracleObjective {
    Sma,
    Lma,
}

#[derive(Args, Debug, Serialize)]
struct AlignDepthArgs {
    /// Features of the deeper model.
    #[arg(long)]
    a: PathBuf,
    /// Features of the shallower model.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = DepthMethod::Lma)]
    method: DepthMethod,
    /// Objective scored by the exhaustive oracle.
    #[arg(long, value_enum, default_value_t = OracleObjective::Lma)]
    oracle_objective: OracleObjective,
    /// Write the segment plan as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum WidthStrategy {
    Permute,
    Zip,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Linkage {
    Recompute,
    Average,
}

#[derive(Args, Debug, Serialize)]
struct WidthArgs {
    /// Shared width per boundary for zipping; defaults to the wider layer.
    #[arg(long)]
    r: Option<usize>,
    /// Weights of A and B inside each merged neuron.
    #[arg(long, value_parser = parse_scales, default_value = "0.5,0.5")]
    scales: (f64, f64),
    #[arg(long, value_enum, default_value_t = Linkage::Recompute)]
    linkage: Linkage,
    /// Extend B with zero residual blocks instead of identity layers.
    #[arg(long)]
    residual: bool,
}

impl WidthArgs {
    fn align(&self, strategy: Strategy) -> AlignOptions {
        let mut opts = match strategy {
            Strategy::Permute => AlignOptions::permute(),
            Strategy::Zip => AlignOptions::zip(self.r),
        };
        opts.zip.scales = self.scales;
        opts.zip.linkage = match self.linkage {
            Linkage::Recompute => ZipLinkage::Recompute,
            Linkage::Average => ZipLinkage::Average,
        };
        opts
    }

    fn extension(&self) -> ExtensionMode {
        if self.residual {
            ExtensionMode::ZeroResidual
        } else {
            ExtensionMode::IdentityDense
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct AlignWidthArgs {
    /// Deeper (or equally deep) model.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    calib: CalibArgs,
    /// Segment plan from align-depth; required when depths differ.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = WidthStrategy::Zip)]
    strategy: WidthStrategy,
    #[command(flatten)]
    #[serde(flatten)]
    width: WidthArgs,
    /// Write the alignment plan as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum MergeKind {
    /// Plain parameter averaging; architectures must match.
    Vanilla,
    /// Permutation alignment, then averaging.
    Aligned,
    /// Elastic neuron zipping.
    Zip,
}

#[derive(Args, Debug, Serialize)]
struct MergeArgs {
    /// Deeper (or equally deep) model.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    calib: CalibArgs,
    /// Depth alignment; required when depths differ.
    #[arg(long, value_enum)]
    depth_method: Option<DepthMethod>,
    /// Objective scored when --depth-method is oracle.
    #[arg(long, value_enum, default_value_t = OracleObjective::Lma)]
    oracle_objective: OracleObjective,
    #[arg(long, value_enum, default_value_t = MergeKind::Zip)]
    strategy: MergeKind,
    #[command(flatten)]
    #[serde(flatten)]
    width: WidthArgs,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the recipe; defaults to the output path with a
    /// `.recipe.json` extension.
    #[arg(long)]
    recipe: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Policy {
    /// Error when a task has no head.
    Strict,
    /// Count samples of a task without a head as wrong.
    MissAsWrong,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Policy::MissAsWrong)]
    policy: Policy,
}

#[derive(Args, Debug, Serialize)]
struct BarrierArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Dataset the losses are measured on.
    #[arg(long)]
    data: PathBuf,
    /// Permutation-align B to A on this calibration set before interpolating.
    #[arg(long)]
    align_with: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the loss curve as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] hetmerge::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_user_error() => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: Value, table: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
        } else {
            print!("{}", table());
        }
    }
}

fn resolved(command: &Command) -> Value {
    serde_json::to_value(command).expect("config serializes")
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(hetmerge::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| hetmerge::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| hetmerge::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text).map_err(hetmerge::Error::from)?)
}

fn load_data(path: &Path) -> CliResult<(Dataset, Option<Vec<TaskLabels>>)> {
    let c = Container::read(path)?;
    let data = Dataset::from_container(&c)?;
    let tasks = match c.metadata.get("tasks") {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(hetmerge::Error::from)?),
        None => None,
    };
    Ok((data, tasks))
}

fn load_batch(args: &CalibArgs) -> CliResult<CalibrationBatch> {
    let (data, _) = load_data(&args.calib)?;
    Ok(calibration_batch(&data, args.samples, args.seed)?)
}

fn objective(m: DepthMethod, oracle: OracleObjective) -> Objective {
    match (m, oracle) {
        (DepthMethod::Sma, _) | (DepthMethod::Oracle, OracleObjective::Sma) => Objective::Sma,
        _ => Objective::Lma,
    }
}

fn gen_data(args: &GenDataArgs, cfg: &Value, out: &Output) -> CliResult<()> {
    let spec = TaskSpec {
        classes: args.classes.0.clone(),
        input_dim: args.input_dim,
        clusters_per_class: args.clusters_per_class,
        separation: args.separation,
        samples_per_class: args.samples_per_class,
        test_fraction: args.test_fraction,
    };
    let data = gen_tasks(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|source| hetmerge::Error::Io {
        path: args.out.clone(),
        source,
    })?;
    let partition = serde_json::to_value(data.partition()).map_err(hetmerge::Error::from)?;
    let mut files = Vec::new();
    let mut write = |name: String, d: &Dataset| -> CliResult<()> {
        let mut c = d.to_container();
        c.metadata.insert("tasks".into(), partition.clone());
        c.metadata.insert("config".into(), cfg.clone());
        let path = args.out.join(&name);
        c.write(&path)?;
        files.push(json!({"file": path, "samples": d.len()}));
        Ok(())
    };
    write("train.hmm1".into(), &data.joint_train)?;
    write("test.hmm1".into(), &data.joint_test)?;
    for t in &data.tasks {
        write(format!("task{}_train.hmm1", t.task.task), &t.train)?;
        write(format!("task{}_test.hmm1", t.task.task), &t.test)?;
    }
    out.emit(json!({"files": files, "tasks": partition}), || {
        let mut s = String::new();
        for f in &files {
            let _ = writeln!(s, "{:<40} {:>7}", f["file"].as_str().unwrap_or(""), f["samples"]);
        }
        s
    });
    Ok(())
}

fn train(args: &TrainArgs, cfg: &Value, out: &Output) -> CliResult<()> {
    let (data, tasks) = load_data(&args.data)?;
    let tasks = tasks.ok_or_else(|| usage(format!("{} has no task partition; use gen-data output", args.data.display())))?;
    let task = tasks
        .iter()
        .find(|t| t.task == args.task)
        .ok_or_else(|| usage(format!("task {} is not in {}", args.task, args.data.display())))?;
    let train_set = data.filter_labels(&task.labels);
    let arch = mlp_arch(data.x.cols(), args.width, args.depth, args.residual);
    let tc = TrainConfig {
        seed: args.seed,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        momentum: args.momentum,
    };
    let mut outcome = train_mlp(&arch, task.task, &task.labels, &train_set, &tc)?;
    outcome.model.metadata.insert("config".into(), cfg.clone());
    save_model(&outcome.model, &args.out)?;
    let losses = &outcome.epoch_losses;
    out.emit(json!({"out": args.out, "epoch_losses": losses}), || {
        let mut s = format!("{:>5} {:>10}\n", "epoch", "loss");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(s, "{:>5} {l:>10.5}", i + 1);
        }
        let _ = writeln!(s, "wrote {}", args.out.display());
        s
    });
    Ok(())
}

fn capture(args: &CaptureArgs, cfg: &Value, out: &Output) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let batch = load_batch(&args.calib)?;
    let cache = capture_features(&model, &batch)?;
    let mut c = cache.to_container();
    c.metadata.insert("config".into(), cfg.clone());
    c.write(&args.out)?;
    let shapes: Vec<_> = cache.features.iter().map(|f| f.shape()).collect();
    out.emit(json!({"out": args.out, "layers": shapes}), || {
        let mut s = format!("{:<8} {:>8} {:>8}\n", "layer", "neurons", "samples");
        for (i, (r, c)) in shapes.iter().enumerate() {
            let _ = writeln!(s, "{:<8} {r:>8} {c:>8}", format!("layer{i}"));
        }
        s
    });
    Ok(())
}

fn plan_table(plan: &SegmentPlan) -> String {
    let mut s = format!("method {:?}  score {:.6}\ng = {:?}\n", plan.method, plan.score, plan.g);
    for (i, seg) in plan.segments().iter().enumerate() {
        let _ = writeln!(s, "B layer {:>2} <- A layers {}..={}", i + 1, seg.start(), seg.end());
    }
    s
}

fn align_depth(args: &AlignDepthArgs, out: &Output) -> CliResult<()> {
    let fa = FeatureCache::from_container(&Container::read(&args.a)?)?;
    let fb = FeatureCache::from_container(&Container::read(&args.b)?)?;
    let sim = layer_similarity_matrix(&fa, &fb)?;
    let plan = match args.method {
        DepthMethod::Sma => depth::sma_align(&sim)?,
        DepthMethod::Lma => depth::lma_align(&sim)?,
        DepthMethod::Oracle => depth::brute_force_align(&sim, objective(args.method, args.oracle_objective))?,
    };
    if let Some(path) = &args.out {
        write_json(path, &plan)?;
    }
    let rows: Vec<Vec<f64>> = (0..sim.deep_layers())
        .map(|i| sim.values.row(i).to_vec())
        .collect();
    out.emit(json!({"plan": plan, "similarity": rows}), || {
        let mut s = String::from("layer CKA (rows: A layers, cols: B layers)\n");
        for r in &rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "  {}", cells.join(" "));
        }
        s + &plan_table(&plan)
    });
    Ok(())
}

fn align_width(args: &AlignWidthArgs, out: &Output) -> CliResult<()> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    let batch = load_batch(&args.calib)?;
    let plan: SegmentPlan = match &args.plan {
        Some(p) => read_json(p)?,
        None if a.depth() == b.depth() => SegmentPlan::identity(a.depth()),
        None => return Err(usage("models differ in depth; pass --plan from align-depth")),
    };
    plan.validate(a.depth())?;
    let ext = extend_model(&b, &plan.extension_plan(args.width.extension())?)?;
    let strategy = match args.strategy {
        WidthStrategy::Permute => Strategy::Permute,
        WidthStrategy::Zip => Strategy::Zip,
    };
    let alignment = build_alignment_plan(
        &plan,
        &capture_features(&a, &batch)?,
        &capture_features(&ext, &batch)?,
        &a.specs(),
        &args.width.align(strategy),
    )?;
    if let Some(path) = &args.out {
        write_json(path, &alignment)?;
    }
    let rows: Vec<Value> = alignment
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| json!({"boundary": k + 1, "n_a": m.n_a, "n_b": m.n_b, "r": m.r, "identity_error": m.identity_error().unwrap_or(f64::NAN)}))
        .collect();
    out.emit(json!({"boundaries": rows}), || {
        let mut s = format!("{:>8} {:>5} {:>5} {:>5} {:>12}\n", "boundary", "n_a", "n_b", "r", "|MU - I|");
        for r in &rows {
            let _ = writeln!(
                s,
                "{:>8} {:>5} {:>5} {:>5} {:>12.1e}",
                r["boundary"].as_u64().unwrap_or(0),
                r["n_a"].as_u64().unwrap_or(0),
                r["n_b"].as_u64().unwrap_or(0),
                r["r"].as_u64().unwrap_or(0),
                r["identity_error"].as_f64().unwrap_or(f64::NAN)
            );
        }
        s
    });
    Ok(())
}

fn merge(args: &MergeArgs, cfg: &Value, out: &Output) -> CliResult<()> {
    let a = load_model(&args.a)?;
    let b = load_model(&args.b)?;
    let batch = load_batch(&args.calib)?;
    let strategy = match args.strategy {
        MergeKind::Vanilla => MergeStrategy::VanillaAvg,
        MergeKind::Aligned => MergeStrategy::AlignedAvg,
        MergeKind::Zip => MergeStrategy::Zip,
    };
    let mut opts = RecipeOptions::new(
        strategy,
        args.depth_method.map(|m| objective(m, args.oracle_objective)),
        args.width.extension(),
    );
    opts.oracle = args.depth_method == Some(DepthMethod::Oracle);
    opts.align = args.width.align(match strategy {
        MergeStrategy::Zip => Strategy::Zip,
        _ => Strategy::Permute,
    });
    let recipe = prepare_recipe(&a, &b, &batch, &opts)?;
    let mut merged: ModelBundle = merge_models(&a, &b, &recipe)?;
    merged.metadata.insert("config".into(), cfg.clone());
    save_model(&merged, &args.out)?;
    let recipe_path = args
        .recipe
        .clone()
        .unwrap_or_else(|| args.out.with_extension("recipe.json"));
    write_json(&recipe_path, &recipe)?;
    let widths: Vec<usize> = merged.layers.iter().map(|l| l.spec.out_dim).collect();
    out.emit(
        json!({"out": args.out, "recipe": recipe_path, "g": recipe.depth.g, "widths": widths}),
        || {
            format!(
                "{}strategy {:?}, merged widths {:?}\nwrote {} and {}\n",
                plan_table(&recipe.depth),
                recipe.strategy,
                widths,
                args.out.display(),
                recipe_path.display()
            )
        },
    );
    Ok(())
}

fn eval(args: &EvalArgs, out: &Output) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let (data, tasks) = load_data(&args.data)?;
    let tasks = tasks.unwrap_or_else(|| {
        model
            .heads
            .iter()
            .map(|h| TaskLabels {
                task: h.task,
                labels: h.labels.clone(),
            })
            .collect()
    });
    let policy = match args.policy {
        Policy::Strict => HeadPolicy::Strict,
        Policy::MissAsWrong => HeadPolicy::MissAsWrong,
    };
    let report = evaluate(&model, &data, &tasks, policy)?;
    out.emit(serde_json::to_value(&report).map_err(hetmerge::Error::from)?, || report.to_table());
    Ok(())
}

fn barrier(args: &BarrierArgs, out: &Output) -> CliResult<()> {
    let a = load_model(&args.a)?;
    let mut b = load_model(&args.b)?;
    let (data, _) = load_data(&args.data)?;
    if let Some(calib) = &args.align_with {
        let (cd, _) = load_data(calib)?;
        let batch = calibration_batch(&cd, args.samples, args.seed)?;
        let opts = RecipeOptions::new(MergeStrategy::AlignedAvg, None, ExtensionMode::IdentityDense);
        let recipe = prepare_recipe(&a, &b, &batch, &opts)?;
        let plan = recipe.alignment.as_ref().expect("aligned recipe has a plan");
        b = reexpress_in_a_basis(&b, plan)?;
    }
    let report = loss_barrier(&a, &b, &data)?;
    debug_assert_eq!(report.lambdas, barrier_grid());
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv()).map_err(|source| hetmerge::Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    out.emit(serde_json::to_value(&report).map_err(hetmerge::Error::from)?, || report.to_table());
    Ok(())
}

fn inspect(args: &InspectArgs) -> CliResult<()> {
    let header = read_header(&args.path)?;
    println!("{}", serde_json::to_string_pretty(&header).map_err(hetmerge::Error::from)?);
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("HETMERGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("HETMERGE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let out = Output { json: cli.json };
    let cfg = resolved(&cli.command);
    log::debug!("resolved config: {cfg}");
    match &cli.command {
        Command::GenData(a) => gen_data(a, &cfg, &out),
        Command::Train(a) => train(a, &cfg, &out),
        Command::Capture(a) => capture(a, &cfg, &out),
        Command::AlignDepth(a) => align_depth(a, &out),
        Command::AlignWidth(a) => align_width(a, &out),
        Command::Merge(a) => merge(a, &cfg, &out),
        Command::Eval(a) => eval(a, &out),
        Command::Barrier(a) => barrier(a, &out),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::expand(std::env::args().collect(), SUBCOMMANDS) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
