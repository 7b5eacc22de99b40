//! The `vecforge` command-line surface.
//!
//! Every command writes its outputs atomically and drops a JSON run manifest
//! beside them. Exit codes: 0 success, 2 usage, 3 I/O, 4 compatibility,
//! 5 numeric.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::importance::{self, ImportanceMap, Metric};
use crate::mask::{selection_csv, selection_stats, MaskSet};
use crate::merge::{self, task_vector, MergeConfig, TaskVector};
use crate::store::{self, Kind, Meta};
use crate::tensor::ParamSet;
use crate::toy::{
    self, derive_seed, Benchmark, BenchmarkSpec, MlpShape, SampleBatch, BASE_TASK_ID,
};

pub const THREADS_ENV: &str = "VECFORGE_THREADS";
pub const EVAL_CSV_HEADER: &str = "task_id,accuracy";

#[derive(Debug, Parser)]
#[command(
    name = "vecforge",
    version,
    about = "Training-free model merging and task forgetting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the synthetic benchmark: base model, fine-tuned tasks, dataset fixtures.
    TrainToy(TrainToyArgs),
    /// Compute an importance map for one fine-tuned checkpoint.
    Importance(ImportanceArgs),
    /// Fuse several fine-tuned checkpoints into one model.
    Fuse(FuseArgs),
    /// Remove one task from a model by subtracting its (filtered) task vector.
    Forget(ForgetArgs),
    /// Report per-task test accuracy of a model.
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainToyArgs {
    /// JSON benchmark spec; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ImportanceArgs {
    /// Fine-tuned checkpoint to score.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset fixture supplying the importance samples (not needed for Amp).
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value = "LP")]
    pub metric: Metric,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store the per-layer min-max normalized map.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FuseBaseline {
    None,
    Avg,
    Ta,
    Ties,
    #[value(name = "dare+ta")]
    DareTa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ForgetBaseline {
    None,
    Ta,
}

#[derive(Debug, clap::Args)]
pub struct ImportanceSource {
    /// Precomputed importance maps, one per task, in task order.
    #[arg(long = "importance", num_args = 1..)]
    pub importance: Vec<PathBuf>,
    /// Dataset fixtures to compute importance from, one per task, in task order.
    #[arg(long = "samples", num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Defaults to LP, or to the metric stored in --importance files.
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long, default_value_t = 32)]
    pub sample_count: usize,
}

#[derive(Debug, clap::Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub pre: PathBuf,
    /// Fine-tuned checkpoints; deltas are summed in this order.
    #[arg(long = "task", required = true, num_args = 1..)]
    pub tasks: Vec<PathBuf>,
    #[command(flatten)]
    pub source: ImportanceSource,
    #[arg(long, default_value_t = 0.7)]
    pub p: f64,
    #[arg(long, value_enum, default_value_t = FuseBaseline::None)]
    pub baseline: FuseBaseline,
    #[arg(long, default_value_t = 0.4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.8)]
    pub trim: f64,
    #[arg(long, default_value_t = 0.9)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ForgetArgs {
    /// Model to remove the task from, usually the pretrained base.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pre: PathBuf,
    /// Fine-tuned checkpoint of the task to forget.
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub source: ImportanceSource,
    #[arg(long, default_value_t = 0.7)]
    pub p: f64,
    #[arg(long, value_enum, default_value_t = ForgetBaseline::None)]
    pub baseline: ForgetBaseline,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset fixtures; the test split of each is scored.
    #[arg(long = "data", num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// JSON record written beside every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector; replaying it reproduces the outputs.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    /// Input path to content digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_ms: u64,
    pub version: String,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

pub fn selection_path(out: &Path) -> PathBuf {
    sibling(out, "selection.csv")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {f}");
        return f.code;
    }
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::usage(format!("{THREADS_ENV}=`{raw}` is not a thread count")))?;
    // A second call in the same process finds the pool already built; keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn dispatch(command: Command, argv: &[String]) -> CmdResult {
    let started = Instant::now();
    let mut ctx = RunContext::default();
    let (name, out_anchor) = match command {
        Command::TrainToy(a) => ("train-toy", cmd_train_toy(&a, &mut ctx)?),
        Command::Importance(a) => ("importance", cmd_importance(&a, &mut ctx)?),
        Command::Fuse(a) => ("fuse", cmd_fuse(&a, &mut ctx)?),
        Command::Forget(a) => ("forget", cmd_forget(&a, &mut ctx)?),
        Command::Eval(a) => ("eval", cmd_eval(&a, &mut ctx)?),
        Command::Replay(a) => return cmd_replay(&a),
    };
    let manifest = RunManifest {
        command: name.to_owned(),
        argv: argv.to_vec(),
        config: ctx.config,
        inputs: ctx.inputs,
        outputs: ctx.outputs,
        wall_time_ms: started.elapsed().as_millis() as u64,
        version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    store::write_atomic(&out_anchor, &json)?;
    Ok(())
}

#[derive(Default)]
struct RunContext {
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunContext {
    fn load(&mut self, path: &Path) -> CmdResult<(ParamSet, Meta)> {
        let (ps, meta) = store::load_file(path).map_err(|e| with_path(e, path))?;
        self.inputs
            .insert(path.display().to_string(), ps.content_digest());
        Ok((ps, meta))
    }

    fn load_kind(&mut self, path: &Path, kinds: &[Kind]) -> CmdResult<(ParamSet, Meta)> {
        let (ps, meta) = self.load(path)?;
        if !kinds.contains(&meta.kind) {
            return Err(Error::InvalidMeta(format!(
                "{}: expected a {} container, found `{}`",
                path.display(),
                kinds
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join("/"),
                meta.kind
            ))
            .into());
        }
        Ok((ps, meta))
    }

    fn save(&mut self, path: &Path, ps: &ParamSet, meta: &Meta) -> CmdResult {
        store::save_file(path, ps, meta).map_err(|e| with_path(e, path))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> CmdResult {
        store::write_atomic(path, bytes).map_err(|e| with_path(e, path))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }
}

fn with_path(e: Error, path: &Path) -> Failure {
    let code = e.exit_code();
    Failure {
        code,
        message: format!("{}: {e}", path.display()),
    }
}

/// Task id recorded in a checkpoint, falling back to the file stem.
fn task_id_of(meta: &Meta, path: &Path) -> String {
    if !meta.task_id.is_empty() {
        return meta.task_id.clone();
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_train_toy(args: &TrainToyArgs, ctx: &mut RunContext) -> CmdResult<PathBuf> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| with_path(e.into(), path))?;
            serde_json::from_str::<BenchmarkSpec>(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => BenchmarkSpec::default(),
    };
    spec.validate()?;
    fs::create_dir_all(&args.out).map_err(|e| with_path(e.into(), &args.out))?;
    ctx.config = serde_json::json!({ "spec": spec, "seed": args.seed });

    let bench = Benchmark::build(&spec, args.seed)?;
    let save_model = |ctx: &mut RunContext, name: &str, ps: &ParamSet, id: &str| -> CmdResult {
        let path = args.out.join(format!("{name}.{}", store::FILE_EXTENSION));
        ctx.save(&path, ps, &Meta::new(Kind::Params).with_task(id))?;
        println!("{id}\t{}\t{}", ps.content_digest(), path.display());
        Ok(())
    };
    let save_data =
        |ctx: &mut RunContext, id: &str, train: &SampleBatch, test: &SampleBatch| -> CmdResult {
            let path = args
                .out
                .join(format!("data_{id}.{}", store::FILE_EXTENSION));
            let ps = toy::fixture_params(train, test)?;
            ctx.save(&path, &ps, &toy::fixture_meta(id, spec.num_classes))
        };

    save_model(ctx, BASE_TASK_ID, &bench.base, BASE_TASK_ID)?;
    save_data(ctx, BASE_TASK_ID, &bench.base_train, &bench.base_test)?;
    for task in &bench.tasks {
        let id = &task.spec.task_id;
        save_model(ctx, id, &task.finetuned, id)?;
        save_data(ctx, id, &task.train, &task.test)?;
    }
    Ok(args.out.join("manifest.json"))
}

/// Importance of `params` from a dataset fixture's training split.
fn importance_from_fixture(
    ctx: &mut RunContext,
    metric: Metric,
    params: &ParamSet,
    task_id: &str,
    fixture: Option<&Path>,
    count: usize,
    seed: u64,
) -> CmdResult<ImportanceMap> {
    let samples = match fixture {
        Some(path) => {
            let (ps, _) = ctx.load_kind(path, &[Kind::Dataset])?;
            let train = toy::fixture_split(&ps, "train").map_err(|e| with_path(e, path))?;
            Some(train.sample_subset(count.min(train.len()), seed)?)
        }
        None if metric.needs_samples() => {
            return Err(Failure::usage(format!(
                "metric {metric} needs --samples or precomputed --importance"
            )))
        }
        None => None,
    };
    Ok(importance::compute(
        metric,
        params,
        samples.as_ref(),
        task_id,
    )?)
}

fn cmd_importance(args: &ImportanceArgs, ctx: &mut RunContext) -> CmdResult<PathBuf> {
    if args.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    ctx.config = serde_json::json!({
        "metric": args.metric.as_str(),
        "count": args.count,
        "seed": args.seed,
        "normalize": args.normalize,
    });
    let (params, meta) = ctx.load_kind(&args.model, &[Kind::Params])?;
    let id = task_id_of(&meta, &args.model);
    let mut im = importance_from_fixture(
        ctx,
        args.metric,
        &params,
        &id,
        args.samples.as_deref(),
        args.count,
        args.seed,
    )?;
    if args.normalize {
        im = importance::normalize_per_layer(&im)?;
    }
    ctx.save(&args.out, &im.scores, &im.meta())?;
    Ok(manifest_path(&args.out))
}

/// Importance maps for `tasks`, loaded or computed, normalized per layer.
fn gather_importance(
    ctx: &mut RunContext,
    source: &ImportanceSource,
    tasks: &[(ParamSet, String)],
    seed: u64,
) -> CmdResult<(Vec<ImportanceMap>, Metric)> {
    if !source.importance.is_empty() && !source.samples.is_empty() {
        return Err(Failure::usage(
            "pass either --importance or --samples, not both",
        ));
    }
    let maps = if !source.importance.is_empty() {
        if source.importance.len() != tasks.len() {
            return Err(Failure::usage(format!(
                "{} --importance files for {} tasks",
                source.importance.len(),
                tasks.len()
            )));
        }
        let mut maps = Vec::with_capacity(tasks.len());
        for path in &source.importance {
            let (ps, meta) = ctx.load_kind(path, &[Kind::Importance])?;
            let im = ImportanceMap::from_container(ps, &meta).map_err(|e| with_path(e, path))?;
            if let Some(m) = source.metric.filter(|&m| m != im.metric) {
                return Err(Failure::usage(format!(
                    "{}: holds {} importance but --metric is {m}",
                    path.display(),
                    im.metric
                )));
            }
            maps.push(im);
        }
        maps
    } else {
        if source.sample_count == 0 {
            return Err(Failure::usage("--sample-count must be at least 1"));
        }
        if !source.samples.is_empty() && source.samples.len() != tasks.len() {
            return Err(Failure::usage(format!(
                "{} --samples fixtures for {} tasks",
                source.samples.len(),
                tasks.len()
            )));
        }
        let metric = source.metric.unwrap_or(Metric::Lp);
        let mut maps = Vec::with_capacity(tasks.len());
        for (i, (params, id)) in tasks.iter().enumerate() {
            let fixture = source.samples.get(i).map(PathBuf::as_path);
            maps.push(importance_from_fixture(
                ctx,
                metric,
                params,
                id,
                fixture,
                source.sample_count,
                seed,
            )?);
        }
        maps
    };
    let metric = maps[0].metric;
    if let Some(other) = maps.iter().find(|im| im.metric != metric) {
        return Err(Failure::usage(format!(
            "importance metrics differ: {metric} vs {}",
            other.metric
        )));
    }
    let normalized = maps
        .into_iter()
        .map(|im| {
            if im.normalized {
                Ok(im)
            } else {
                importance::normalize_per_layer(&im)
            }
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok((normalized, metric))
}

fn recipe(command: &str, baseline: &str, cfg: &MergeConfig) -> String {
    serde_json::json!({ "command": command, "baseline": baseline, "config": cfg }).to_string()
}

fn write_selection(ctx: &mut RunContext, out: &Path, masks: &MaskSet) -> CmdResult {
    let path = selection_path(out);
    ctx.write(&path, selection_csv(&selection_stats(masks)).as_bytes())?;
    println!("selection rates: {}", path.display());
    Ok(())
}

fn cmd_fuse(args: &FuseArgs, ctx: &mut RunContext) -> CmdResult<PathBuf> {
    if args.tasks.len() < 2 {
        return Err(Failure::usage(format!(
            "need at least two --task checkpoints, got {}",
            args.tasks.len()
        )));
    }
    let cfg = MergeConfig {
        p: args.p,
        lambda: args.lambda,
        metric: args.source.metric.unwrap_or(Metric::Lp),
        ties_trim_ratio: args.trim,
        dare_drop_rate: args.drop_rate,
        seed: args.seed,
        importance_samples: args.source.sample_count,
        ..MergeConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if args.baseline == FuseBaseline::DareTa && args.drop_rate >= 1.0 {
        return Err(Failure::usage(
            Error::InvalidRate(args.drop_rate).to_string(),
        ));
    }

    let (pre, _) = ctx.load_kind(&args.pre, &[Kind::Params])?;
    let mut tasks = Vec::with_capacity(args.tasks.len());
    for path in &args.tasks {
        let (ps, meta) = ctx.load_kind(path, &[Kind::Params])?;
        pre.check_compatible(&ps).map_err(|e| with_path(e, path))?;
        tasks.push((ps, task_id_of(&meta, path)));
    }
    let deltas = tasks
        .iter()
        .map(|(ps, id)| task_vector(ps, &pre, id))
        .collect::<Result<Vec<TaskVector>, Error>>()?;

    let (fused, baseline, cfg) = match args.baseline {
        FuseBaseline::None => {
            let (ims, metric) = gather_importance(ctx, &args.source, &tasks, args.seed)?;
            let cfg = MergeConfig { metric, ..cfg };
            let (fused, masks) = merge::sta_fuse_with_masks(&pre, &deltas, &ims, &cfg)?;
            write_selection(ctx, &args.out, &masks)?;
            (fused, "none", cfg)
        }
        FuseBaseline::Avg => {
            let models: Vec<ParamSet> = tasks.into_iter().map(|(ps, _)| ps).collect();
            (merge::baseline_average(&models)?, "avg", cfg)
        }
        FuseBaseline::Ta => (
            merge::baseline_task_arithmetic(&pre, &deltas, cfg.lambda)?,
            "ta",
            cfg,
        ),
        FuseBaseline::Ties => (
            merge::baseline_ties(&pre, &deltas, cfg.ties_trim_ratio, cfg.lambda)?,
            "ties",
            cfg,
        ),
        FuseBaseline::DareTa => {
            let dropped = deltas
                .iter()
                .enumerate()
                .map(|(i, tv)| {
                    merge::baseline_dare(tv, cfg.dare_drop_rate, derive_seed(cfg.seed, i as u64))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            (
                merge::baseline_task_arithmetic(&pre, &dropped, cfg.lambda)?,
                "dare+ta",
                cfg,
            )
        }
    };
    ctx.config = serde_json::json!({ "baseline": baseline, "merge": cfg });
    let meta = Meta::new(Kind::Params)
        .with_task("fused")
        .with_extra("recipe", recipe("fuse", baseline, &cfg));
    ctx.save(&args.out, &fused, &meta)?;
    Ok(manifest_path(&args.out))
}

fn cmd_forget(args: &ForgetArgs, ctx: &mut RunContext) -> CmdResult<PathBuf> {
    let cfg = MergeConfig {
        p: args.p,
        gamma: args.gamma,
        metric: args.source.metric.unwrap_or(Metric::Lp),
        seed: args.seed,
        importance_samples: args.source.sample_count,
        ..MergeConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if args.source.importance.len() > 1 || args.source.samples.len() > 1 {
        return Err(Failure::usage("forget takes a single importance source"));
    }

    let (model, _) = ctx.load_kind(&args.model, &[Kind::Params])?;
    let (pre, _) = ctx.load_kind(&args.pre, &[Kind::Params])?;
    let (task, meta) = ctx.load_kind(&args.task, &[Kind::Params])?;
    pre.check_compatible(&task)
        .map_err(|e| with_path(e, &args.task))?;
    model
        .check_compatible(&pre)
        .map_err(|e| with_path(e, &args.model))?;
    let id = task_id_of(&meta, &args.task);
    let delta = task_vector(&task, &pre, &id)?;

    let (out, baseline, cfg) = match args.baseline {
        ForgetBaseline::None => {
            let tasks = [(task, id.clone())];
            let (mut ims, metric) = gather_importance(ctx, &args.source, &tasks, args.seed)?;
            let cfg = MergeConfig { metric, ..cfg };
            let (out, masks) = merge::sta_forget_with_mask(&model, &delta, &ims.remove(0), &cfg)?;
            write_selection(ctx, &args.out, &masks)?;
            (out, "none", cfg)
        }
        ForgetBaseline::Ta => (
            merge::baseline_ta_forget(&model, &delta, cfg.gamma)?,
            "ta",
            cfg,
        ),
    };
    ctx.config = serde_json::json!({ "baseline": baseline, "merge": cfg });
    let meta = Meta::new(Kind::Params)
        .with_task(format!("forget-{id}"))
        .with_extra("recipe", recipe("forget", baseline, &cfg));
    ctx.save(&args.out, &out, &meta)?;
    Ok(manifest_path(&args.out))
}

fn cmd_eval(args: &EvalArgs, ctx: &mut RunContext) -> CmdResult<PathBuf> {
    if args.data.is_empty() {
        return Err(Failure::usage("eval needs at least one --data fixture"));
    }
    let (model, _) = ctx.load_kind(&args.model, &[Kind::Params])?;
    let shape = MlpShape::of(&model).map_err(|e| with_path(e, &args.model))?;
    let mut rows = Vec::with_capacity(args.data.len());
    for path in &args.data {
        let (ps, meta) = ctx.load_kind(path, &[Kind::Dataset])?;
        let test = toy::fixture_split(&ps, "test").map_err(|e| with_path(e, path))?;
        if test.labels().iter().any(|&l| l >= shape.classes) {
            return Err(with_path(
                Error::SchemaMismatch(format!(
                    "labels exceed the model's {} classes",
                    shape.classes
                )),
                path,
            ));
        }
        let acc = toy::evaluate(&model, &test).map_err(|e| with_path(e, path))?;
        rows.push((task_id_of(&meta, path), acc));
    }
    let mean = rows.iter().map(|(_, a)| a).sum::<f64>() / rows.len() as f64;
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for (id, acc) in &rows {
        csv.push_str(&format!("{id},{acc:.6}\n"));
        println!("{id}\t{acc:.4}");
    }
    csv.push_str(&format!("average,{mean:.6}\n"));
    println!("average\t{mean:.4}");
    ctx.config = serde_json::Value::Null;
    ctx.write(&args.report, csv.as_bytes())?;
    Ok(manifest_path(&args.report))
}

fn cmd_replay(args: &ReplayArgs) -> CmdResult {
    let text =
        fs::read_to_string(&args.manifest).map_err(|e| with_path(e.into(), &args.manifest))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.manifest.display())))?;
    if manifest.argv.get(1).map(String::as_str) == Some("replay") {
        return Err(Failure::usage("refusing to replay a replay"));
    }
    match run(manifest.argv) {
        0 => Ok(()),
        code => Err(Failure {
            code,
            message: "replayed command failed".into(),
        }),
    }
}
