//! `soupmix` command line: `make-task`, `train-pool`, `soup`, `eval`,
//! `report`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or schema error, 3 numeric
//! failure.
//!
//! Randomness comes from the single `--seed` flag. Each consumer derives its
//! own stream as `derive_seed(seed, <subcommand>, <index>)`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, Architecture, BenchError, EvalResult, SplitEvaluator, TaskBundle, TaskSpec, TrainGrid};
use crate::dfo::{self, Solver};
use crate::partition::{self, PartitionError, PartitionSpec};
use crate::report::{pct, ReportError, ReportTable};
use crate::seeds::derive_seed;
use crate::soups::{self, EvalError, ManifoldConfig, ModelPool, SoupError, SoupFailure, SoupReport};
use crate::tensor_store::{self, CheckpointError, Metadata, ParameterSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "soupmix", version, about = "Fuse finetuned checkpoints into model soups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task bundle (train/val/test plus shifted test sets)
    MakeTask(MakeTaskArgs),
    /// Finetune a pool of MLPs from one shared initialization
    TrainPool(TrainPoolArgs),
    /// Fuse a pool into a single checkpoint
    Soup(SoupArgs),
    /// Evaluate a checkpoint on the clean and shifted test sets
    Eval(EvalArgs),
    /// Aggregate evaluation results into a comparison table
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MakeTaskArgs {
    /// Task config (JSON); the bundled default when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPoolArgs {
    /// Task bundle directory
    #[arg(long)]
    pub task: PathBuf,
    /// Training grid (JSON); the bundled reference grid when omitted
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Uniform,
    Greedy,
    Manifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Cobyla,
    NelderMead,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Cobyla => Solver::Cobyla,
            SolverArg::NelderMead => Solver::NelderMead,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Md,
}

#[derive(Debug, Args)]
pub struct SoupArgs {
    /// Pool directory written by `train-pool`
    #[arg(long)]
    pub pool: PathBuf,
    /// Task bundle providing the validation split (not needed for uniform)
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Partition file (JSON)
    #[arg(long, conflicts_with = "auto")]
    pub partition: Option<PathBuf>,
    /// Automatic partition, e.g. `8:contiguous-blocks` or `3:by-name-prefix`
    #[arg(long, value_name = "M:STRATEGY")]
    pub auto: Option<String>,
    /// Gate threshold [default: 0.998]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Objective evaluations per mixing optimization [default: 250]
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum, default_value = "cobyla")]
    pub solver: SolverArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Also write the result as JSON to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A row: `LABEL=FILE` where FILE is JSON written by `eval --out`
    #[arg(long = "input", value_name = "LABEL=FILE")]
    pub inputs: Vec<String>,
    /// Add "best model" and "second-best model" rows from this pool
    #[arg(long, requires = "task")]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Row the Avg OOD delta is measured against [default: first row]
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: Format,
    /// Write the table here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::EmptyGrid => CliError::Usage(e.to_string()),
            BenchError::AllDiverged(_) => CliError::Numeric(e.to_string()),
            BenchError::Soup(s) => s.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SoupError> for CliError {
    fn from(e: SoupError) -> Self {
        match e {
            SoupError::Optimizer(_) | SoupError::Eval(EvalError::Failed(_)) => CliError::Numeric(e.to_string()),
            SoupError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        match e {
            PartitionError::BadAutoSpec(_) | PartitionError::UnknownStrategy(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Empty | ReportError::UnknownBaseline(_) | ReportError::DuplicateLabel(_) => {
                CliError::Usage(e.to_string())
            }
            ReportError::ShiftMismatch { .. } => CliError::Data(e.to_string()),
        }
    }
}

fn ckpt_err(path: &Path) -> impl FnOnce(CheckpointError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::MakeTask(a) => cmd_make_task(&a, out),
        Command::TrainPool(a) => cmd_train_pool(&a, out, err),
        Command::Soup(a) => cmd_soup(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("stdout: {e}")))
}

pub fn cmd_make_task(a: &MakeTaskArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = match &a.config {
        Some(p) => TaskSpec::from_file(p)?,
        None => TaskSpec::default_v1(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let task = bench::make_task(&spec)?;
    let path = task.save(&a.out)?;
    emit(out, &format!("{}\n", path.display()))
}

pub fn cmd_train_pool(a: &TrainPoolArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let grid = match &a.grid {
        Some(p) => TrainGrid::from_file(p)?,
        None => TrainGrid::reference_v1(),
    };
    if grid.configs.is_empty() {
        return Err(CliError::Usage("training grid is empty".into()));
    }
    let task = TaskBundle::load(&a.task)?;
    let pool = bench::train_pool(&task, &grid, a.seed)?;
    for f in &pool.failed {
        let _ = writeln!(err, "warning: config {} failed: {}", f.id, f.reason);
    }
    let path = bench::save_pool(&pool, a.seed, task.spec.seed, &a.out)?;
    let mut text = String::new();
    for m in &pool.models {
        text.push_str(&format!("{}\tval {}\n", m.config.id, pct(m.val_acc)));
    }
    text.push_str(&format!("{}\n", path.display()));
    emit(out, &text)
}

fn resolve_partition(a: &SoupArgs, ps: &ParameterSet) -> Result<PartitionSpec, CliError> {
    let spec = match (&a.partition, &a.auto) {
        (Some(p), _) => PartitionSpec::from_json_file(p)?,
        (None, Some(auto)) => {
            let (m, strategy) = partition::parse_auto(auto)?;
            partition::auto_partition(&ps.names(), m, strategy)?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "--method manifold needs --partition FILE or --auto M:STRATEGY".into(),
            ))
        }
    };
    spec.validate_for(ps)?;
    Ok(spec)
}

fn soup_failure(f: SoupFailure, out_dir: &Path, err: &mut dyn Write) -> CliError {
    if let Some(partial) = f.partial {
        let path = out_dir.join("report.partial.json");
        if write_text(&path, &partial.to_json()).is_ok() {
            let _ = writeln!(err, "partial report written to {}", path.display());
        }
    }
    f.error.into()
}

pub fn cmd_soup(a: &SoupArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if let Some(tau) = a.tau {
        if !(0.0..=1.0).contains(&tau) {
            return Err(CliError::Usage(format!("--tau {tau} outside [0, 1]")));
        }
    }
    if a.budget == Some(0) {
        return Err(CliError::Usage("--budget must be at least 1".into()));
    }
    if a.method != MethodArg::Manifold && (a.tau.is_some() || a.budget.is_some()) {
        let _ = writeln!(err, "warning: --tau and --budget only affect --method manifold");
    }
    if a.method == MethodArg::Uniform && (a.partition.is_some() || a.auto.is_some()) {
        let _ = writeln!(err, "warning: partition flags only affect --method manifold");
    }
    let (manifest, pool) = bench::load_pool(&a.pool)?;
    let arch = manifest.architecture.clone();
    let task = match (&a.task, a.method) {
        (Some(t), _) => Some(TaskBundle::load(t)?),
        (None, MethodArg::Uniform) => None,
        (None, _) => return Err(CliError::Usage("--task is required for greedy and manifold".into())),
    };
    let spec = match a.method {
        MethodArg::Manifold => Some(resolve_partition(a, &pool.members()[0].params)?),
        _ => None,
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;

    let (fused, mut report) = run_soup(a, &arch, pool, task.as_ref(), spec.as_ref())
        .map_err(|f| soup_failure(f, &a.out, err))?;

    let ckpt_name = "fused.ckpt";
    report.final_state.checkpoint_path = Some(ckpt_name.into());
    let mut meta = Metadata::new();
    meta.insert("method".into(), report.method.to_string());
    meta.insert("ingredients".into(), report.final_state.ingredients.join(","));
    if let Some(v) = report.final_state.val_acc {
        meta.insert("val_acc".into(), format!("{v:?}"));
    }
    let ckpt = a.out.join(ckpt_name);
    tensor_store::save(&fused, &meta, &ckpt).map_err(ckpt_err(&ckpt))?;
    let report_path = a.out.join("report.json");
    write_text(&report_path, &format!("{}\n", report.to_json()))?;

    let acc = report.final_state.val_acc.map(pct).unwrap_or_else(|| "n/a".into());
    emit(
        out,
        &format!(
            "method {}  k {}  val {}\n{}\n{}\n",
            report.method,
            report.final_state.k,
            acc,
            ckpt.display(),
            report_path.display()
        ),
    )
}

fn run_soup(
    a: &SoupArgs,
    arch: &Architecture,
    pool: ModelPool,
    task: Option<&TaskBundle>,
    spec: Option<&PartitionSpec>,
) -> Result<(ParameterSet, SoupReport), SoupFailure> {
    match a.method {
        MethodArg::Uniform => soups::uniform_soup(&pool),
        MethodArg::Greedy => {
            let eval = SplitEvaluator::validation(task.expect("checked"), arch.clone());
            soups::greedy_soup(pool, &eval)
        }
        MethodArg::Manifold => {
            let eval = SplitEvaluator::validation(task.expect("checked"), arch.clone());
            let config = ManifoldConfig {
                tau: a.tau.unwrap_or(soups::DEFAULT_TAU),
                budget: a.budget.unwrap_or(dfo::DEFAULT_BUDGET),
                seed: derive_seed(a.seed, "soup", 0),
                solver: a.solver.into(),
            };
            let (fused, mut report) = soups::manifold_mix_soup(pool, spec.expect("checked"), &eval, &config)?;
            // echo the user-facing master seed, not the derived one
            report.seed = Some(a.seed);
            Ok((fused, report))
        }
    }
}

pub fn eval_markdown(r: &EvalResult) -> String {
    let mut s = String::from("| Dataset | Accuracy |\n|---|---|\n");
    if let Some(v) = r.val {
        s.push_str(&format!("| val | {} |\n", pct(v)));
    }
    s.push_str(&format!("| clean | {} |\n", pct(r.clean)));
    for sh in &r.shifts {
        s.push_str(&format!("| {} | {} |\n", sh.id, pct(sh.accuracy)));
    }
    if let Some(v) = r.avg_ood {
        s.push_str(&format!("| Avg OOD | {} |\n", pct(v)));
    }
    s
}

fn eval_checkpoint(path: &Path, task: &TaskBundle) -> Result<EvalResult, CliError> {
    let (ps, _) = tensor_store::load(path).map_err(ckpt_err(path))?;
    let arch = Architecture::infer(&ps)?;
    Ok(bench::evaluate_ood(&ps, task, &arch)?)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let task = TaskBundle::load(&a.task)?;
    let result = eval_checkpoint(&a.checkpoint, &task)?;
    let json = format!("{}\n", serde_json::to_string_pretty(&result).expect("serializable"));
    if let Some(p) = &a.out {
        write_text(p, &json)?;
    }
    match a.format {
        Format::Json => emit(out, &json),
        Format::Md => emit(out, &eval_markdown(&result)),
    }
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut parsed = Vec::new();
    for item in &a.inputs {
        let (label, file) = item
            .split_once('=')
            .filter(|(l, f)| !l.is_empty() && !f.is_empty())
            .ok_or_else(|| CliError::Usage(format!("--input {item:?} is not LABEL=FILE")))?;
        parsed.push((label.to_string(), PathBuf::from(file)));
    }
    let mut missing: Vec<String> = parsed
        .iter()
        .filter(|(_, p)| !p.is_file())
        .map(|(_, p)| p.display().to_string())
        .collect();
    for p in a.pool.iter().chain(&a.task) {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing inputs: {}", missing.join(", "))));
    }
    if parsed.is_empty() && a.pool.is_none() {
        return Err(CliError::Usage("report needs --input LABEL=FILE or --pool/--task".into()));
    }

    let mut rows: Vec<(String, EvalResult)> = Vec::new();
    if let (Some(pool_dir), Some(task_dir)) = (&a.pool, &a.task) {
        let (manifest, _) = bench::load_pool(pool_dir)?;
        let task = TaskBundle::load(task_dir)?;
        let ranked = manifest.ranked();
        for (label, entry) in ["best model", "second-best model"].iter().zip(ranked) {
            let r = eval_checkpoint(&pool_dir.join(&entry.checkpoint), &task)?;
            rows.push((format!("{label} ({})", entry.id), r));
        }
    }
    for (label, path) in &parsed {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let r: EvalResult =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        rows.push((label.clone(), r));
    }
    let table = ReportTable::new(rows, a.baseline.as_deref())?;
    let text = match a.format {
        Format::Json => format!("{}\n", table.to_json()),
        Format::Md => table.to_markdown(),
    };
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    emit(out, &text)
}
