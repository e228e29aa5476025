//! Command-line front end.
//!
//! Values resolve in three layers: built-in defaults, then the `--config`
//! file, then flags. Every artifact-producing command writes a
//! `manifest.json` holding the fully resolved job, the seed, the build
//! version and the output paths; `localpar replay --manifest` reruns it.

mod jobs;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use jobs::{DumpFiltersJob, Job, ParetoJob, ProbeJob, ProbeKind, SimulateJob, TrainJob, TrainSummary};

use crate::error::{Error, Result};
use crate::executor::PipelineMode;
use crate::flops::{method_cost, registry, ModelId};
use crate::model::Scheme;
use crate::optim::OptimizerConfig;
use crate::pareto::{DataSource, NetworkSize, SweepConfig};
use crate::pipesim::PipelineConfig;

/// Crate version plus the git revision it was built from.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("LOCALPAR_GIT_REV"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "localpar", version = VERSION, about = "Local-parallelism training and analysis")]
struct Cli {
    /// Seed for all randomness; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network.
    Train(TrainArgs),
    /// Train every cell of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Compute per-scheme Pareto frontiers from sweep runs.
    Pareto(ParetoArgs),
    /// Print FLOPs cost and time of a training method.
    Flops(FlopsArgs),
    /// Simulate a pipelined or chunked-local schedule.
    Simulate(SimulateArgs),
    /// Run a diagnostic probe.
    Probe(ProbeArgs),
    /// Write normalized first-layer filters of a checkpoint as CSV.
    DumpFilters(DumpFiltersArgs),
    /// Rerun the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Synthetic,
    Cifar10,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Dataset source.
    #[arg(long, value_enum)]
    data: Option<DataKind>,
    /// Number of synthetic examples.
    #[arg(long)]
    samples: Option<usize>,
    /// Synthetic input dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Synthetic class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Distance between synthetic class means.
    #[arg(long)]
    separation: Option<f64>,
    /// CIFAR-10 binary directory (defaults to $LOCALPAR_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Maximum CIFAR-10 records to load.
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn apply(&self, source: &mut DataSource) {
        match self.data {
            Some(DataKind::Synthetic) if !matches!(source, DataSource::Synthetic { .. }) => {
                *source = jobs::default_data();
            }
            Some(DataKind::Cifar10) if !matches!(source, DataSource::Cifar10 { .. }) => {
                *source = DataSource::Cifar10 {
                    dir: None,
                    files: Vec::new(),
                    limit: 4096,
                    standardize: true,
                };
            }
            _ => {}
        }
        match source {
            DataSource::Synthetic {
                n,
                dim,
                classes,
                separation,
            } => {
                set(n, self.samples);
                set(dim, self.dim);
                set(classes, self.classes);
                set(separation, self.separation);
            }
            DataSource::Cifar10 { dir, limit, .. } => {
                if self.data_dir.is_some() {
                    *dir = self.data_dir.clone();
                }
                set(limit, self.limit.or(self.samples));
            }
        }
        jobs::resolve_data_dir(source);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgdm,
}

#[derive(Args, Debug, Default)]
struct OptimArgs {
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
}

impl OptimArgs {
    fn apply(&self, cfg: &mut OptimizerConfig) {
        let lr = self.lr.unwrap_or(cfg.lr());
        match self.optimizer {
            Some(OptimizerArg::Adam) if cfg.name() != "adam" => *cfg = OptimizerConfig::adam(lr),
            Some(OptimizerArg::Sgdm) if cfg.name() != "sgdm" => *cfg = OptimizerConfig::sgdm(lr, 0.9),
            _ => *cfg = cfg.with_lr(lr),
        }
        if let (Some(m), OptimizerConfig::Sgdm { momentum, .. }) = (self.momentum, cfg) {
            *momentum = m;
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PipelineArg {
    Lockstep,
    Async,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML job file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
    /// backprop, greedy, overlapping, chunked<J> or last<K>.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train as a pipeline of block workers.
    #[arg(long, value_enum)]
    pipeline: Option<PipelineArg>,
    /// Threads for lockstep pipeline rounds.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML sweep file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out/sweep")]
    out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ParetoArgs {
    /// Sweep output directory or its `runs/` subdirectory.
    #[arg(long)]
    runs: PathBuf,
    /// Metric cutoffs; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    cutoff: Vec<f64>,
    #[arg(long, default_value = "out/pareto")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// mlp4096, resnet18, resnet50, transformer_small or transformer_large.
    #[arg(long)]
    model: ModelId,
    /// Methods; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    method: Vec<Scheme>,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML pipeline file.
    #[arg(long)]
    config: PathBuf,
    /// Also write trace.csv.
    #[arg(long)]
    emit_trace: bool,
    #[arg(long, default_value = "out/simulate")]
    out: PathBuf,
    #[arg(long)]
    microbatches: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    recomputation: Option<bool>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(subcommand)]
    probe: ProbeCommand,
    #[arg(long, default_value = "out/probe", global = true)]
    out: PathBuf,
    #[arg(long, default_value_t = 64, global = true)]
    hidden: usize,
    #[arg(long, default_value_t = 5, global = true)]
    depth: usize,
    #[arg(long, default_value_t = 64, global = true)]
    batch: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Subcommand, Debug)]
enum ProbeCommand {
    /// Per-layer cosine between greedy and backprop gradients.
    Cosine {
        #[arg(long, default_value_t = 300)]
        warmup_steps: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
    },
    /// Train chunked(J) for several J.
    Ablation {
        #[arg(long, value_delimiter = ',', required = true)]
        js: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1024)]
        test_examples: usize,
    },
    /// Memorization of random labels by backprop and greedy.
    Capacity {
        #[arg(long, default_value_t = 2000)]
        subset: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
}

#[derive(Args, Debug)]
struct DumpFiltersArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out/filters")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    #[serde(flatten)]
    pub job: Job,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Runs a job and records it in `out/manifest.json`.
pub fn execute_job(job: &Job, out: &Path) -> Result<(String, Manifest)> {
    let (summary, outputs) = job.execute(out)?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        job: job.clone(),
        seed: job.seed(),
        outputs,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok((summary, manifest))
}

fn train_job(args: &TrainArgs, seed: Option<u64>) -> Result<TrainJob> {
    let mut job = match &args.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::config(e.to_string()))?,
        None => TrainJob::default(),
    };
    set(&mut job.scheme, args.scheme);
    set(&mut job.network.hidden, args.hidden);
    set(&mut job.network.depth, args.depth);
    set(&mut job.batch_size, args.batch);
    set(&mut job.steps, args.steps);
    set(&mut job.seed, seed);
    if args.eval_every.is_some() {
        job.eval_every = args.eval_every;
    }
    if let Some(mode) = args.pipeline {
        let mut opts = job.pipeline.unwrap_or_default();
        opts.mode = match mode {
            PipelineArg::Lockstep => PipelineMode::Lockstep,
            PipelineArg::Async => PipelineMode::Async,
        };
        job.pipeline = Some(opts);
    }
    if let (Some(j), Some(opts)) = (args.jobs, job.pipeline.as_mut()) {
        opts.jobs = j;
    }
    args.optim.apply(&mut job.optimizer);
    args.data.apply(&mut job.data);
    Ok(job)
}

fn sweep_job(args: &SweepArgs, seed: Option<u64>) -> Result<SweepConfig> {
    let mut cfg = SweepConfig::from_toml(&read_text(&args.config)?)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    set(&mut cfg.jobs, args.jobs);
    jobs::resolve_data_dir(&mut cfg.data);
    Ok(cfg)
}

fn simulate_job(args: &SimulateArgs) -> Result<SimulateJob> {
    let mut pipeline = PipelineConfig::from_toml(&read_text(&args.config)?)?;
    set(&mut pipeline.microbatches, args.microbatches);
    set(&mut pipeline.steps, args.steps);
    set(&mut pipeline.recomputation, args.recomputation);
    pipeline.validate()?;
    Ok(SimulateJob {
        pipeline,
        emit_trace: args.emit_trace,
    })
}

fn probe_job(args: &ProbeArgs, seed: Option<u64>) -> ProbeJob {
    let mut data = jobs::default_data();
    args.data.apply(&mut data);
    let mut optimizer = OptimizerConfig::adam(1e-3);
    args.optim.apply(&mut optimizer);
    let kind = match &args.probe {
        ProbeCommand::Cosine { warmup_steps, batches } => ProbeKind::Cosine {
            warmup_steps: *warmup_steps,
            batches: *batches,
        },
        ProbeCommand::Ablation {
            js,
            steps,
            test_examples,
        } => ProbeKind::Ablation {
            js: js.clone(),
            steps: *steps,
            test_examples: *test_examples,
        },
        ProbeCommand::Capacity { subset, steps } => ProbeKind::Capacity {
            samples: *subset,
            steps: *steps,
        },
    };
    ProbeJob {
        kind,
        network: NetworkSize {
            hidden: args.hidden,
            depth: args.depth,
        },
        data,
        optimizer,
        batch_size: args.batch,
        seed: seed.unwrap_or(0),
    }
}

fn flops_output(args: &FlopsArgs) -> Result<String> {
    let c = registry(args.model);
    let mut rows = Vec::new();
    for &m in &args.method {
        rows.push(method_cost(&c, m, args.batch, args.steps)?);
    }
    Ok(match args.format {
        Format::Csv => {
            let mut out = String::from("model,method,batch,steps,cost_per_example,cost_flops,time_flops,parallelism\n");
            for r in &rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    args.model, r.method, args.batch, args.steps, r.cost_per_example, r.cost, r.time, r.parallelism
                ));
            }
            out
        }
        Format::Json => {
            let values: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "model": args.model.to_string(),
                        "method": r.method,
                        "batch": args.batch,
                        "steps": args.steps,
                        "cost_per_example": r.cost_per_example,
                        "cost_flops": r.cost,
                        "time_flops": r.time,
                        "parallelism": r.parallelism,
                    })
                })
                .collect();
            serde_json::to_string_pretty(&values)? + "\n"
        }
    })
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    let (job, out) = match cli.command {
        Command::Flops(args) => {
            let text = flops_output(&args)?;
            let _ = stdout.write_all(text.as_bytes());
            return Ok(());
        }
        Command::Train(args) => (Job::Train(train_job(&args, seed)?), args.out),
        Command::Sweep(args) => (Job::Sweep(sweep_job(&args, seed)?), args.out),
        Command::Pareto(args) => (
            Job::Pareto(ParetoJob {
                runs: args.runs,
                cutoffs: args.cutoff,
            }),
            args.out,
        ),
        Command::Simulate(args) => (Job::Simulate(simulate_job(&args)?), args.out),
        Command::Probe(args) => (Job::Probe(probe_job(&args, seed)), args.out),
        Command::DumpFilters(args) => (
            Job::DumpFilters(DumpFiltersJob {
                checkpoint: args.checkpoint,
            }),
            args.out,
        ),
        Command::Replay(args) => {
            let manifest = Manifest::read(&args.manifest)?;
            let out = args.out.unwrap_or_else(|| {
                args.manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default()
            });
            (manifest.job, out)
        }
    };
    let (summary, manifest) = execute_job(&job, &out)?;
    let _ = writeln!(stdout, "{summary}");
    for p in &manifest.outputs {
        let _ = writeln!(stdout, "wrote {}", p.display());
    }
    let _ = writeln!(stdout, "wrote {}", out.join("manifest.json").display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command, writing
/// to the given streams. Returns the process exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let _ = writeln!(stderr, "{}", cmd.render_help());
        return EXIT_USAGE;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Entry point for the binary.
pub fn run() -> i32 {
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout, &mut stderr)
}
