//! Sweeps over (scheme, batch size, learning rate, seed) and the cost-vs-time
//! Pareto frontier of the runs that reach a metric cutoff.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::executor::{init_params, train_sequential, TrainConfig};
use crate::flops::{method_cost, mlp_constants, CostModelConstants};
use crate::model::{NetworkSpec, Scheme};
use crate::optim::{default_lr_grid, OptimizerConfig};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TrainLoss,
    TrainAcc,
    ValidLoss,
    ValidAcc,
}

impl MetricKind {
    pub fn is_loss(self) -> bool {
        matches!(self, MetricKind::TrainLoss | MetricKind::ValidLoss)
    }

    pub fn direction(self) -> Direction {
        if self.is_loss() {
            Direction::AtMost
        } else {
            Direction::AtLeast
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, MetricKind::ValidLoss | MetricKind::ValidAcc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Crossed when the value is `<=` the cutoff (losses).
    AtMost,
    /// Crossed when the value is `>=` the cutoff (accuracies).
    AtLeast,
}

impl Direction {
    pub fn crossed(self, value: f64, cutoff: f64) -> bool {
        match self {
            Direction::AtMost => value <= cutoff,
            Direction::AtLeast => value >= cutoff,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub metric: MetricKind,
    pub value: f64,
}

impl Cutoff {
    /// Whether an evaluation with this loss and accuracy crosses the cutoff.
    pub fn crossed_by(&self, loss: f64, acc: f64) -> bool {
        let v = if self.metric.is_loss() { loss } else { acc };
        self.metric.direction().crossed(v, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub examples_seen: u64,
    pub value: f64,
}

/// Dense MLP dimensions a run was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub classes: usize,
}

impl NetworkShape {
    pub fn constants(&self) -> CostModelConstants {
        mlp_constants(self.hidden, self.depth, self.input_dim, self.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: Scheme,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub network: NetworkShape,
    pub metric: MetricKind,
    pub history: Vec<HistoryPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

/// First logged step whose value crosses `cutoff`; no interpolation.
pub fn first_crossing(history: &[HistoryPoint], cutoff: f64, direction: Direction) -> Option<usize> {
    history
        .iter()
        .find(|p| direction.crossed(p.value, cutoff))
        .map(|p| p.step)
}

pub fn steps_to_cutoff(record: &RunRecord, cutoff: f64) -> Option<usize> {
    first_crossing(&record.history, cutoff, record.metric.direction())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Total FLOPs.
    pub cost: f64,
    /// Sequential FLOPs.
    pub time: f64,
    /// Index of the run in the slice it was derived from.
    pub run: usize,
    pub cutoff: f64,
    pub scheme: Scheme,
    pub batch_size: usize,
    pub steps: usize,
}

/// Indices of the points not dominated by any other point, ordered by time
/// (then cost, then index). A point is dominated when another has `<=` cost
/// and `<=` time with at least one strict; exact duplicates are all kept.
pub fn frontier_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, ta) = points[a];
        let (cb, tb) = points[b];
        ta.total_cmp(&tb).then(ca.total_cmp(&cb)).then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best_cost = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let t = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].1 == t {
            j += 1;
        }
        // Sorted by cost within equal time: the group minimum comes first.
        let group_min = points[order[i]].0;
        if group_min < best_cost {
            out.extend(
                order[i..j]
                    .iter()
                    .copied()
                    .filter(|&k| points[k].0 == group_min),
            );
            best_cost = group_min;
        }
        i = j;
    }
    out
}

pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let ct: Vec<(f64, f64)> = points.iter().map(|p| (p.cost, p.time)).collect();
    frontier_indices(&ct)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

/// Cost and time of every run that reaches `cutoff`.
pub fn points_at_cutoff(runs: &[RunRecord], cutoff: f64) -> Result<Vec<ParetoPoint>> {
    let mut out = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let Some(steps) = steps_to_cutoff(run, cutoff) else {
            continue;
        };
        let mc = method_cost(&run.network.constants(), run.scheme, run.batch_size, steps)?;
        out.push(ParetoPoint {
            cost: mc.cost,
            time: mc.time,
            run: i,
            cutoff,
            scheme: run.scheme,
            batch_size: run.batch_size,
            steps,
        });
    }
    Ok(out)
}

/// Frontier of each scheme's own runs.
pub fn frontier_by_scheme(points: &[ParetoPoint]) -> BTreeMap<Scheme, Vec<ParetoPoint>> {
    let mut groups: BTreeMap<Scheme, Vec<ParetoPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.scheme).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(s, pts)| (s, pareto_frontier(&pts)))
        .collect()
}

pub const FRONTIER_CSV_HEADER: &str = "cutoff,scheme,batch,cost_flops,time_flops,steps";

/// Per-scheme frontiers for every cutoff, one row per frontier point.
pub fn frontier_csv(runs: &[RunRecord], cutoffs: &[f64]) -> Result<String> {
    let mut out = String::from(FRONTIER_CSV_HEADER);
    out.push('\n');
    for &cutoff in cutoffs {
        let points = points_at_cutoff(runs, cutoff)?;
        for (scheme, frontier) in frontier_by_scheme(&points) {
            for p in frontier {
                let _ = writeln!(
                    out,
                    "{cutoff},{scheme},{},{},{},{}",
                    p.batch_size, p.cost, p.time, p.steps
                );
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    Cifar10 {
        /// Directory holding `data_batch_*.bin`; falls back to `$LOCALPAR_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        files: Vec<PathBuf>,
        #[serde(default = "default_cifar_limit")]
        limit: usize,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_cifar_limit() -> usize {
    4096
}

impl DataSource {
    /// Loads or generates the dataset; synthetic data is drawn from `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                n,
                dim,
                classes,
                separation,
            } => {
                let mut rng = Rng::new(seed).fork(0xDA7A);
                data::synthetic_clusters(&mut rng, *n, *dim, *classes, *separation)
            }
            DataSource::Cifar10 {
                dir,
                files,
                limit,
                standardize,
            } => {
                let files = if !files.is_empty() {
                    files.clone()
                } else {
                    let dir = match dir {
                        Some(d) => d.clone(),
                        None => std::env::var_os("LOCALPAR_DATA_DIR")
                            .map(PathBuf::from)
                            .ok_or_else(|| {
                                Error::config("no CIFAR-10 dir given and LOCALPAR_DATA_DIR unset")
                            })?,
                    };
                    data::cifar10_train_files(&dir)?
                };
                let ds = data::load_cifar10_binary(&files, Some(*limit))?;
                if *standardize {
                    ds.standardize_channels(3)
                } else {
                    Ok(ds)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSize {
    pub hidden: usize,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgdm,
}

fn default_batches() -> Vec<usize> {
    (4..=12).map(|p| 1usize << p).collect()
}
fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Backprop, Scheme::Greedy, Scheme::Overlapping]
}
fn default_budget() -> usize {
    200_000
}
fn default_metric() -> MetricKind {
    MetricKind::TrainLoss
}
fn default_eval_examples() -> usize {
    1024
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_momentum() -> f64 {
    0.9
}
fn default_jobs() -> usize {
    1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

/// Sweep grid and budget. Every field except `network` and `data` has a
/// default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub network: NetworkSize,
    pub data: DataSource,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_lr_grid")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Training examples per run; steps = budget / batch size.
    #[serde(default = "default_budget")]
    pub budget_examples: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default)]
    pub cutoffs: Vec<f64>,
    /// Training examples used for train-metric evaluation.
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    /// Held-out examples (taken from the end of the data) for valid metrics.
    #[serde(default)]
    pub valid_examples: usize,
    /// End a run once every cutoff has been crossed.
    #[serde(default)]
    pub stop_at_cutoffs: bool,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn optimizer_for(&self, lr: f64) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
            OptimizerKind::Sgdm => OptimizerConfig::sgdm(lr, self.momentum),
        }
    }

    /// Hardest cutoff, used for early stopping.
    fn stop_cutoff(&self) -> Option<Cutoff> {
        let direction = self.metric.direction();
        let hardest = self.cutoffs.iter().copied().reduce(|a, b| match direction {
            Direction::AtMost => a.min(b),
            Direction::AtLeast => a.max(b),
        })?;
        Some(Cutoff {
            metric: self.metric,
            value: hardest,
        })
    }

    /// Cells in deterministic key order: seed, scheme, batch size, learning rate.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &scheme in &self.schemes {
                for &batch_size in &self.batch_sizes {
                    for &lr in &self.learning_rates {
                        cells.push(SweepCell {
                            seed,
                            scheme,
                            batch_size,
                            lr,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub scheme: Scheme,
    pub batch_size: usize,
    pub lr: f64,
}

struct SeedData {
    train: Dataset,
    eval: Dataset,
}

fn prepare(cfg: &SweepConfig, seed: u64) -> Result<SeedData> {
    let full = cfg.data.load(seed)?;
    let (train, eval) = if cfg.metric.is_valid() {
        let holdout = cfg.valid_examples.max(1);
        let (train, valid) = full.split(full.len().saturating_sub(holdout))?;
        (train, valid)
    } else {
        let eval = full.prefix(cfg.eval_examples.max(1))?;
        (full, eval)
    };
    Ok(SeedData { train, eval })
}

/// Trains one cell and converts its log into a [`RunRecord`].
fn run_cell(cfg: &SweepConfig, cell: SweepCell, data: &SeedData) -> Result<RunRecord> {
    let shape = NetworkShape {
        input_dim: data.train.dim(),
        hidden: cfg.network.hidden,
        depth: cfg.network.depth,
        classes: data.train.num_classes,
    };
    let spec = NetworkSpec::new(shape.input_dim, shape.hidden, shape.depth, shape.classes, cell.scheme)?;
    let steps = (cfg.budget_examples / cell.batch_size).max(1);
    let mut train_cfg = TrainConfig::new(cfg.optimizer_for(cell.lr), cell.batch_size, steps, cell.seed);
    if cfg.stop_at_cutoffs {
        train_cfg.early_stop = cfg.stop_cutoff();
    }
    let params = init_params(&spec, cell.seed);
    let outcome = train_sequential(&spec, params, &data.train, &data.eval, &train_cfg)?;
    let history = if cfg.metric.is_loss() {
        outcome.log.global_loss_history()
    } else {
        outcome.log.global_acc_history()
    };
    Ok(RunRecord {
        scheme: cell.scheme,
        batch_size: cell.batch_size,
        optimizer: train_cfg.optimizer,
        seed: cell.seed,
        network: shape,
        metric: cfg.metric,
        history: history
            .into_iter()
            .map(|(step, examples_seen, value)| HistoryPoint {
                step,
                examples_seen,
                value,
            })
            .collect(),
        diverged: outcome.aborted,
    })
}

/// Runs every cell of the grid on `cfg.jobs` threads. Results come back in
/// [`SweepConfig::cells`] order regardless of completion order; a diverging
/// run is recorded with its partial history and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<RunRecord>> {
    if cfg.batch_sizes.is_empty() || cfg.learning_rates.is_empty() || cfg.schemes.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut seed_data = BTreeMap::new();
    for &seed in &cfg.seeds {
        seed_data.insert(seed, prepare(cfg, seed)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let cells = cfg.cells();
    pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| run_cell(cfg, cell, &seed_data[&cell.seed]))
            .collect()
    })
}

/// Writes `runs/<scheme>.jsonl` under `dir`.
pub fn write_runs(dir: &Path, runs: &[RunRecord]) -> Result<Vec<PathBuf>> {
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let mut by_scheme: BTreeMap<Scheme, String> = BTreeMap::new();
    for r in runs {
        let line = serde_json::to_string(r)?;
        let buf = by_scheme.entry(r.scheme).or_default();
        buf.push_str(&line);
        buf.push('\n');
    }
    let mut paths = Vec::new();
    for (scheme, text) in by_scheme {
        let path = runs_dir.join(format!("{scheme}.jsonl"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every `*.jsonl` file in `runs_dir` (sorted by file name).
pub fn read_runs(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut runs = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            runs.push(serde_json::from_str(line)?);
        }
    }
    Ok(runs)
}
