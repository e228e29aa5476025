//! Fully resolved configurations for every artifact-producing command and
//! the code that executes them. A job plus its output directory is all that
//! is needed to reproduce a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::executor::{init_params, train_pipelined, train_sequential, PipelineOptions, TrainConfig};
use crate::model::{NetworkSpec, Scheme};
use crate::optim::OptimizerConfig;
use crate::pareto::{self, DataSource, NetworkSize, SweepConfig};
use crate::pipesim::{self, PipelineConfig};
use crate::probes;
use crate::rng::Rng;

pub fn default_data() -> DataSource {
    DataSource::Synthetic {
        n: 4096,
        dim: 32,
        classes: 10,
        separation: 3.0,
    }
}

fn default_network() -> NetworkSize {
    NetworkSize { hidden: 64, depth: 8 }
}

fn default_eval_examples() -> usize {
    1024
}

/// Fills a missing CIFAR-10 directory from `LOCALPAR_DATA_DIR` so the job
/// records where its data came from.
pub fn resolve_data_dir(data: &mut DataSource) {
    if let DataSource::Cifar10 { dir, files, .. } = data {
        if dir.is_none() && files.is_empty() {
            *dir = std::env::var_os("LOCALPAR_DATA_DIR").map(PathBuf::from);
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub scheme: Scheme,
    #[serde(default = "default_network")]
    pub network: NetworkSize,
    #[serde(default = "default_data")]
    pub data: DataSource,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run as a pipeline of block workers instead of sequentially.
    #[serde(default)]
    pub pipeline: Option<PipelineOptions>,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            scheme: Scheme::Greedy,
            network: default_network(),
            data: default_data(),
            optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 64,
            steps: 500,
            eval_every: None,
            eval_examples: default_eval_examples(),
            seed: 0,
            pipeline: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub aborted: Option<String>,
}

impl TrainJob {
    pub fn run(&self, out: &Path) -> Result<(TrainSummary, Vec<PathBuf>)> {
        ensure_dir(out)?;
        let data = self.data.load(self.seed)?;
        let eval = data.prefix(self.eval_examples.clamp(1, data.len()))?;
        let spec = NetworkSpec::new(data.dim(), self.network.hidden, self.network.depth, data.num_classes, self.scheme)?;
        let params = init_params(&spec, self.seed);
        let mut cfg = TrainConfig::new(self.optimizer, self.batch_size, self.steps, self.seed);
        if let Some(e) = self.eval_every {
            cfg.eval_every = e.max(1);
        }
        let outcome = match self.pipeline {
            Some(opts) => train_pipelined(&spec, params, &data, &cfg, opts)?,
            None => train_sequential(&spec, params, &data, &eval, &cfg)?,
        };
        let mut outputs = vec![
            write(&out.join("log.csv"), &outcome.log.to_csv())?,
            write(&out.join("log.jsonl"), &outcome.log.to_jsonl()?)?,
        ];
        let ckpt = out.join("model.lpck");
        checkpoint::save_network(&ckpt, &spec, &outcome.params, &[])?;
        outputs.push(ckpt);
        let last = outcome.log.last_global();
        Ok((
            TrainSummary {
                final_loss: last.map(|l| l.0),
                final_accuracy: last.map(|l| l.1),
                aborted: outcome.aborted,
            },
            outputs,
        ))
    }
}

impl SweepConfig {
    /// Runs the sweep and writes `runs/*.jsonl` plus `frontier.csv` when
    /// cutoffs are configured.
    pub fn run_to(&self, out: &Path) -> Result<(usize, Vec<PathBuf>)> {
        ensure_dir(out)?;
        let runs = pareto::run_sweep(self)?;
        let mut outputs = pareto::write_runs(out, &runs)?;
        if !self.cutoffs.is_empty() {
            let csv = pareto::frontier_csv(&runs, &self.cutoffs)?;
            outputs.push(write(&out.join("frontier.csv"), &csv)?);
        }
        Ok((runs.len(), outputs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoJob {
    pub runs: PathBuf,
    pub cutoffs: Vec<f64>,
}

impl ParetoJob {
    pub fn run(&self, out: &Path) -> Result<Vec<PathBuf>> {
        ensure_dir(out)?;
        let dir = if self.runs.join("runs").is_dir() {
            self.runs.join("runs")
        } else {
            self.runs.clone()
        };
        let runs = pareto::read_runs(&dir)?;
        let csv = pareto::frontier_csv(&runs, &self.cutoffs)?;
        Ok(vec![write(&out.join("frontier.csv"), &csv)?])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateJob {
    pub pipeline: PipelineConfig,
    pub emit_trace: bool,
}

impl SimulateJob {
    pub fn run(&self, out: &Path) -> Result<(pipesim::SimReport, Vec<PathBuf>)> {
        ensure_dir(out)?;
        let report = pipesim::simulate(&self.pipeline)?;
        let comm = pipesim::communication_report(
            &self.pipeline.boundary_activation_bytes,
            report.microbatches,
        );
        let mut outputs = vec![
            write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?,
            write(&out.join("communication.json"), &serde_json::to_string_pretty(&comm)?)?,
        ];
        if self.emit_trace {
            outputs.push(write(&out.join("trace.csv"), &pipesim::trace_csv(&report.trace))?);
        }
        Ok((report, outputs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "lowercase")]
pub enum ProbeKind {
    /// Cosine profile after `warmup_steps` of greedy training.
    Cosine { warmup_steps: usize, batches: usize },
    Ablation { js: Vec<usize>, steps: usize, test_examples: usize },
    Capacity { samples: usize, steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeJob {
    pub kind: ProbeKind,
    pub network: NetworkSize,
    pub data: DataSource,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeJob {
    pub fn run(&self, out: &Path) -> Result<Vec<PathBuf>> {
        ensure_dir(out)?;
        let data = self.data.load(self.seed)?;
        let (hidden, depth) = (self.network.hidden, self.network.depth);
        match &self.kind {
            ProbeKind::Cosine { warmup_steps, batches } => {
                let cfg = TrainConfig::new(self.optimizer, self.batch_size, (*warmup_steps).max(1), self.seed);
                let study = probes::cosine_study(hidden, depth, &data, &cfg, *batches)?;
                Ok(vec![
                    write(&out.join("cosine.csv"), &study.to_csv())?,
                    write(&out.join("cosine.json"), &serde_json::to_string_pretty(&study)?)?,
                ])
            }
            ProbeKind::Ablation { js, steps, test_examples } => {
                let n_test = (*test_examples).min(data.len().saturating_sub(1));
                let (train, test) = data.split(data.len() - n_test)?;
                let cfg = TrainConfig::new(self.optimizer, self.batch_size, *steps, self.seed);
                let rows = probes::chunk_ablation(hidden, depth, js, &train, &test, &cfg)?;
                let mut csv = String::from("j,train_loss,train_acc,test_loss,test_acc\n");
                for r in &rows {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.j, r.train_loss, r.train_acc, r.test_loss, r.test_acc
                    ));
                }
                Ok(vec![write(&out.join("ablation.csv"), &csv)?])
            }
            ProbeKind::Capacity { samples, steps } => {
                let subset = data.prefix((*samples).min(data.len()))?;
                let random = subset.randomize_labels(&mut Rng::new(self.seed).fork(0x1ABE1));
                let cfg = TrainConfig::new(self.optimizer, self.batch_size, *steps, self.seed);
                let curves = probes::random_label_capacity(
                    hidden,
                    depth,
                    &random,
                    &[Scheme::Backprop, Scheme::Greedy],
                    &cfg,
                )?;
                let mut csv = String::from("scheme,step,accuracy\n");
                for c in &curves {
                    for (s, a) in &c.accuracy {
                        csv.push_str(&format!("{},{s},{a}\n", c.scheme));
                    }
                }
                Ok(vec![write(&out.join("capacity.csv"), &csv)?])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpFiltersJob {
    pub checkpoint: PathBuf,
}

impl DumpFiltersJob {
    pub fn run(&self, out: &Path) -> Result<Vec<PathBuf>> {
        ensure_dir(out)?;
        let (_, params) = checkpoint::load_network(&self.checkpoint)?;
        let path = out.join("filters.csv");
        probes::dump_first_layer(&params, &path)?;
        Ok(vec![path])
    }
}

/// Every job the CLI can run, as recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Job {
    Train(TrainJob),
    Sweep(SweepConfig),
    Pareto(ParetoJob),
    Simulate(SimulateJob),
    Probe(ProbeJob),
    DumpFilters(DumpFiltersJob),
}

impl Job {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Train(j) => Some(j.seed),
            Job::Sweep(s) => s.seeds.first().copied(),
            Job::Probe(p) => Some(p.seed),
            Job::Pareto(_) | Job::Simulate(_) | Job::DumpFilters(_) => None,
        }
    }

    /// Executes the job, returning a one-line summary and the files written.
    pub fn execute(&self, out: &Path) -> Result<(String, Vec<PathBuf>)> {
        match self {
            Job::Train(job) => {
                let (summary, outputs) = job.run(out)?;
                Ok((serde_json::to_string(&summary)?, outputs))
            }
            Job::Sweep(cfg) => {
                let (n, outputs) = cfg.run_to(out)?;
                Ok((format!("{n} runs"), outputs))
            }
            Job::Pareto(job) => Ok(("frontier written".into(), job.run(out)?)),
            Job::Simulate(job) => {
                let (report, outputs) = job.run(out)?;
                Ok((
                    format!(
                        "total_cycles={} mean_utilization={} steady_state_fraction={}",
                        report.total_cycles, report.mean_utilization, report.steady_state_fraction
                    ),
                    outputs,
                ))
            }
            Job::Probe(job) => Ok(("probe written".into(), job.run(out)?)),
            Job::DumpFilters(job) => Ok(("filters written".into(), job.run(out)?)),
        }
    }
}
