//! Discrete-event model of a multi-processor pipeline.
//!
//! Compares synchronous pipelined backprop (microbatches accumulated into one
//! update per minibatch, all forwards before any backward) with chunked local
//! training, where every stage runs forward, auxiliary loss and local
//! backward on each step and nothing flows upstream. Time is measured in
//! abstract cycles and communication has zero latency.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::CostModelConstants;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    PipelinedBackprop,
    ChunkedLocal,
}

fn default_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub num_stages: usize,
    /// Microbatches accumulated per update; backprop only.
    #[serde(default = "default_microbatches")]
    pub microbatches: usize,
    /// Minibatches (backprop) or steps (local) to simulate.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub recomputation: bool,
    pub forward_cycles: Vec<u64>,
    pub backward_cycles: Vec<u64>,
    /// Auxiliary head forward and backward. Under backprop only the last
    /// stage's entry is used, as the cost of the loss.
    pub aux_cycles: Vec<u64>,
    /// Bytes of the activation crossing each of the `num_stages - 1` boundaries.
    #[serde(default)]
    pub boundary_activation_bytes: Vec<f64>,
    pub parameter_bytes: Vec<f64>,
    pub aux_parameter_bytes: Vec<f64>,
    pub input_bytes_per_microbatch: Vec<f64>,
    /// Activations a stage keeps for its own backward pass, per microbatch.
    pub activation_bytes_per_microbatch: Vec<f64>,
}

fn default_microbatches() -> usize {
    1
}

impl PipelineConfig {
    /// Equal costs on every stage and unit byte sizes everywhere.
    pub fn uniform(mode: PipelineMode, stages: usize, microbatches: usize, fwd: u64, bwd: u64, aux: u64) -> Self {
        let d = stages;
        Self {
            mode,
            num_stages: d,
            microbatches,
            steps: 1,
            recomputation: false,
            forward_cycles: vec![fwd; d],
            backward_cycles: vec![bwd; d],
            aux_cycles: vec![aux; d],
            boundary_activation_bytes: vec![1.0; d.saturating_sub(1)],
            parameter_bytes: vec![1.0; d],
            aux_parameter_bytes: vec![1.0; d],
            input_bytes_per_microbatch: vec![1.0; d],
            activation_bytes_per_microbatch: vec![1.0; d],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.num_stages;
        if d == 0 {
            return Err(Error::config("num_stages must be at least 1"));
        }
        if self.microbatches == 0 || self.steps == 0 {
            return Err(Error::config("microbatches and steps must be at least 1"));
        }
        let lens = [
            ("forward_cycles", self.forward_cycles.len(), d),
            ("backward_cycles", self.backward_cycles.len(), d),
            ("aux_cycles", self.aux_cycles.len(), d),
            ("boundary_activation_bytes", self.boundary_activation_bytes.len(), d - 1),
            ("parameter_bytes", self.parameter_bytes.len(), d),
            ("aux_parameter_bytes", self.aux_parameter_bytes.len(), d),
            ("input_bytes_per_microbatch", self.input_bytes_per_microbatch.len(), d),
            ("activation_bytes_per_microbatch", self.activation_bytes_per_microbatch.len(), d),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::config(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if self.forward_cycles.iter().chain(&self.backward_cycles).any(|&c| c == 0) {
            return Err(Error::config("forward and backward cycles must be positive"));
        }
        let bytes = self
            .boundary_activation_bytes
            .iter()
            .chain(&self.parameter_bytes)
            .chain(&self.aux_parameter_bytes)
            .chain(&self.input_bytes_per_microbatch)
            .chain(&self.activation_bytes_per_microbatch);
        for &b in bytes {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::config("byte sizes must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn aux_on(&self, stage: usize) -> u64 {
        match self.mode {
            PipelineMode::ChunkedLocal => self.aux_cycles[stage],
            PipelineMode::PipelinedBackprop if stage + 1 == self.num_stages => self.aux_cycles[stage],
            PipelineMode::PipelinedBackprop => 0,
        }
    }

    /// Cycles stage `s` spends on one microbatch.
    pub fn stage_work(&self, s: usize) -> u64 {
        self.forward_cycles[s] + self.backward_cycles[s] + self.aux_on(s)
    }

    pub fn total_microbatches(&self) -> usize {
        match self.mode {
            PipelineMode::PipelinedBackprop => self.steps * self.microbatches,
            PipelineMode::ChunkedLocal => self.steps,
        }
    }
}

/// Per-stage cycles for a model split into `stages` contiguous chunks at one
/// FLOP per cycle. Earlier stages take the extra layer when the split is
/// uneven.
pub fn stage_cycles_from_constants(
    c: &CostModelConstants,
    stages: usize,
    microbatch: usize,
) -> Result<(Vec<u64>, Vec<u64>, Vec<u64>)> {
    if stages == 0 || stages > c.layers {
        return Err(Error::config(format!("stages must be in 1..={}", c.layers)));
    }
    let (base, extra) = (c.layers / stages, c.layers % stages);
    let b = microbatch as f64;
    let cycles = |x: f64| (x.ceil() as u64).max(1);
    let mut fwd = Vec::with_capacity(stages);
    let mut bwd = Vec::with_capacity(stages);
    let mut aux = Vec::with_capacity(stages);
    for s in 0..stages {
        let layers = (base + usize::from(s < extra)) as f64;
        fwd.push(cycles(layers * c.forward_cost * b));
        bwd.push(cycles(layers * c.forward_cost * c.backward_multiplier * b));
        aux.push(cycles(c.aux_cost * (1.0 + c.backward_multiplier) * b));
    }
    Ok((fwd, bwd, aux))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fwd,
    Bwd,
    Aux,
    Send,
    Recv,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Fwd => "fwd",
            EventKind::Bwd => "bwd",
            EventKind::Aux => "aux",
            EventKind::Send => "send",
            EventKind::Recv => "recv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: u64,
    pub stage: usize,
    pub kind: EventKind,
    pub microbatch: usize,
    pub duration: u64,
}

pub const TRACE_CSV_HEADER: &str = "time,stage,kind,microbatch,duration";

pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for e in events {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.time,
            e.stage,
            e.kind.as_str(),
            e.microbatch,
            e.duration
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: PipelineMode,
    pub num_stages: usize,
    pub microbatches: usize,
    pub total_cycles: u64,
    pub busy_cycles: Vec<u64>,
    pub utilization: Vec<f64>,
    pub mean_utilization: f64,
    pub bytes_received: Vec<f64>,
    pub bytes_transmitted: Vec<f64>,
    /// Peak number of microbatches between a stage's forward and its backward.
    pub live_microbatches: Vec<usize>,
    pub memory_bytes: Vec<f64>,
    /// Microbatches per cycle over the whole run.
    pub throughput: f64,
    /// Microbatches per cycle once the pipeline is full.
    pub steady_state_throughput: f64,
    /// `throughput / steady_state_throughput`.
    pub steady_state_fraction: f64,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TaskKind {
    Forward,
    Backward,
    /// Forward, auxiliary loss and local backward as one unit.
    Local,
}

#[derive(Clone, Copy, Debug)]
struct Task {
    kind: TaskKind,
    microbatch: usize,
    ready: u64,
}

impl Task {
    /// Forward work runs before backward work at equal start times.
    fn priority(&self) -> (u8, usize) {
        match self.kind {
            TaskKind::Forward | TaskKind::Local => (0, self.microbatch),
            TaskKind::Backward => (1, self.microbatch),
        }
    }
}

struct Sim {
    pending: Vec<Vec<Task>>,
    free_at: Vec<u64>,
    busy: Vec<u64>,
    received: Vec<f64>,
    transmitted: Vec<f64>,
    in_flight: Vec<usize>,
    live_peak: Vec<usize>,
    trace: Vec<TraceEvent>,
    end: u64,
}

impl Sim {
    fn new(cfg: &PipelineConfig) -> Self {
        let d = cfg.num_stages;
        Self {
            pending: vec![Vec::new(); d],
            free_at: vec![0; d],
            busy: vec![0; d],
            received: vec![0.0; d],
            transmitted: vec![0.0; d],
            in_flight: vec![0; d],
            live_peak: vec![0; d],
            trace: Vec::new(),
            end: 0,
        }
    }

    fn event(&mut self, time: u64, stage: usize, kind: EventKind, microbatch: usize, duration: u64) {
        if duration > 0 || matches!(kind, EventKind::Send | EventKind::Recv) {
            self.trace.push(TraceEvent {
                time,
                stage,
                kind,
                microbatch,
                duration,
            });
        }
    }

    fn message(&mut self, time: u64, from: usize, to: usize, microbatch: usize, bytes: f64) {
        self.transmitted[from] += bytes;
        self.received[to] += bytes;
        self.event(time, from, EventKind::Send, microbatch, 0);
        self.event(time, to, EventKind::Recv, microbatch, 0);
    }

    /// Earliest-start list scheduling. Successor tasks always become ready
    /// strictly after the start of the task that creates them, so committing
    /// the globally earliest start never violates causality.
    fn next(&self) -> Option<(usize, usize, u64)> {
        let mut best: Option<(usize, usize, u64)> = None;
        for (s, tasks) in self.pending.iter().enumerate() {
            for (i, t) in tasks.iter().enumerate() {
                let start = t.ready.max(self.free_at[s]);
                let better = match best {
                    None => true,
                    Some((bs, bi, bstart)) => match start.cmp(&bstart) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => {
                            let cur = self.pending[bs][bi];
                            (s, t.priority()) < (bs, cur.priority())
                        }
                    },
                };
                if better {
                    best = Some((s, i, start));
                }
            }
        }
        best
    }

    fn run(&mut self, mut on_done: impl FnMut(&mut Self, usize, Task, u64)) {
        while let Some((s, i, start)) = self.next() {
            let task = self.pending[s].swap_remove(i);
            on_done(self, s, task, start);
        }
    }

    fn occupy(&mut self, s: usize, start: u64, work: u64) -> u64 {
        let end = start + work;
        self.busy[s] += work;
        self.free_at[s] = end;
        self.end = self.end.max(end);
        end
    }
}

fn simulate_backprop(cfg: &PipelineConfig) -> Sim {
    let d = cfg.num_stages;
    let m = cfg.microbatches;
    let last = d - 1;
    let mut sim = Sim::new(cfg);
    let mut minibatch_start = 0u64;
    for step in 0..cfg.steps {
        let base = step * m;
        for t in 0..m {
            sim.pending[0].push(Task {
                kind: TaskKind::Forward,
                microbatch: base + t,
                ready: minibatch_start,
            });
        }
        let mut last_forwards = 0usize;
        sim.run(|sim, s, task, start| match task.kind {
            TaskKind::Forward => {
                let fwd = cfg.forward_cycles[s];
                let aux = cfg.aux_on(s);
                sim.event(start, s, EventKind::Fwd, task.microbatch, fwd);
                sim.event(start + fwd, s, EventKind::Aux, task.microbatch, aux);
                let end = sim.occupy(s, start, fwd + aux);
                sim.in_flight[s] += 1;
                sim.live_peak[s] = sim.live_peak[s].max(sim.in_flight[s]);
                if s < last {
                    sim.message(end, s, s + 1, task.microbatch, cfg.boundary_activation_bytes[s]);
                    sim.pending[s + 1].push(Task {
                        kind: TaskKind::Forward,
                        microbatch: task.microbatch,
                        ready: end,
                    });
                } else {
                    // Backward starts once the last stage holds every loss.
                    last_forwards += 1;
                    if last_forwards == m {
                        for t in 0..m {
                            sim.pending[last].push(Task {
                                kind: TaskKind::Backward,
                                microbatch: base + t,
                                ready: end,
                            });
                        }
                    }
                }
            }
            TaskKind::Backward => {
                let bwd = cfg.backward_cycles[s];
                sim.event(start, s, EventKind::Bwd, task.microbatch, bwd);
                let end = sim.occupy(s, start, bwd);
                sim.in_flight[s] -= 1;
                if s > 0 {
                    sim.message(end, s, s - 1, task.microbatch, cfg.boundary_activation_bytes[s - 1]);
                    sim.pending[s - 1].push(Task {
                        kind: TaskKind::Backward,
                        microbatch: task.microbatch,
                        ready: end,
                    });
                }
            }
            TaskKind::Local => unreachable!("local task in backprop schedule"),
        });
        // Accumulated gradients are applied here; the next minibatch starts
        // once every stage has finished.
        minibatch_start = sim.end;
        sim.free_at.iter_mut().for_each(|f| *f = minibatch_start);
    }
    sim
}

fn simulate_local(cfg: &PipelineConfig) -> Sim {
    let last = cfg.num_stages - 1;
    let mut sim = Sim::new(cfg);
    for t in 0..cfg.steps {
        sim.pending[0].push(Task {
            kind: TaskKind::Local,
            microbatch: t,
            ready: 0,
        });
    }
    sim.run(|sim, s, task, start| {
        let (fwd, aux, bwd) = (cfg.forward_cycles[s], cfg.aux_cycles[s], cfg.backward_cycles[s]);
        sim.event(start, s, EventKind::Fwd, task.microbatch, fwd);
        sim.event(start + fwd, s, EventKind::Aux, task.microbatch, aux);
        sim.event(start + fwd + aux, s, EventKind::Bwd, task.microbatch, bwd);
        sim.occupy(s, start, fwd + aux + bwd);
        sim.live_peak[s] = 1;
        if s < last {
            // The output is sent as soon as the forward pass is done.
            let sent = start + fwd;
            sim.message(sent, s, s + 1, task.microbatch, cfg.boundary_activation_bytes[s]);
            sim.pending[s + 1].push(Task {
                kind: TaskKind::Local,
                microbatch: task.microbatch,
                ready: sent,
            });
        }
    });
    sim
}

fn stage_memory(cfg: &PipelineConfig, s: usize, live: usize) -> f64 {
    let live = live as f64;
    let param = cfg.parameter_bytes[s];
    let input = cfg.input_bytes_per_microbatch[s];
    let act = cfg.activation_bytes_per_microbatch[s];
    match (cfg.mode, cfg.recomputation) {
        // Only stage inputs are stored; one microbatch's activations are
        // rebuilt at a time during backward.
        (PipelineMode::PipelinedBackprop, true) => param + live * input + act,
        (PipelineMode::PipelinedBackprop, false) => param + live * (input + act),
        (PipelineMode::ChunkedLocal, _) => param + cfg.aux_parameter_bytes[s] + input + act,
    }
}

pub fn simulate(cfg: &PipelineConfig) -> Result<SimReport> {
    cfg.validate()?;
    let sim = match cfg.mode {
        PipelineMode::PipelinedBackprop => simulate_backprop(cfg),
        PipelineMode::ChunkedLocal => simulate_local(cfg),
    };
    let d = cfg.num_stages;
    let total = sim.end;
    let utilization: Vec<f64> = sim.busy.iter().map(|&b| b as f64 / total as f64).collect();
    let microbatches = cfg.total_microbatches();
    let throughput = microbatches as f64 / total as f64;
    let bottleneck = (0..d).map(|s| cfg.stage_work(s)).max().unwrap_or(1);
    let steady = 1.0 / bottleneck as f64;
    let memory_bytes = (0..d).map(|s| stage_memory(cfg, s, sim.live_peak[s])).collect();
    let mut trace = sim.trace;
    trace.sort_by_key(|e| (e.time, e.stage, e.kind as u8, e.microbatch));
    Ok(SimReport {
        mode: cfg.mode,
        num_stages: d,
        microbatches,
        total_cycles: total,
        mean_utilization: sim.busy.iter().sum::<u64>() as f64 / (d as f64 * total as f64),
        busy_cycles: sim.busy,
        utilization,
        bytes_received: sim.received,
        bytes_transmitted: sim.transmitted,
        live_microbatches: sim.live_peak,
        memory_bytes,
        throughput,
        steady_state_throughput: steady,
        steady_state_fraction: throughput / steady,
        trace,
    })
}

/// Per-stage memory of `cfg` with live microbatch counts read from one
/// simulated minibatch.
pub fn memory_report(cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let mut one = cfg.clone();
    one.steps = 1;
    Ok(simulate(&one)?.memory_bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBytes {
    pub received: Vec<f64>,
    pub transmitted: Vec<f64>,
}

impl StageBytes {
    pub fn total_received(&self) -> f64 {
        self.received.iter().sum()
    }

    pub fn total_transmitted(&self) -> f64 {
        self.transmitted.iter().sum()
    }

    /// Bytes moved across all links, counting each message at both ends.
    pub fn total(&self) -> f64 {
        self.total_received() + self.total_transmitted()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunicationReport {
    pub microbatches: usize,
    pub local: StageBytes,
    pub backprop: StageBytes,
}

/// Bytes each stage sends and receives over `microbatches` microbatches under
/// both modes. Gradient messages are the size of the activation at the same
/// boundary.
pub fn communication_report(boundary_bytes: &[f64], microbatches: usize) -> CommunicationReport {
    let d = boundary_bytes.len() + 1;
    let n = microbatches as f64;
    let mut local = StageBytes {
        received: vec![0.0; d],
        transmitted: vec![0.0; d],
    };
    let mut backprop = local.clone();
    for (s, &b) in boundary_bytes.iter().enumerate() {
        local.transmitted[s] += n * b;
        local.received[s + 1] += n * b;
        backprop.transmitted[s] += n * b;
        backprop.received[s + 1] += n * b;
        backprop.transmitted[s + 1] += n * b;
        backprop.received[s] += n * b;
    }
    CommunicationReport {
        microbatches,
        local,
        backprop,
    }
}
