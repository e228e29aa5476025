//! Training engines.
//!
//! [`train_sequential`] is the single-threaded reference for every scheme.
//! [`train_pipelined`] runs one worker per block and streams activations
//! (with their labels) forward through bounded queues; [`train_staged`] is
//! the single-threaded definition of what the lockstep pipeline computes.

mod log;
mod pipelined;
mod sequential;

pub use log::{LogRecord, TrainLog, CSV_HEADER};
pub use pipelined::{train_pipelined, train_staged, PipelineMode, PipelineOptions};
pub use sequential::train_sequential;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_forward, block_local_backward, BlockSpec, NetworkSpec, Params};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::pareto::Cutoff;
use crate::rng::Rng;
use crate::tensor::Tensor;

const PARAM_STREAM: u64 = 0x5EED_0001;

/// Initial parameters for a run seeded with `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Params {
    Params::init(spec, &Rng::new(seed).fork(PARAM_STREAM))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Global evaluation cadence in steps; the last step is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
    /// Rows per evaluation chunk.
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
    /// Stop after the first evaluation that crosses this cutoff.
    #[serde(default)]
    pub early_stop: Option<Cutoff>,
}

fn default_eval_chunk() -> usize {
    512
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, batch_size: usize, steps: usize, seed: u64) -> Self {
        Self {
            optimizer,
            batch_size,
            steps,
            eval_every: (steps / 200).max(1),
            seed,
            eval_chunk: default_eval_chunk(),
            early_stop: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: Params,
    /// Set when training stopped on a numerical failure or a worker fault;
    /// `log` then holds everything recorded before the stop.
    pub aborted: Option<String>,
}

/// Activations and labels travelling from one block to the next.
#[derive(Clone, Debug)]
pub struct StageMessage {
    /// 1-based minibatch index.
    pub minibatch: usize,
    pub activations: Tensor,
    pub labels: Vec<usize>,
    /// Update count of the producing block when it ran this forward pass.
    pub producer_version: Option<u64>,
}

/// One block's parameters, optimizer and update counter.
#[derive(Debug)]
pub(crate) struct BlockWorker {
    pub index: usize,
    pub block: BlockSpec,
    pub params: Params,
    pub opt: OptimizerState,
    pub version: u64,
    pub is_last: bool,
}

pub(crate) struct Processed {
    pub out: StageMessage,
    pub loss: f64,
    pub accuracy: f64,
}

impl BlockWorker {
    pub fn new(index: usize, spec: &NetworkSpec, params: &Params, optimizer: OptimizerConfig) -> Self {
        Self {
            index,
            block: spec.blocks[index].clone(),
            params: params.clone(),
            opt: OptimizerState::new(optimizer),
            version: 0,
            is_last: index + 1 == spec.blocks.len(),
        }
    }

    /// Forward, local backward and update on one message.
    pub fn process(&mut self, msg: StageMessage) -> Result<Processed> {
        let cache = block_forward(&self.block, &self.params, &msg.activations)?;
        let step = block_local_backward(&self.block, &self.params, &cache, &msg.labels)?;
        if !step.loss.is_finite() {
            return Err(Error::Diverged {
                step: msg.minibatch,
                block: self.index,
                loss: step.loss as f64,
            });
        }
        let out = StageMessage {
            minibatch: msg.minibatch,
            activations: cache.output,
            labels: msg.labels,
            producer_version: Some(self.version),
        };
        self.opt.step(&mut self.params, &step.grads)?;
        self.version += 1;
        Ok(Processed {
            out,
            loss: step.loss as f64,
            accuracy: step.accuracy as f64,
        })
    }

    /// Copies the parameters this worker owns into `target`.
    pub fn export(&self, target: &mut Params) -> Result<()> {
        for id in self.params.block_param_ids(&self.block) {
            *target.get_mut(id)? = self.params.get(id)?.clone();
        }
        Ok(())
    }
}
