use std::time::Instant;

use super::{LogRecord, TrainConfig, TrainLog, TrainOutcome};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    block_forward, block_local_backward, evaluate, forward_layers, local_backward,
    merge_overlap_grads, GradientSet, LocalStep, NetworkSpec, Params, Scheme,
};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

/// Trains `params` in place under `spec.scheme`, one minibatch at a time.
///
/// Each minibatch runs forward through the blocks in order; every trainable
/// block computes its local loss and gradients and is updated. Under the
/// overlapping scheme all block gradients are computed first and each shared
/// layer receives the mean of its two contributions. Global loss and accuracy
/// of the final classifier on `eval` are logged on the last block's row every
/// `eval_every` steps.
pub fn train_sequential(
    spec: &NetworkSpec,
    mut params: Params,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    validate(spec, &params, train, cfg)?;
    let start = Instant::now();
    let mut batches = BatchIterator::new(train, cfg.batch_size, cfg.seed)?;
    let mut opts: Vec<OptimizerState> = spec
        .blocks
        .iter()
        .map(|_| OptimizerState::new(cfg.optimizer))
        .collect();
    let last_block = spec.blocks.len() - 1;
    let mut log = TrainLog::default();

    for step in 1..=cfg.steps {
        let (x, y) = batches.next_batch()?;
        let result = if spec.scheme == Scheme::Overlapping {
            overlapping_step(spec, &mut params, &mut opts, &x, &y, step)
        } else {
            chained_step(spec, &mut params, &mut opts, &x, &y, step)
        };
        let losses = match result {
            Ok(losses) => losses,
            Err((block, err)) => {
                return Ok(TrainOutcome {
                    log,
                    params,
                    aborted: Some(format!("step {step}, block {block}: {err}")),
                })
            }
        };
        let examples_seen = (step * cfg.batch_size) as u64;
        let evaluate_now = step % cfg.eval_every.max(1) == 0 || step == cfg.steps;
        let global = if evaluate_now {
            match evaluate(&params, &eval.inputs, &eval.labels, cfg.eval_chunk) {
                Ok((l, a)) => Some((l as f64, a as f64)),
                Err(err) => {
                    return Ok(TrainOutcome {
                        log,
                        params,
                        aborted: Some(format!("step {step}, evaluation: {err}")),
                    })
                }
            }
        } else {
            None
        };
        let wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
        for (block, loss) in losses {
            let global = global.filter(|_| block == last_block);
            log.push(LogRecord {
                step,
                block,
                local_loss: loss,
                global_loss: global.map(|g| g.0),
                global_acc: global.map(|g| g.1),
                examples_seen,
                wallclock_ms,
                input_version: None,
            });
        }
        if let (Some(cut), Some((l, a))) = (cfg.early_stop, global) {
            if cut.crossed_by(l, a) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        params,
        aborted: None,
    })
}

fn validate(spec: &NetworkSpec, params: &Params, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::config("batch size and steps must be positive"));
    }
    if train.dim() != spec.input_dim || train.num_classes != spec.classes {
        return Err(Error::config(format!(
            "dataset ({} features, {} classes) does not fit network ({}, {})",
            train.dim(),
            train.num_classes,
            spec.input_dim,
            spec.classes
        )));
    }
    if params.layers.len() != spec.depth {
        return Err(Error::config("parameter depth does not match network"));
    }
    for k in spec.head_ids() {
        params.head(k)?;
    }
    Ok(())
}

type StepResult = std::result::Result<Vec<(usize, f64)>, (usize, Error)>;

fn check_loss(block: usize, at: usize, step: &LocalStep) -> std::result::Result<(), (usize, Error)> {
    if step.loss.is_finite() {
        Ok(())
    } else {
        Err((
            block,
            Error::Diverged {
                step: at,
                block,
                loss: step.loss as f64,
            },
        ))
    }
}

/// Blocks in order; each block updates right after its local backward. The
/// activations handed on were computed before the update.
fn chained_step(
    spec: &NetworkSpec,
    params: &mut Params,
    opts: &mut [OptimizerState],
    x: &Tensor,
    y: &[usize],
    at: usize,
) -> StepResult {
    let mut act = x.clone();
    let mut losses = Vec::new();
    for (i, block) in spec.blocks.iter().enumerate() {
        let cache = block_forward(block, params, &act).map_err(|e| (i, e))?;
        if block.trainable {
            let step = block_local_backward(block, params, &cache, y).map_err(|e| (i, e))?;
            check_loss(i, at, &step)?;
            opts[i].step(params, &step.grads).map_err(|e| (i, e))?;
            losses.push((i, step.loss as f64));
        }
        act = cache.output;
    }
    Ok(losses)
}

fn overlapping_step(
    spec: &NetworkSpec,
    params: &mut Params,
    opts: &mut [OptimizerState],
    x: &Tensor,
    y: &[usize],
    at: usize,
) -> StepResult {
    let depth = spec.depth;
    let all = forward_layers(params, 0, depth, x).map_err(|e| (0, e))?;
    let layer_output = |k: usize| {
        if k + 1 < depth {
            &all.layers[k + 1].input
        } else {
            &all.output
        }
    };
    let mut merged = GradientSet::new();
    let mut losses = Vec::with_capacity(spec.blocks.len());
    for (i, block) in spec.blocks.iter().enumerate() {
        let step = local_backward(
            params,
            block.lo,
            &all.layers[block.lo..block.hi],
            layer_output(block.hi - 1),
            block.head_id(),
            y,
        )
        .map_err(|e| (i, e))?;
        check_loss(i, at, &step)?;
        losses.push((i, step.loss as f64));
        merged = if block.shares_first {
            merge_overlap_grads(&merged, &step.grads, block.lo).map_err(|e| (i, e))?
        } else {
            let mut m = merged;
            m.extend(step.grads);
            m
        };
    }
    for (i, block) in spec.blocks.iter().enumerate() {
        let ids = params.block_param_ids(block);
        opts[i]
            .step(params, &merged.restrict(&ids))
            .map_err(|e| (i, e))?;
    }
    Ok(losses)
}
