use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BlockWorker, LogRecord, StageMessage, TrainConfig, TrainLog, TrainOutcome};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, Params, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// All blocks advance one round at a time behind a barrier.
    Lockstep,
    /// Workers free-run, coupled only by their queues.
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub mode: PipelineMode,
    /// Threads available to lockstep rounds.
    pub jobs: usize,
    /// Queue capacity between async workers.
    pub queue_capacity: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Lockstep,
            jobs: 1,
            queue_capacity: 2,
        }
    }
}

fn check_scheme(spec: &NetworkSpec, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
    match spec.scheme {
        Scheme::Greedy | Scheme::Chunked(_) if spec.blocks.len() >= 2 => {}
        s => {
            return Err(Error::config(format!(
                "pipelined training needs greedy or chunked with >= 2 blocks, got {s}"
            )))
        }
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::config("batch size and steps must be positive"));
    }
    if train.dim() != spec.input_dim || train.num_classes != spec.classes {
        return Err(Error::config("dataset does not fit network"));
    }
    Ok(())
}

fn record(
    worker: &BlockWorker,
    msg_version: Option<u64>,
    minibatch: usize,
    batch_size: usize,
    loss: f64,
    accuracy: f64,
    start: Instant,
) -> LogRecord {
    LogRecord {
        step: minibatch,
        block: worker.index,
        local_loss: loss,
        global_loss: worker.is_last.then_some(loss),
        global_acc: worker.is_last.then_some(accuracy),
        examples_seen: (minibatch * batch_size) as u64,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        input_version: msg_version,
    }
}

fn finish(workers: &[BlockWorker], params: &Params, mut log: TrainLog, aborted: Option<String>) -> Result<TrainOutcome> {
    let mut params = params.clone();
    for w in workers {
        w.export(&mut params)?;
    }
    log.sort();
    Ok(TrainOutcome {
        log,
        params,
        aborted,
    })
}

/// Single-threaded definition of lockstep pipeline semantics.
///
/// One message is in flight per block boundary. In round `r` (0-based),
/// block `j` processes minibatch `r - j + 1`; blocks run last-to-first so
/// each consumes what its predecessor produced in the previous round.
/// `steps` minibatches take `steps + J - 1` rounds.
pub fn train_staged(
    spec: &NetworkSpec,
    params: Params,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_scheme(spec, train, cfg)?;
    let start = Instant::now();
    let j = spec.blocks.len();
    let mut workers: Vec<BlockWorker> = (0..j)
        .map(|i| BlockWorker::new(i, spec, &params, cfg.optimizer))
        .collect();
    let mut batches = BatchIterator::new(train, cfg.batch_size, cfg.seed)?;
    let mut slots: Vec<Option<StageMessage>> = vec![None; j];
    let mut log = TrainLog::default();
    for round in 0..cfg.steps + j - 1 {
        for b in (0..j).rev() {
            let msg = if b == 0 {
                if round < cfg.steps {
                    let (x, y) = batches.next_batch()?;
                    Some(StageMessage {
                        minibatch: round + 1,
                        activations: x,
                        labels: y,
                        producer_version: None,
                    })
                } else {
                    None
                }
            } else {
                slots[b - 1].take()
            };
            let Some(msg) = msg else { continue };
            let (mb, version) = (msg.minibatch, msg.producer_version);
            match workers[b].process(msg) {
                Ok(p) => {
                    log.push(record(&workers[b], version, mb, cfg.batch_size, p.loss, p.accuracy, start));
                    if b + 1 < j {
                        slots[b] = Some(p.out);
                    }
                }
                Err(e) => {
                    let reason = format!("block {b}, minibatch {mb}: {e}");
                    return finish(&workers, &params, log, Some(reason));
                }
            }
        }
    }
    finish(&workers, &params, log, None)
}

/// Pipelined local training with one worker per block.
///
/// Lockstep mode executes the rounds of [`train_staged`] with all blocks of a
/// round running concurrently on `jobs` threads; the result is bit-identical
/// to the staged reference for any thread count. Async mode gives every block
/// its own thread and bounded queue. Because blocks only exchange forward
/// messages in FIFO order, async runs compute the same values; only timing
/// differs.
pub fn train_pipelined(
    spec: &NetworkSpec,
    params: Params,
    train: &Dataset,
    cfg: &TrainConfig,
    opts: PipelineOptions,
) -> Result<TrainOutcome> {
    check_scheme(spec, train, cfg)?;
    match opts.mode {
        PipelineMode::Lockstep => lockstep(spec, params, train, cfg, opts.jobs.max(1)),
        PipelineMode::Async => free_running(spec, params, train, cfg, opts.queue_capacity.max(1)),
    }
}

fn lockstep(
    spec: &NetworkSpec,
    params: Params,
    train: &Dataset,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<TrainOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let j = spec.blocks.len();
    let mut workers: Vec<BlockWorker> = (0..j)
        .map(|i| BlockWorker::new(i, spec, &params, cfg.optimizer))
        .collect();
    let mut batches = BatchIterator::new(train, cfg.batch_size, cfg.seed)?;
    // inbox[b] is the capacity-1 queue feeding block b.
    let mut inbox: Vec<Option<StageMessage>> = vec![None; j];
    let mut log = TrainLog::default();
    for round in 0..cfg.steps + j - 1 {
        if round < cfg.steps {
            let (x, y) = batches.next_batch()?;
            inbox[0] = Some(StageMessage {
                minibatch: round + 1,
                activations: x,
                labels: y,
                producer_version: None,
            });
        }
        let inputs = std::mem::replace(&mut inbox, vec![None; j]);
        let results: Vec<Option<(usize, Option<u64>, Result<super::Processed>)>> = pool.install(|| {
            workers
                .par_iter_mut()
                .zip(inputs.into_par_iter())
                .map(|(w, msg)| {
                    msg.map(|m| {
                        let (mb, v) = (m.minibatch, m.producer_version);
                        (mb, v, w.process(m))
                    })
                })
                .collect()
        });
        let mut failure = None;
        for (b, res) in results.into_iter().enumerate() {
            let Some((mb, version, res)) = res else { continue };
            match res {
                Ok(p) => {
                    log.push(record(&workers[b], version, mb, cfg.batch_size, p.loss, p.accuracy, start));
                    if b + 1 < j {
                        inbox[b + 1] = Some(p.out);
                    }
                }
                Err(e) => {
                    failure.get_or_insert(format!("block {b}, minibatch {mb}: {e}"));
                }
            }
        }
        if failure.is_some() {
            return finish(&workers, &params, log, failure);
        }
    }
    finish(&workers, &params, log, None)
}

fn free_running(
    spec: &NetworkSpec,
    params: Params,
    train: &Dataset,
    cfg: &TrainConfig,
    capacity: usize,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let j = spec.blocks.len();
    let workers: Vec<BlockWorker> = (0..j)
        .map(|i| BlockWorker::new(i, spec, &params, cfg.optimizer))
        .collect();
    let mut senders: Vec<Option<Sender<StageMessage>>> = Vec::with_capacity(j);
    let mut receivers: Vec<Option<Receiver<StageMessage>>> = Vec::with_capacity(j);
    for _ in 0..j {
        let (tx, rx) = bounded(capacity);
        senders.push(Some(tx));
        receivers.push(Some(rx));
    }
    // Block b reads receivers[b] and writes senders[b + 1].
    let feeder = senders[0].take().expect("first queue");
    let mut batches = BatchIterator::new(train, cfg.batch_size, cfg.seed)?;
    let steps = cfg.steps;
    let batch_size = cfg.batch_size;

    let joined: Vec<(BlockWorker, TrainLog, Option<String>)> = thread::scope(|scope| {
        let mut handles = Vec::with_capacity(j);
        for (b, mut worker) in workers.into_iter().enumerate() {
            let rx = receivers[b].take().expect("queue");
            let tx = if b + 1 < j { senders[b + 1].take() } else { None };
            handles.push(scope.spawn(move || {
                let mut log = TrainLog::default();
                let mut failure = None;
                for msg in rx.iter() {
                    let (mb, version) = (msg.minibatch, msg.producer_version);
                    match worker.process(msg) {
                        Ok(p) => {
                            log.push(record(&worker, version, mb, batch_size, p.loss, p.accuracy, start));
                            if let Some(tx) = &tx {
                                if tx.send(p.out).is_err() {
                                    break;
                                }
                            }
                        }
                        Err(e) => {
                            failure = Some(format!("block {b}, minibatch {mb}: {e}"));
                            break;
                        }
                    }
                }
                (worker, log, failure)
            }));
        }
        let mut feed_error = None;
        for step in 1..=steps {
            let msg = match batches.next_batch() {
                Ok((x, y)) => StageMessage {
                    minibatch: step,
                    activations: x,
                    labels: y,
                    producer_version: None,
                },
                Err(e) => {
                    feed_error = Some(format!("data: {e}"));
                    break;
                }
            };
            if feeder.send(msg).is_err() {
                break;
            }
        }
        drop(feeder);
        let mut out: Vec<(BlockWorker, TrainLog, Option<String>)> = handles
            .into_iter()
            .enumerate()
            .map(|(b, h)| {
                h.join().unwrap_or_else(|_| {
                    let w = BlockWorker::new(b, spec, &params, cfg.optimizer);
                    (w, TrainLog::default(), Some(format!("block {b} worker panicked")))
                })
            })
            .collect();
        if let Some(e) = feed_error {
            out[0].2.get_or_insert(e);
        }
        out
    });

    let mut log = TrainLog::default();
    let mut failure = None;
    let mut finished = Vec::with_capacity(j);
    for (w, l, f) in joined {
        log.records.extend(l.records);
        if failure.is_none() {
            failure = f;
        }
        finished.push(w);
    }
    finish(&finished, &params, log, failure)
}
