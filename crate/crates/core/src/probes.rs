//! Diagnostics: how greedy local gradients relate to the true gradient, how
//! block size affects generalization, how well each scheme memorizes random
//! labels, and a dump of first-layer filters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::executor::{init_params, train_sequential, TrainConfig};
use crate::model::{evaluate, forward_layers, full_backprop, local_backward, NetworkSpec, Params, Scheme};
use crate::tensor::{Scalar, Tensor};

/// Cosine similarity that may be undefined when either vector is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cosine {
    Defined(f64),
    Undefined(UndefinedTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndefinedTag {
    Undefined,
}

impl Cosine {
    pub const UNDEFINED: Cosine = Cosine::Undefined(UndefinedTag::Undefined);

    pub fn value(self) -> Option<f64> {
        match self {
            Cosine::Defined(v) => Some(v),
            Cosine::Undefined(_) => None,
        }
    }
}

impl std::fmt::Display for Cosine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cosine::Defined(v) => write!(f, "{v}"),
            Cosine::Undefined(_) => f.write_str("undefined"),
        }
    }
}

pub fn cosine(a: &[Scalar], b: &[Scalar]) -> Cosine {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Cosine::UNDEFINED;
    }
    // A single square root keeps identical vectors at exactly 1.0.
    Cosine::Defined((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-layer cosine between the full-backprop gradient and the greedy local
/// gradient (layer `i` trained through head `i` only) of that layer's weight
/// and bias, both at `params`. `params` must hold a head after every layer.
pub fn gradient_cosine_profile(params: &Params, x: &Tensor, labels: &[usize]) -> Result<Vec<Cosine>> {
    let depth = params.layers.len();
    let reference = full_backprop(params, x, labels)?;
    let cache = forward_layers(params, 0, depth, x)?;
    let mut out = Vec::with_capacity(depth);
    for i in 0..depth {
        let output = if i + 1 < depth {
            &cache.layers[i + 1].input
        } else {
            &cache.output
        };
        let local = local_backward(params, i, &cache.layers[i..=i], output, i, labels)?;
        let (Some(g), Some(r)) = (local.grads.layer_vector(i), reference.grads.layer_vector(i)) else {
            return Err(Error::MissingKey(format!("layer{i} gradient")));
        };
        out.push(cosine(&g, &r));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineStudy {
    /// One profile per measured batch.
    pub profiles: Vec<Vec<Cosine>>,
    /// Mean over defined values per layer; `None` when no value was defined.
    pub mean: Vec<Option<f64>>,
}

impl CosineStudy {
    pub fn from_profiles(profiles: Vec<Vec<Cosine>>) -> Self {
        let depth = profiles.first().map_or(0, Vec::len);
        let mean = (0..depth)
            .map(|l| {
                let vals: Vec<f64> = profiles.iter().filter_map(|p| p[l].value()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Self { profiles, mean }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,layer,cosine\n");
        for (b, p) in self.profiles.iter().enumerate() {
            for (l, c) in p.iter().enumerate() {
                let _ = writeln!(out, "{b},{l},{c}");
            }
        }
        out
    }
}

/// Trains a greedy network for `cfg.steps` steps, then measures the cosine
/// profile on `batches` fresh minibatches at the trained parameters.
pub fn cosine_study(
    hidden: usize,
    depth: usize,
    data: &Dataset,
    cfg: &TrainConfig,
    batches: usize,
) -> Result<CosineStudy> {
    let spec = NetworkSpec::new(data.dim(), hidden, depth, data.num_classes, Scheme::Greedy)?;
    let params = init_params(&spec, cfg.seed);
    let eval = data.prefix(data.len().min(512))?;
    let outcome = train_sequential(&spec, params, data, &eval, cfg)?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::Worker { block: 0, reason });
    }
    let mut it = BatchIterator::new(data, cfg.batch_size, cfg.seed ^ 0xC05_1DE)?;
    let mut profiles = Vec::with_capacity(batches);
    for _ in 0..batches {
        let (x, y) = it.next_batch()?;
        profiles.push(gradient_cosine_profile(&outcome.params, &x, &y)?);
    }
    Ok(CosineStudy::from_profiles(profiles))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub j: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

impl AblationRow {
    /// Train accuracy minus test accuracy.
    pub fn generalization_gap(&self) -> f64 {
        self.train_acc - self.test_acc
    }
}

/// Trains `chunked(J)` for every `J` with the same seed and budget and reports
/// final-classifier metrics on both splits.
pub fn chunk_ablation(
    hidden: usize,
    depth: usize,
    js: &[usize],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(js.len());
    for &j in js {
        let spec = NetworkSpec::new(train.dim(), hidden, depth, train.num_classes, Scheme::Chunked(j))?;
        let params = init_params(&spec, cfg.seed);
        let outcome = train_sequential(&spec, params, train, test, cfg)?;
        let (train_loss, train_acc) = evaluate(&outcome.params, &train.inputs, &train.labels, cfg.eval_chunk)?;
        let (test_loss, test_acc) = evaluate(&outcome.params, &test.inputs, &test.labels, cfg.eval_chunk)?;
        rows.push(AblationRow {
            j,
            train_loss: train_loss as f64,
            train_acc: train_acc as f64,
            test_loss: test_loss as f64,
            test_acc: test_acc as f64,
            diverged: outcome.aborted,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityCurve {
    pub scheme: Scheme,
    /// `(step, train accuracy)`, starting with the untrained network at step 0.
    pub accuracy: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

impl CapacityCurve {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().map_or(0.0, |p| p.1)
    }
}

/// Trains each scheme on `data` (labels already randomized) and records
/// accuracy on the training set itself.
pub fn random_label_capacity(
    hidden: usize,
    depth: usize,
    data: &Dataset,
    schemes: &[Scheme],
    cfg: &TrainConfig,
) -> Result<Vec<CapacityCurve>> {
    let mut curves = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let spec = NetworkSpec::new(data.dim(), hidden, depth, data.num_classes, scheme)?;
        let params = init_params(&spec, cfg.seed);
        let (_, acc0) = evaluate(&params, &data.inputs, &data.labels, cfg.eval_chunk)?;
        let outcome = train_sequential(&spec, params, data, data, cfg)?;
        let mut accuracy = vec![(0, acc0 as f64)];
        accuracy.extend(outcome.log.global_acc_history().into_iter().map(|(s, _, a)| (s, a)));
        curves.push(CapacityCurve {
            scheme,
            accuracy,
            diverged: outcome.aborted,
        });
    }
    Ok(curves)
}

/// Min-max normalizes a filter to `[0, 1]`; a constant filter maps to 0.5.
pub fn normalize_filter(row: &[f64]) -> Vec<f64> {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        row.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.5; row.len()]
    }
}

/// First-layer filters (one per hidden unit, each of input length),
/// normalized per filter.
pub fn first_layer_filters(params: &Params) -> Result<Vec<Vec<f64>>> {
    let w = &params
        .layers
        .first()
        .ok_or_else(|| Error::config("network has no layers"))?
        .w;
    let (inputs, units) = (w.rows(), w.cols());
    let d = w.data();
    Ok((0..units)
        .map(|u| {
            let filter: Vec<f64> = (0..inputs).map(|i| d[i * units + u] as f64).collect();
            normalize_filter(&filter)
        })
        .collect())
}

/// Writes the normalized filters as a headerless CSV grid, one filter per
/// line. Values use the shortest representation that parses back exactly.
pub fn dump_first_layer(params: &Params, path: &Path) -> Result<()> {
    let rows = first_layer_filters(params)?;
    fs::write(path, filters_csv(&rows)).map_err(|e| Error::io(path, e))
}

pub fn filters_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_filters(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("bad value `{v}`: {e}"),
                    })
                })
                .collect()
        })
        .collect()
}
