//! MLPs split into trainable blocks, each with its own linear head.
//!
//! A network is `depth` dense ReLU layers followed by a linear classifier.
//! Training schemes differ only in how layers are grouped into blocks: every
//! trainable block attaches a head to its output and backpropagates that
//! head's loss through its own layers, stopping at the block input.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax_xent, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Scheme {
    Backprop,
    Greedy,
    Overlapping,
    /// `J` contiguous blocks.
    Chunked(usize),
    /// Only the final `K` layers train.
    LastK(usize),
}

impl Scheme {
    pub fn is_local(self) -> bool {
        !matches!(self, Scheme::Backprop)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Backprop => write!(f, "backprop"),
            Scheme::Greedy => write!(f, "greedy"),
            Scheme::Overlapping => write!(f, "overlapping"),
            Scheme::Chunked(j) => write!(f, "chunked{j}"),
            Scheme::LastK(k) => write!(f, "last{k}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let num = |rest: &str| {
            rest.trim_start_matches(['_', '-', '(', ':'])
                .trim_end_matches(')')
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad scheme `{s}`")))
        };
        match s.as_str() {
            "backprop" | "bp" => Ok(Scheme::Backprop),
            "greedy" => Ok(Scheme::Greedy),
            "overlapping" | "overlap" => Ok(Scheme::Overlapping),
            _ if s.starts_with("chunked") => Ok(Scheme::Chunked(num(&s["chunked".len()..])?)),
            _ if s.starts_with("last_k") => Ok(Scheme::LastK(num(&s["last_k".len()..])?)),
            _ if s.starts_with("last") => Ok(Scheme::LastK(num(&s["last".len()..])?)),
            _ => Err(Error::config(format!("unknown scheme `{s}`"))),
        }
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A contiguous range of layers `[lo, hi)` trained as one unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub lo: usize,
    pub hi: usize,
    /// Frozen blocks only run forward.
    pub trainable: bool,
    /// Non-final trainable blocks carry an auxiliary head; the final block's
    /// head is the network classifier.
    pub owns_aux: bool,
    /// The first layer is the previous block's last layer (overlapping scheme).
    pub shares_first: bool,
}

impl BlockSpec {
    /// Layer index whose output feeds this block's head.
    pub fn head_id(&self) -> usize {
        self.hi - 1
    }

    /// Layers whose canonical parameters this block updates.
    pub fn owned_layers(&self) -> std::ops::Range<usize> {
        if self.shares_first {
            self.lo + 1..self.hi
        } else {
            self.lo..self.hi
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub classes: usize,
    pub scheme: Scheme,
    pub blocks: Vec<BlockSpec>,
}

fn block(lo: usize, hi: usize, last: bool) -> BlockSpec {
    BlockSpec {
        lo,
        hi,
        trainable: true,
        owns_aux: !last,
        shares_first: false,
    }
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        depth: usize,
        classes: usize,
        scheme: Scheme,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || depth == 0 || classes == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        let l = depth;
        let blocks = match scheme {
            Scheme::Backprop => vec![block(0, l, true)],
            Scheme::Greedy => (0..l).map(|i| block(i, i + 1, i + 1 == l)).collect(),
            Scheme::Overlapping => (0..l)
                .map(|i| BlockSpec {
                    lo: i.saturating_sub(1),
                    hi: i + 1,
                    trainable: true,
                    owns_aux: i + 1 < l,
                    shares_first: i > 0,
                })
                .collect(),
            Scheme::Chunked(j) => {
                if j == 0 || j > l {
                    return Err(Error::config(format!("chunked({j}) needs 1 <= J <= {l}")));
                }
                let (base, extra) = (l / j, l % j);
                let mut lo = 0;
                (0..j)
                    .map(|b| {
                        let size = base + usize::from(b < extra);
                        let spec = block(lo, lo + size, b + 1 == j);
                        lo += size;
                        spec
                    })
                    .collect()
            }
            Scheme::LastK(k) => {
                if k == 0 || k > l {
                    return Err(Error::config(format!("last_k({k}) needs 1 <= K <= {l}")));
                }
                let mut blocks = Vec::new();
                if k < l {
                    blocks.push(BlockSpec {
                        lo: 0,
                        hi: l - k,
                        trainable: false,
                        owns_aux: false,
                        shares_first: false,
                    });
                }
                blocks.push(block(l - k, l, true));
                blocks
            }
        };
        Ok(Self {
            input_dim,
            hidden,
            depth,
            classes,
            scheme,
            blocks,
        })
    }

    pub fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    /// Output-layer indices that carry a head under this scheme.
    pub fn head_ids(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .map(BlockSpec::head_id)
            .collect()
    }

    pub fn trainable_blocks(&self) -> impl Iterator<Item = (usize, &BlockSpec)> {
        self.blocks.iter().enumerate().filter(|(_, b)| b.trainable)
    }

    /// Parameter count of the layers plus the final classifier.
    pub fn core_parameters(&self) -> usize {
        let first = self.input_dim * self.hidden + self.hidden;
        let rest = (self.depth - 1) * (self.hidden * self.hidden + self.hidden);
        first + rest + self.hidden * self.classes + self.classes
    }
}

/// Identifies one parameter tensor. Heads are keyed by the layer they read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    LayerW(usize),
    LayerB(usize),
    HeadW(usize),
    HeadB(usize),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::LayerW(i) => write!(f, "layer{i}.w"),
            ParamId::LayerB(i) => write!(f, "layer{i}.b"),
            ParamId::HeadW(i) => write!(f, "head{i}.w"),
            ParamId::HeadB(i) => write!(f, "head{i}.b"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MissingKey(s.to_string());
        let (stem, kind) = s.rsplit_once('.').ok_or_else(bad)?;
        let (prefix, idx) = if let Some(rest) = stem.strip_prefix("layer") {
            ("layer", rest)
        } else if let Some(rest) = stem.strip_prefix("head") {
            ("head", rest)
        } else {
            return Err(bad());
        };
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match (prefix, kind) {
            ("layer", "w") => Ok(ParamId::LayerW(idx)),
            ("layer", "b") => Ok(ParamId::LayerB(idx)),
            ("head", "w") => Ok(ParamId::HeadW(idx)),
            ("head", "b") => Ok(ParamId::HeadB(idx)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl AuxHead {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }
}

/// All parameters of a network: layers plus one head per block output.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<DenseLayer>,
    pub heads: BTreeMap<usize, AuxHead>,
}

const HEAD_STREAM: u64 = 1 << 32;

impl Params {
    /// Gaussian weights with std `1/sqrt(fan_in)` and zero biases. Layer `i`
    /// and head `k` draw from their own forks of `rng`, so the same seed gives
    /// the same values under every scheme.
    pub fn init(spec: &NetworkSpec, rng: &Rng) -> Self {
        let layers = (0..spec.depth)
            .map(|i| {
                let mut r = rng.fork(i as u64);
                DenseLayer {
                    w: Tensor::gaussian_init(&mut r, spec.layer_in(i), spec.hidden),
                    b: Tensor::zeros(&[spec.hidden]),
                    activation: Activation::Relu,
                }
            })
            .collect();
        let heads = spec
            .head_ids()
            .into_iter()
            .map(|k| {
                let mut r = rng.fork(HEAD_STREAM + k as u64);
                let head = AuxHead {
                    w: Tensor::gaussian_init(&mut r, spec.hidden, spec.classes),
                    b: Tensor::zeros(&[spec.classes]),
                };
                (k, head)
            })
            .collect();
        Self { layers, heads }
    }

    pub fn head(&self, id: usize) -> Result<&AuxHead> {
        self.heads
            .get(&id)
            .ok_or_else(|| Error::MissingKey(ParamId::HeadW(id).to_string()))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        let missing = || Error::MissingKey(id.to_string());
        match id {
            ParamId::LayerW(i) => self.layers.get(i).map(|l| &l.w).ok_or_else(missing),
            ParamId::LayerB(i) => self.layers.get(i).map(|l| &l.b).ok_or_else(missing),
            ParamId::HeadW(i) => self.heads.get(&i).map(|h| &h.w).ok_or_else(missing),
            ParamId::HeadB(i) => self.heads.get(&i).map(|h| &h.b).ok_or_else(missing),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let missing = || Error::MissingKey(id.to_string());
        match id {
            ParamId::LayerW(i) => self.layers.get_mut(i).map(|l| &mut l.w).ok_or_else(missing),
            ParamId::LayerB(i) => self.layers.get_mut(i).map(|l| &mut l.b).ok_or_else(missing),
            ParamId::HeadW(i) => self.heads.get_mut(&i).map(|h| &mut h.w).ok_or_else(missing),
            ParamId::HeadB(i) => self.heads.get_mut(&i).map(|h| &mut h.b).ok_or_else(missing),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..self.layers.len() {
            ids.push(ParamId::LayerW(i));
            ids.push(ParamId::LayerB(i));
        }
        for &k in self.heads.keys() {
            ids.push(ParamId::HeadW(k));
            ids.push(ParamId::HeadB(k));
        }
        ids
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.ids()
            .into_iter()
            .map(|id| (id.to_string(), self.get(id).cloned().expect("listed id")))
            .collect()
    }

    pub fn from_named(spec: &NetworkSpec, named: &[(String, Tensor)]) -> Result<Self> {
        let mut params = Params::init(spec, &Rng::new(0));
        params.heads.clear();
        let mut seen = 0;
        for (name, t) in named {
            let id: ParamId = name.parse()?;
            if let ParamId::HeadW(k) | ParamId::HeadB(k) = id {
                params.heads.entry(k).or_insert_with(|| AuxHead {
                    w: Tensor::zeros(&[spec.hidden, spec.classes]),
                    b: Tensor::zeros(&[spec.classes]),
                });
            }
            let slot = params.get_mut(id)?;
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "Params::from_named",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
            if matches!(id, ParamId::LayerW(_) | ParamId::LayerB(_)) {
                seen += 1;
            }
        }
        if seen != 2 * spec.depth {
            return Err(Error::MissingKey("layer parameters".into()));
        }
        Ok(params)
    }

    /// Parameter ids a block is responsible for updating.
    pub fn block_param_ids(&self, block: &BlockSpec) -> Vec<ParamId> {
        if !block.trainable {
            return Vec::new();
        }
        let mut ids: Vec<ParamId> = block
            .owned_layers()
            .flat_map(|i| [ParamId::LayerW(i), ParamId::LayerB(i)])
            .collect();
        ids.push(ParamId::HeadW(block.head_id()));
        ids.push(ParamId::HeadB(block.head_id()));
        ids
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet(BTreeMap<ParamId, Tensor>);

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.0.insert(id, g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Keeps only the given ids.
    pub fn restrict(&self, ids: &[ParamId]) -> GradientSet {
        GradientSet(
            self.0
                .iter()
                .filter(|(k, _)| ids.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        )
    }

    pub fn extend(&mut self, other: GradientSet) {
        self.0.extend(other.0);
    }

    /// Flattened concatenation of a layer's weight and bias gradients.
    pub fn layer_vector(&self, layer: usize) -> Option<Vec<Scalar>> {
        let w = self.get(ParamId::LayerW(layer))?;
        let b = self.get(ParamId::LayerB(layer))?;
        Some(w.data().iter().chain(b.data()).copied().collect())
    }
}

/// Stored values of one layer's forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: Tensor,
    /// Pre-activation `input · W + b`.
    pub pre: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub layers: Vec<LayerCache>,
    pub output: Tensor,
}

fn layer_forward(layer: &DenseLayer, x: &Tensor) -> Result<(LayerCache, Tensor)> {
    let pre = x.matmul(&layer.w)?.add_bias(&layer.b)?;
    let out = match layer.activation {
        Activation::Relu => pre.relu(),
        Activation::None => pre.clone(),
    };
    Ok((
        LayerCache {
            input: x.clone(),
            pre,
        },
        out,
    ))
}

fn check_input(params: &Params, first: usize, x: &Tensor) -> Result<()> {
    let w = &params
        .layers
        .get(first)
        .ok_or_else(|| Error::MissingKey(ParamId::LayerW(first).to_string()))?
        .w;
    if x.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs layers `[lo, hi)` on `x`.
pub fn forward_layers(params: &Params, lo: usize, hi: usize, x: &Tensor) -> Result<BlockCache> {
    check_input(params, lo, x)?;
    let mut layers = Vec::with_capacity(hi - lo);
    let mut act = x.clone();
    for layer in &params.layers[lo..hi] {
        let (cache, out) = layer_forward(layer, &act)?;
        layers.push(cache);
        act = out;
    }
    Ok(BlockCache {
        layers,
        output: act,
    })
}

/// Forward pass of one block. The output does not depend on the scheme.
pub fn block_forward(block: &BlockSpec, params: &Params, x: &Tensor) -> Result<BlockCache> {
    forward_layers(params, block.lo, block.hi, x)
}

/// Result of one local loss evaluation and its backward pass.
#[derive(Clone, Debug)]
pub struct LocalStep {
    pub loss: Scalar,
    pub accuracy: Scalar,
    pub grads: GradientSet,
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<Scalar> {
    let pred = logits.argmax_rows()?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as Scalar / labels.len() as Scalar)
}

/// Head loss on `output` backpropagated through `layers` (which must be the
/// caches of layers `first..first + layers.len()`). No gradient is produced
/// for the input of the first layer.
pub fn local_backward(
    params: &Params,
    first: usize,
    layers: &[LayerCache],
    output: &Tensor,
    head_id: usize,
    labels: &[usize],
) -> Result<LocalStep> {
    let head = params.head(head_id)?;
    let logits = head.logits(output)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    let mut grads = GradientSet::new();
    grads.insert(ParamId::HeadW(head_id), output.matmul_tn(&dlogits)?);
    grads.insert(ParamId::HeadB(head_id), dlogits.sum_rows()?);
    let mut d_act = dlogits.matmul_nt(&head.w)?;
    for (offset, cache) in layers.iter().enumerate().rev() {
        let idx = first + offset;
        let layer = &params.layers[idx];
        let dpre = match layer.activation {
            Activation::Relu => cache.pre.relu_backward(&d_act)?,
            Activation::None => d_act,
        };
        grads.insert(ParamId::LayerW(idx), cache.input.matmul_tn(&dpre)?);
        grads.insert(ParamId::LayerB(idx), dpre.sum_rows()?);
        if offset == 0 {
            break;
        }
        d_act = dpre.matmul_nt(&layer.w)?;
    }
    Ok(LocalStep {
        loss,
        accuracy: accuracy(&logits, labels)?,
        grads,
    })
}

/// Local loss and gradients of a trainable block: its layers plus its head,
/// with the incoming activations treated as constants.
pub fn block_local_backward(
    block: &BlockSpec,
    params: &Params,
    cache: &BlockCache,
    labels: &[usize],
) -> Result<LocalStep> {
    if !block.trainable {
        return Err(Error::config("frozen block has no local loss"));
    }
    if cache.layers.len() != block.num_layers() {
        return Err(Error::ShapeMismatch {
            op: "block_local_backward",
            left: vec![cache.layers.len()],
            right: vec![block.num_layers()],
        });
    }
    local_backward(
        params,
        block.lo,
        &cache.layers,
        &cache.output,
        block.head_id(),
        labels,
    )
}

/// Reference chain rule through every layer and the final classifier.
pub fn full_backprop(params: &Params, x: &Tensor, labels: &[usize]) -> Result<LocalStep> {
    let depth = params.layers.len();
    check_input(params, 0, x)?;
    let mut inputs = Vec::with_capacity(depth);
    let mut pres = Vec::with_capacity(depth);
    let mut act = x.clone();
    for layer in &params.layers {
        let pre = act.matmul(&layer.w)?.add_bias(&layer.b)?;
        let next = match layer.activation {
            Activation::Relu => pre.relu(),
            Activation::None => pre.clone(),
        };
        inputs.push(act);
        pres.push(pre);
        act = next;
    }
    let head_id = depth - 1;
    let head = params.head(head_id)?;
    let logits = act.matmul(&head.w)?.add_bias(&head.b)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    let mut grads = GradientSet::new();
    grads.insert(ParamId::HeadW(head_id), act.matmul_tn(&dlogits)?);
    grads.insert(ParamId::HeadB(head_id), dlogits.sum_rows()?);
    let mut upstream = dlogits.matmul_nt(&head.w)?;
    for idx in (0..depth).rev() {
        let layer = &params.layers[idx];
        let dpre = match layer.activation {
            Activation::Relu => pres[idx].relu_backward(&upstream)?,
            Activation::None => upstream,
        };
        grads.insert(ParamId::LayerW(idx), inputs[idx].matmul_tn(&dpre)?);
        grads.insert(ParamId::LayerB(idx), dpre.sum_rows()?);
        if idx == 0 {
            break;
        }
        upstream = dpre.matmul_nt(&layer.w)?;
    }
    Ok(LocalStep {
        loss,
        accuracy: accuracy(&logits, labels)?,
        grads,
    })
}

/// Union of two neighbouring blocks' gradients where the shared layer's
/// weight and bias gradients are replaced by the mean of both contributions.
pub fn merge_overlap_grads(
    first: &GradientSet,
    second: &GradientSet,
    shared_layer: usize,
) -> Result<GradientSet> {
    let mut merged = first.clone();
    for (id, g) in second.iter() {
        merged.insert(id, g.clone());
    }
    for id in [ParamId::LayerW(shared_layer), ParamId::LayerB(shared_layer)] {
        let a = first
            .get(id)
            .ok_or_else(|| Error::MissingKey(id.to_string()))?;
        let b = second
            .get(id)
            .ok_or_else(|| Error::MissingKey(id.to_string()))?;
        merged.insert(id, a.add(b)?.scale(0.5)?);
    }
    Ok(merged)
}

/// Final-classifier logits of the whole network.
pub fn predict(params: &Params, x: &Tensor) -> Result<Tensor> {
    let depth = params.layers.len();
    let cache = forward_layers(params, 0, depth, x)?;
    params.head(depth - 1)?.logits(&cache.output)
}

/// Mean loss and accuracy of the final classifier over `inputs`, evaluated in
/// chunks of at most `chunk` rows.
pub fn evaluate(
    params: &Params,
    inputs: &Tensor,
    labels: &[usize],
    chunk: usize,
) -> Result<(Scalar, Scalar)> {
    let n = labels.len();
    let mut loss = 0.0;
    let mut correct = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = inputs.select_rows(&idx)?;
        let logits = predict(params, &x)?;
        let (l, _) = softmax_xent(&logits, &labels[start..end])?;
        let m = (end - start) as Scalar;
        loss += l * m;
        correct += accuracy(&logits, &labels[start..end])? * m;
        start = end;
    }
    Ok((loss / n as Scalar, correct / n as Scalar))
}
