#![allow(dead_code)]

use localpar::data::{synthetic_clusters, Dataset};
use localpar::model::{block_forward, BlockSpec, GradientSet, ParamId, Params};
use localpar::tensor::softmax_xent;
use localpar::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub fn clusters(seed: u64, n: usize, dim: usize, classes: usize, separation: f64) -> Dataset {
    synthetic_clusters(&mut Rng::new(seed), n, dim, classes, separation).unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` over a whole tensor, with the
/// numeric gradient from central differences of `loss` in every entry of
/// `id`.
pub fn fd_relative_error(
    params: &Params,
    id: ParamId,
    analytic: &Tensor,
    loss: &dyn Fn(&Params) -> f64,
) -> f64 {
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..analytic.len() {
        let mut plus = params.clone();
        plus.get_mut(id).unwrap().data_mut()[k] += FD_STEP;
        let mut minus = params.clone();
        minus.get_mut(id).unwrap().data_mut()[k] -= FD_STEP;
        numeric.push((loss(&plus) - loss(&minus)) / (2.0 * FD_STEP));
    }
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Local loss of `block` with its input activations held fixed.
pub fn block_loss<'a>(block: &BlockSpec, input: &'a Tensor, labels: &'a [usize]) -> impl Fn(&Params) -> f64 + 'a {
    let block = block.clone();
    move |p: &Params| {
        let cache = block_forward(&block, p, input).unwrap();
        let logits = p.head(block.head_id()).unwrap().logits(&cache.output).unwrap();
        softmax_xent(&logits, labels).unwrap().0
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn assert_grads_bit_equal(a: &GradientSet, b: &GradientSet) {
    assert_eq!(a.len(), b.len());
    for (id, g) in a.iter() {
        let other = b.get(id).unwrap_or_else(|| panic!("missing {id}"));
        assert_eq!(g.data(), other.data(), "{id}");
    }
}

pub fn params_bit_equal(a: &Params, b: &Params) -> bool {
    a.named()
        .iter()
        .zip(b.named().iter())
        .all(|((na, ta), (nb, tb))| na == nb && ta.data() == tb.data())
}
