#![cfg(not(feature = "f32"))]

mod common;

use common::{assert_grads_bit_equal, block_loss, clusters, fd_relative_error, max_abs_diff};
use localpar::executor::init_params;
use localpar::model::{
    block_forward, block_local_backward, forward_layers, full_backprop, local_backward, predict, NetworkSpec,
    ParamId, Params,
};
use localpar::tensor::softmax_xent;
use localpar::{Scheme, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn batch(seed: u64, n: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let ds = clusters(seed, n, dim, classes, 1.0);
    (ds.inputs, ds.labels)
}

/// Checks every trainable block's gradients against finite differences of
/// its own local loss, with block inputs produced by the preceding blocks.
fn check_local_grads(scheme: Scheme, depth: usize, seed: u64) {
    let spec = NetworkSpec::new(5, 6, depth, 3, scheme).unwrap();
    let params = init_params(&spec, seed);
    let (x, y) = batch(seed + 100, 4, 5, 3);
    for block in &spec.blocks {
        if !block.trainable {
            continue;
        }
        let input = if block.lo == 0 {
            x.clone()
        } else {
            forward_layers(&params, 0, block.lo, &x).unwrap().output
        };
        let cache = block_forward(block, &params, &input).unwrap();
        let step = block_local_backward(block, &params, &cache, &y).unwrap();
        let loss = block_loss(block, &input, &y);
        for (id, g) in step.grads.iter() {
            let err = fd_relative_error(&params, id, g, &loss);
            assert!(err <= TOL, "{scheme} block {}..{} {id}: {err:e}", block.lo, block.hi);
        }
    }
}

#[test]
fn chunked_three_blocks_pass_finite_differences() {
    check_local_grads(Scheme::Chunked(3), 4, 1);
}

#[test]
fn greedy_overlapping_last_k_pass_finite_differences() {
    check_local_grads(Scheme::Greedy, 3, 2);
    check_local_grads(Scheme::Overlapping, 3, 3);
    check_local_grads(Scheme::LastK(2), 4, 4);
}

#[test]
fn full_backprop_passes_finite_differences() {
    let spec = NetworkSpec::new(5, 6, 3, 3, Scheme::Backprop).unwrap();
    let params = init_params(&spec, 9);
    let (x, y) = batch(11, 4, 5, 3);
    let step = full_backprop(&params, &x, &y).unwrap();
    let loss = |p: &Params| softmax_xent(&predict(p, &x).unwrap(), &y).unwrap().0;
    assert_eq!(step.grads.len(), 2 * 3 + 2);
    for (id, g) in step.grads.iter() {
        let err = fd_relative_error(&params, id, g, &loss);
        assert!(err <= TOL, "{id}: {err:e}");
    }
}

#[test]
fn final_greedy_block_equals_backprop_restriction() {
    let depth = 5;
    let spec = NetworkSpec::new(7, 9, depth, 4, Scheme::Greedy).unwrap();
    let params = init_params(&spec, 21);
    let (x, y) = batch(22, 16, 7, 4);
    let all = forward_layers(&params, 0, depth, &x).unwrap();
    let last = spec.blocks.last().unwrap();
    let local = local_backward(&params, last.lo, &all.layers[last.lo..], &all.output, last.head_id(), &y).unwrap();
    let global = full_backprop(&params, &x, &y).unwrap();
    assert_eq!(local.loss, global.loss);
    for (id, g) in local.grads.iter() {
        assert_eq!(max_abs_diff(g, global.grads.get(id).unwrap()), 0.0, "{id}");
    }
}

#[test]
fn chunked_one_matches_backprop_and_chunked_l_matches_greedy() {
    let depth = 4;
    let (x, y) = batch(5, 8, 6, 3);
    let bp = NetworkSpec::new(6, 8, depth, 3, Scheme::Backprop).unwrap();
    let c1 = NetworkSpec::new(6, 8, depth, 3, Scheme::Chunked(1)).unwrap();
    let params = init_params(&bp, 3);
    assert!(common::params_bit_equal(&params, &init_params(&c1, 3)));
    let cache = block_forward(&c1.blocks[0], &params, &x).unwrap();
    let local = block_local_backward(&c1.blocks[0], &params, &cache, &y).unwrap();
    let global = full_backprop(&params, &x, &y).unwrap();
    assert_eq!(local.loss, global.loss);
    assert_grads_bit_equal(&local.grads, &global.grads);

    let greedy = NetworkSpec::new(6, 8, depth, 3, Scheme::Greedy).unwrap();
    let cl = NetworkSpec::new(6, 8, depth, 3, Scheme::Chunked(depth)).unwrap();
    assert_eq!(greedy.blocks, cl.blocks);
    let params = init_params(&greedy, 4);
    assert!(common::params_bit_equal(&params, &init_params(&cl, 4)));
}

#[test]
fn upstream_parameters_do_not_reach_a_blocks_gradient() {
    let spec = NetworkSpec::new(5, 6, 4, 3, Scheme::Chunked(2)).unwrap();
    let params = init_params(&spec, 8);
    let (x, y) = batch(9, 6, 5, 3);
    let first = &spec.blocks[0];
    let second = &spec.blocks[1];
    let input = block_forward(first, &params, &x).unwrap().output;
    let base = block_local_backward(second, &params, &block_forward(second, &params, &input).unwrap(), &y).unwrap();

    let mut perturbed = params.clone();
    for id in perturbed.block_param_ids(first) {
        for v in perturbed.get_mut(id).unwrap().data_mut() {
            *v += 0.37;
        }
    }
    let again = block_local_backward(second, &perturbed, &block_forward(second, &perturbed, &input).unwrap(), &y).unwrap();
    assert_grads_bit_equal(&base.grads, &again.grads);
    assert!(base.grads.keys().all(|id| match id {
        ParamId::LayerW(l) | ParamId::LayerB(l) => l >= second.lo,
        ParamId::HeadW(h) | ParamId::HeadB(h) => h == second.head_id(),
    }));
}

#[test]
fn predictions_do_not_depend_on_scheme() {
    let (x, _) = batch(1, 10, 6, 4);
    let schemes = [
        Scheme::Backprop,
        Scheme::Greedy,
        Scheme::Overlapping,
        Scheme::Chunked(2),
        Scheme::LastK(1),
    ];
    let reference = predict(&init_params(&NetworkSpec::new(6, 8, 4, 4, Scheme::Backprop).unwrap(), 13), &x).unwrap();
    for s in schemes {
        let p = init_params(&NetworkSpec::new(6, 8, 4, 4, s).unwrap(), 13);
        assert_eq!(predict(&p, &x).unwrap().data(), reference.data(), "{s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn local_gradients_match_fd_for_random_shapes(
        seed in 0u64..1000,
        depth in 1usize..4,
        hidden in 2usize..6,
        batch_size in 1usize..5,
    ) {
        let spec = NetworkSpec::new(3, hidden, depth, 3, Scheme::Greedy).unwrap();
        let params = init_params(&spec, seed);
        let (x, y) = batch(seed, batch_size, 3, 3);
        let mut input = x;
        for block in &spec.blocks {
            let cache = block_forward(block, &params, &input).unwrap();
            // Central differences are meaningless across a ReLU kink.
            let near_kink = cache.layers.iter().any(|l| l.pre.data().iter().any(|v| v.abs() < 1e-4));
            prop_assume!(!near_kink);
            let step = block_local_backward(block, &params, &cache, &y).unwrap();
            {
                let loss = block_loss(block, &input, &y);
                for (id, g) in step.grads.iter() {
                    let err = fd_relative_error(&params, id, g, &loss);
                    prop_assert!(err <= TOL, "{} {:e}", id, err);
                }
            }
            input = cache.output;
        }
    }
}
