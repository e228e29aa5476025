use localpar::flops::{method_cost, mlp_constants, registry, CostModelConstants, ModelId};
use localpar::Scheme;
use proptest::prelude::*;

fn constants() -> impl Strategy<Value = CostModelConstants> {
    (
        1usize..64,
        1.0f64..1e9,
        1.0f64..1e8,
        0.5f64..3.0,
        prop::option::of(1u64..100_000_000),
    )
        .prop_map(|(layers, forward_cost, aux_cost, backward_multiplier, parameters)| CostModelConstants {
            layers,
            forward_cost,
            aux_cost,
            backward_multiplier,
            parameters,
        })
}

/// Written out term by term for the 4096-wide MLP.
#[test]
fn mlp4096_backprop_single_example() {
    let c = registry(ModelId::Mlp4096);
    let params: f64 = (3072.0 * 4096.0 + 4096.0) + 7.0 * (4096.0 * 4096.0 + 4096.0) + (4096.0 * 10.0 + 10.0);
    let expected = 2.5 * (8.0 * 32514176.0 + 77884.0) + 10.0 * params;
    let mc = method_cost(&c, Scheme::Backprop, 1, 1).unwrap();
    assert_eq!(mc.cost, expected);
    assert_eq!(mc.time, expected);
}

#[test]
fn mlp1024_against_hand_evaluation() {
    let (n, l, i, cl) = (1024.0f64, 8.0f64, 3072.0f64, 10.0f64);
    let first = (2.0 * i * n - i) + n + 2.0 * n;
    let hidden = (2.0 * n * n - n) + n + 2.0 * n;
    let c = mlp_constants(1024, 8, 3072, 10);
    assert_eq!(c.forward_cost, (first + 7.0 * hidden) / l);
    assert_eq!(c.aux_cost, (2.0 * n * cl - n) + cl + 5.0 * cl);
    assert_eq!(c.layers, 8);
    assert_eq!(c.backward_multiplier, 1.5);
}

#[test]
fn registry_matches_published_strings() {
    let cases = [
        (ModelId::Resnet50, 17, "5479411.176470588", "3382457.3529411764", "2.0280375672996596", Some(38711720)),
        (ModelId::Resnet18, 9, "1640544.352941176", "565900.6470588235", "2.08565879129763", Some(13170792)),
        (ModelId::TransformerSmall, 4, "13837446.0", "1163904.0", "1.6581083035860107", None),
        (ModelId::TransformerLarge, 6, "51037318.0", "4653696.0", "1.7526391044859857", None),
    ];
    for (id, layers, fwd, aux, bm, params) in cases {
        let c = registry(id);
        assert_eq!(c.layers, layers);
        assert_eq!(c.forward_cost, fwd.parse::<f64>().unwrap(), "{id}");
        assert_eq!(c.aux_cost, aux.parse::<f64>().unwrap(), "{id}");
        assert_eq!(c.backward_multiplier, bm.parse::<f64>().unwrap(), "{id}");
        assert_eq!(format!("{:?}", c.backward_multiplier), bm);
        assert_eq!(c.parameters, params);
    }
}

#[test]
fn toy_greedy_is_four_times_faster() {
    let c = CostModelConstants {
        layers: 4,
        forward_cost: 1.0,
        aux_cost: 0.0,
        backward_multiplier: 1.0,
        parameters: None,
    };
    let bp = method_cost(&c, Scheme::Backprop, 8, 3).unwrap();
    let g = method_cost(&c, Scheme::Greedy, 8, 3).unwrap();
    assert_eq!(g.time, bp.time / 4.0);
}

#[test]
fn invalid_arguments() {
    let c = registry(ModelId::Resnet18);
    assert!(method_cost(&c, Scheme::Chunked(0), 1, 1).is_err());
    assert!(method_cost(&c, Scheme::Chunked(10), 1, 1).is_err());
    assert!(method_cost(&c, Scheme::LastK(10), 1, 1).is_err());
    assert!(method_cost(&c, Scheme::Greedy, 0, 1).is_err());
    assert!(method_cost(&c, Scheme::Greedy, 1, 0).is_err());
    assert!("vgg".parse::<ModelId>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chunked_one_is_backprop(c in constants(), batch in 1usize..4096, steps in 1usize..100_000) {
        let a = method_cost(&c, Scheme::Chunked(1), batch, steps).unwrap();
        let b = method_cost(&c, Scheme::Backprop, batch, steps).unwrap();
        prop_assert_eq!(a.cost, b.cost);
        prop_assert_eq!(a.time, b.time);
    }

    #[test]
    fn greedy_time_times_layers_is_cost_per_batch(c in constants(), batch in 1usize..4096, steps in 1usize..100_000) {
        let g = method_cost(&c, Scheme::Greedy, batch, steps).unwrap();
        let lhs = g.time * c.layers as f64;
        let rhs = g.cost / batch as f64;
        prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * rhs, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn cost_is_linear_in_steps(c in constants(), batch in 1usize..1024, steps in 1usize..10_000, k in 2usize..8) {
        for s in [Scheme::Backprop, Scheme::Greedy, Scheme::Overlapping] {
            let one = method_cost(&c, s, batch, steps).unwrap();
            let many = method_cost(&c, s, batch, steps * k).unwrap();
            let want = one.cost * k as f64;
            prop_assert!((many.cost - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn example_term_is_linear_in_batch(c in constants(), batch in 1usize..1024, steps in 1usize..1000) {
        let c = CostModelConstants { parameters: None, ..c };
        let a = method_cost(&c, Scheme::Greedy, batch, steps).unwrap();
        let b = method_cost(&c, Scheme::Greedy, 2 * batch, steps).unwrap();
        prop_assert!((b.cost - 2.0 * a.cost).abs() <= 1e-12 * b.cost);
        let p = method_cost(&c, Scheme::Backprop, batch, steps).unwrap();
        let q = method_cost(&c, Scheme::Backprop, 2 * batch, steps).unwrap();
        prop_assert!((p.time - q.time).abs() <= 1e-12 * p.time);
    }

    #[test]
    fn time_never_exceeds_cost(c in constants(), batch in 1usize..1024, steps in 1usize..1000, k in 1usize..64) {
        let k = k.min(c.layers);
        for s in [Scheme::Backprop, Scheme::Greedy, Scheme::Overlapping, Scheme::Chunked(k), Scheme::LastK(k)] {
            let m = method_cost(&c, s, batch, steps).unwrap();
            prop_assert!(m.time > 0.0 && m.time <= m.cost);
            prop_assert!(m.parallelism >= 1.0);
        }
    }
}
