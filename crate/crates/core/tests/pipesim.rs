use std::collections::HashMap;

use localpar::pipesim::{
    communication_report, memory_report, simulate, stage_cycles_from_constants, trace_csv, EventKind,
    PipelineConfig, PipelineMode, SimReport, TRACE_CSV_HEADER,
};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_config(mode: PipelineMode) -> impl Strategy<Value = PipelineConfig> {
    (1usize..6, 1usize..6, 1usize..4, any::<bool>()).prop_flat_map(move |(d, m, steps, recompute)| {
        (
            prop::collection::vec(1u64..6, d),
            prop::collection::vec(1u64..6, d),
            prop::collection::vec(0u64..4, d),
            prop::collection::vec(0.5f64..20.0, d - 1),
        )
            .prop_map(move |(fwd, bwd, aux, bytes)| {
                let mut cfg = PipelineConfig::uniform(mode, d, m, 1, 1, 0);
                cfg.steps = steps;
                cfg.recomputation = recompute;
                cfg.forward_cycles = fwd;
                cfg.backward_cycles = bwd;
                cfg.aux_cycles = aux;
                cfg.boundary_activation_bytes = bytes;
                cfg
            })
    })
}

fn any_config() -> impl Strategy<Value = PipelineConfig> {
    prop_oneof![
        random_config(PipelineMode::PipelinedBackprop),
        random_config(PipelineMode::ChunkedLocal)
    ]
}

/// Busy cycles from the configuration alone.
fn analytic_work(cfg: &PipelineConfig, s: usize) -> u64 {
    let last = s + 1 == cfg.num_stages;
    let aux = match cfg.mode {
        PipelineMode::ChunkedLocal => cfg.aux_cycles[s],
        PipelineMode::PipelinedBackprop if last => cfg.aux_cycles[s],
        PipelineMode::PipelinedBackprop => 0,
    };
    (cfg.forward_cycles[s] + cfg.backward_cycles[s] + aux) * cfg.total_microbatches() as u64
}

fn check_causality(cfg: &PipelineConfig, r: &SimReport) {
    // (stage, kind, microbatch) -> (start, end)
    let mut spans: HashMap<(usize, EventKind, usize), (u64, u64)> = HashMap::new();
    let mut recv: HashMap<(usize, usize), Vec<u64>> = HashMap::new();
    for e in &r.trace {
        match e.kind {
            EventKind::Recv => recv.entry((e.stage, e.microbatch)).or_default().push(e.time),
            EventKind::Send => {}
            k => {
                spans.insert((e.stage, k, e.microbatch), (e.time, e.time + e.duration));
            }
        }
    }
    let mb = cfg.total_microbatches();
    for t in 0..mb {
        for s in 1..cfg.num_stages {
            let (prod_start, prod_end) = spans[&(s - 1, EventKind::Fwd, t)];
            let (cons_start, _) = spans[&(s, EventKind::Fwd, t)];
            assert!(prod_end <= cons_start, "stage {s} mb {t} forward before its input");
            let arrivals = &recv[&(s, t)];
            assert!(arrivals.iter().all(|&a| a >= prod_start + cfg.forward_cycles[s - 1]));
            assert!(arrivals.iter().min().copied().unwrap() <= cons_start);
        }
        if cfg.mode == PipelineMode::PipelinedBackprop {
            for s in 0..cfg.num_stages.saturating_sub(1) {
                let (_, down_end) = spans[&(s + 1, EventKind::Bwd, t)];
                let (up_start, _) = spans[&(s, EventKind::Bwd, t)];
                assert!(down_end <= up_start, "stage {s} mb {t} backward before gradient");
            }
            let last = cfg.num_stages - 1;
            let (bwd_start, _) = spans[&(last, EventKind::Bwd, t)];
            let step = t / cfg.microbatches;
            for u in step * cfg.microbatches..(step + 1) * cfg.microbatches {
                let (_, fwd_end) = spans[&(last, EventKind::Fwd, u)];
                assert!(fwd_end <= bwd_start);
            }
        }
    }
    // No stage runs two things at once.
    for s in 0..cfg.num_stages {
        let mut work: Vec<(u64, u64)> = r
            .trace
            .iter()
            .filter(|e| e.stage == s && e.duration > 0)
            .map(|e| (e.time, e.time + e.duration))
            .collect();
        work.sort();
        assert!(work.windows(2).all(|w| w[0].1 <= w[1].0));
    }
}

#[test]
fn communication_table() {
    let c = communication_report(&[12.3, 6.2, 3.1], 1);
    let want_local_rx = [0.0, 12.3, 6.2, 3.1];
    let want_local_tx = [12.3, 6.2, 3.1, 0.0];
    let want_bp = [12.3, 18.5, 9.3, 3.1];
    for s in 0..4 {
        assert!(close(c.local.received[s], want_local_rx[s], 0.05));
        assert!(close(c.local.transmitted[s], want_local_tx[s], 0.05));
        assert!(close(c.backprop.received[s], want_bp[s], 0.05));
        assert!(close(c.backprop.transmitted[s], want_bp[s], 0.05));
    }
    assert!(close(c.local.total(), 43.2, 0.05));
    assert!(close(c.backprop.total(), 86.4, 0.05));
}

#[test]
fn two_stage_communication() {
    let c = communication_report(&[7.0], 1);
    assert_eq!(c.local.total(), 14.0);
    assert_eq!(c.backprop.total(), 28.0);
    let c = communication_report(&[7.0], 5);
    assert_eq!(c.local.total(), 70.0);
}

#[test]
fn simulated_bytes_match_the_table() {
    let mut cfg = PipelineConfig::uniform(PipelineMode::PipelinedBackprop, 4, 3, 1, 1, 0);
    cfg.boundary_activation_bytes = vec![12.3, 6.2, 3.1];
    let table = communication_report(&cfg.boundary_activation_bytes, 3);
    let r = simulate(&cfg).unwrap();
    for s in 0..4 {
        assert!(close(r.bytes_received[s], table.backprop.received[s], 1e-9));
        assert!(close(r.bytes_transmitted[s], table.backprop.transmitted[s], 1e-9));
    }
    cfg.mode = PipelineMode::ChunkedLocal;
    cfg.steps = 3;
    let r = simulate(&cfg).unwrap();
    for s in 0..4 {
        assert!(close(r.bytes_received[s], table.local.received[s], 1e-9));
        assert!(close(r.bytes_transmitted[s], table.local.transmitted[s], 1e-9));
    }
}

#[test]
fn fill_fraction_matches_formula() {
    let cfg = PipelineConfig::uniform(PipelineMode::PipelinedBackprop, 4, 8, 1, 1, 0);
    let r = simulate(&cfg).unwrap();
    let oracle = 8.0 / (8.0 + 4.0 - 1.0);
    assert!((r.steady_state_fraction - oracle).abs() / oracle < 0.01);
    assert!((r.mean_utilization - oracle).abs() / oracle < 0.01);
    check_causality(&cfg, &r);
}

#[test]
fn local_pipeline_saturates() {
    for d in [2, 4, 8] {
        let mut cfg = PipelineConfig::uniform(PipelineMode::ChunkedLocal, d, 1, 1, 1, 0);
        cfg.steps = 100 * d;
        let r = simulate(&cfg).unwrap();
        assert!(r.utilization.iter().all(|&u| u >= 0.99), "D={d}: {:?}", r.utilization);
    }
}

#[test]
fn single_stage_modes_agree() {
    let bp = PipelineConfig::uniform(PipelineMode::PipelinedBackprop, 1, 1, 3, 2, 0);
    let local = PipelineConfig::uniform(PipelineMode::ChunkedLocal, 1, 1, 3, 2, 0);
    let (a, b) = (simulate(&bp).unwrap(), simulate(&local).unwrap());
    assert_eq!(a.utilization, b.utilization);
    assert_eq!(a.utilization, vec![1.0]);
    let mut rc = bp.clone();
    rc.recomputation = true;
    // parameter + one input + one activation working set
    assert_eq!(memory_report(&bp).unwrap(), vec![3.0]);
    assert_eq!(memory_report(&rc).unwrap(), vec![3.0]);
    assert_eq!(memory_report(&local).unwrap(), vec![3.0 + 1.0]);
}

#[test]
fn memory_grows_with_microbatches_for_backprop_only() {
    for recompute in [false, true] {
        let mut prev: Option<Vec<f64>> = None;
        for m in 1..=12 {
            let mut cfg = PipelineConfig::uniform(PipelineMode::PipelinedBackprop, 4, m, 1, 1, 0);
            cfg.recomputation = recompute;
            let mem = memory_report(&cfg).unwrap();
            if let Some(p) = &prev {
                assert!(mem.iter().zip(p).all(|(a, b)| a > b), "M={m}");
            }
            let mut local = cfg.clone();
            local.mode = PipelineMode::ChunkedLocal;
            assert_eq!(memory_report(&local).unwrap(), vec![4.0; 4]);
            prev = Some(mem);
        }
    }
}

#[test]
fn recomputation_reduces_memory() {
    for m in 1..=8 {
        let mut with = PipelineConfig::uniform(PipelineMode::PipelinedBackprop, 4, m, 1, 1, 0);
        with.recomputation = true;
        let mut without = with.clone();
        without.recomputation = false;
        let (a, b) = (memory_report(&with).unwrap(), memory_report(&without).unwrap());
        for (x, y) in a.iter().zip(&b) {
            if m > 1 {
                assert!(x < y);
            } else {
                assert!(x <= y);
            }
        }
    }
}

#[test]
fn trace_csv_layout() {
    let cfg = PipelineConfig::uniform(PipelineMode::ChunkedLocal, 2, 1, 1, 1, 1);
    let r = simulate(&cfg).unwrap();
    let csv = trace_csv(&r.trace);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_CSV_HEADER));
    let kinds: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    for k in ["fwd", "aux", "bwd", "send", "recv"] {
        assert!(kinds.contains(&k), "{k}");
    }
}

#[test]
fn invalid_configs() {
    let mut cfg = PipelineConfig::uniform(PipelineMode::ChunkedLocal, 3, 1, 1, 1, 0);
    cfg.boundary_activation_bytes.pop();
    assert!(simulate(&cfg).is_err());
    let cfg = PipelineConfig::uniform(PipelineMode::ChunkedLocal, 0, 1, 1, 1, 0);
    assert!(simulate(&cfg).is_err());
    let cfg = PipelineConfig::uniform(PipelineMode::ChunkedLocal, 2, 1, 0, 1, 0);
    assert!(simulate(&cfg).is_err());
    assert!(PipelineConfig::from_toml("num_stages = 2").is_err());
}

#[test]
fn stage_cycles_follow_the_cost_model() {
    let c = localpar::flops::registry(localpar::flops::ModelId::Resnet18);
    let (fwd, bwd, aux) = stage_cycles_from_constants(&c, 3, 1).unwrap();
    assert_eq!(fwd, vec![(3.0 * c.forward_cost).ceil() as u64; 3]);
    assert!(bwd.iter().zip(&fwd).all(|(b, f)| b > f));
    assert_eq!(aux.len(), 3);
    assert!(stage_cycles_from_constants(&c, 10, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bytes_are_conserved(cfg in any_config()) {
        let r = simulate(&cfg).unwrap();
        let rx: f64 = r.bytes_received.iter().sum();
        let tx: f64 = r.bytes_transmitted.iter().sum();
        prop_assert!((rx - tx).abs() <= 1e-9 * rx.max(1.0));
    }

    #[test]
    fn work_is_conserved(cfg in any_config()) {
        let r = simulate(&cfg).unwrap();
        for s in 0..cfg.num_stages {
            prop_assert_eq!(r.busy_cycles[s], analytic_work(&cfg, s));
            prop_assert!((0.0..=1.0).contains(&r.utilization[s]));
        }
    }

    #[test]
    fn schedule_is_causal(cfg in any_config()) {
        let r = simulate(&cfg).unwrap();
        check_causality(&cfg, &r);
    }

    #[test]
    fn backprop_moves_twice_the_bytes(bytes in prop::collection::vec(0.0f64..1e6, 1..12), m in 1usize..16) {
        let c = communication_report(&bytes, m);
        prop_assert!((c.backprop.total() - 2.0 * c.local.total()).abs() <= 1e-9 * c.backprop.total().max(1.0));
    }

    #[test]
    fn local_throughput_beats_backprop(d in 2usize..8, m in 1usize..32, fwd in 1u64..5, bwd in 1u64..5) {
        let bp = simulate(&PipelineConfig::uniform(PipelineMode::PipelinedBackprop, d, m, fwd, bwd, 0)).unwrap();
        let local = simulate(&PipelineConfig::uniform(PipelineMode::ChunkedLocal, d, 1, fwd, bwd, 0)).unwrap();
        prop_assert!(local.steady_state_throughput > bp.throughput);
    }

    #[test]
    fn recomputation_never_costs_memory(cfg in random_config(PipelineMode::PipelinedBackprop)) {
        let mut with = cfg.clone();
        with.recomputation = true;
        let mut without = cfg;
        without.recomputation = false;
        let (a, b) = (memory_report(&with).unwrap(), memory_report(&without).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
    }
}
