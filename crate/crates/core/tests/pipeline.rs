mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squeeze_core::eviction::{evict, EvictionPolicy};
use squeeze_core::grouping::{allocate_budgets, cluster_layers, LayerGroups};
use squeeze_core::kv_model::{kv_cache_bytes, kv_cache_bytes_actual, CacheEntry, LayerCache, ModelShape, SimConfig};
use squeeze_core::profiler::{profile_layers, CosineProfile};
use squeeze_core::simulator::{
    make_planted_trace, prefill, rms_norm, simulate_decode, simulate_decode_observed, toy_prefill, DecodeMode,
    ToyModel, ToyModelSpec,
};
use support::oracle;

fn random_cache(rng: &mut ChaCha8Rng, max_len: usize) -> LayerCache {
    let n = rng.random_range(1..=max_len);
    let mut positions: Vec<usize> = (0..24).collect();
    for i in (1..positions.len()).rev() {
        positions.swap(i, rng.random_range(0..=i));
    }
    positions.truncate(n);
    LayerCache::from_entries(
        positions
            .into_iter()
            .map(|position| CacheEntry {
                position,
                score: rng.random_range(0..4) as f64 * 0.5,
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn eviction_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let policies = [
        EvictionPolicy::SlidingWindow,
        EvictionPolicy::streaming(),
        EvictionPolicy::Streaming { n_sink: 2 },
        EvictionPolicy::h2o(),
        EvictionPolicy::H2o { recent_fraction: 0.3 },
    ];
    for policy in policies {
        for _ in 0..150 {
            let layer = random_cache(&mut rng, 12);
            let budget = rng.random_range(policy.floor()..=policy.floor() + 10);
            let mut got = layer.clone();
            evict(&policy, &mut got, budget).unwrap();
            let want = oracle::brute_force_retained(&policy, layer.entries(), budget);
            assert_eq!(got.positions(), want, "{policy:?} budget {budget} on {:?}", layer.entries());
        }
    }
}

#[test]
fn clustering_matches_exhaustive_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..60 {
        let n = [3, 7, 12, 32][case % 4];
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = cluster_layers(&CosineProfile::from_means(&values, 8).unwrap()).unwrap();
        let got = oracle::partition_sse(&values, &[&g.g1, &g.g2, &g.g3]);
        let best = oracle::best_three_cluster_sse(&values);
        assert!((got - best).abs() <= 1e-9 * best.max(1e-300), "case {case}: {got} vs {best}");
    }
}

#[test]
fn planted_layers_become_donors() {
    let planted_sets: [&[usize]; 3] = [&[0, 1, 2, 3, 14, 15], &[0, 5, 9, 10, 15], &[2, 3, 4, 5, 6, 7, 8]];
    for seed in [1, 2, 3] {
        for important in planted_sets {
            let trace = make_planted_trace(16, 32, 12, important, seed).unwrap();
            let g = cluster_layers(&profile_layers(&trace).unwrap()).unwrap();
            let near_identity: Vec<usize> = (0..16).filter(|l| !important.contains(l)).collect();
            assert_eq!(g.g3, near_identity, "seed {seed}");
        }
    }
}

#[test]
fn cached_keys_are_normed_inputs_times_key_weights() {
    let shape = ModelShape::new(3, 32, 4, 4, 64).unwrap();
    let model = ToyModel::build(&ToyModelSpec::new(shape, 12)).unwrap();
    let prompt = model.spec().prompt(10);
    let p = prefill(&model, &prompt, &mut |_| {}).unwrap();
    for layer in 0..3 {
        for token in 0..10 {
            let (a, _) = p.trace.pair(layer, token).unwrap();
            let want = oracle::naive_matvec(&rms_norm(a), &model.layer(layer).wk, shape.kv_dim);
            let got = p.session.key(layer, token);
            for (g, w) in got.iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-6 * (1.0 + w.abs()), "layer {layer} token {token}");
            }
        }
    }
}

#[test]
fn prefill_is_deterministic() {
    let spec = ToyModelSpec::new(ModelShape::new(2, 16, 2, 4, 32).unwrap(), 4);
    let prompt = spec.prompt(9);
    let (a, ca, ha) = toy_prefill(&spec, &prompt).unwrap();
    let (b, cb, hb) = toy_prefill(&spec, &prompt).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(ha, hb);
    assert!(ca.layers().iter().all(|l| l.positions() == (0..9).collect::<Vec<_>>()));
}

fn toy(n_layer: usize, seed: u64) -> ToyModel {
    ToyModel::build(&ToyModelSpec::new(ModelShape::new(n_layer, 32, 4, 2, 256).unwrap(), seed)).unwrap()
}

fn plan_for(model: &ToyModel, run: &SimConfig, b_init: usize, ratio: f64) -> squeeze_core::BudgetPlan {
    let prompt = model.spec().prompt(run.prompt_len);
    let p = prefill(model, &prompt, &mut |_| {}).unwrap();
    let groups = cluster_layers(&profile_layers(&p.trace).unwrap()).unwrap();
    allocate_budgets(&groups, b_init, ratio).unwrap()
}

#[test]
fn shadow_ledger_agrees_with_reported_bytes_and_scores() {
    let model = toy(6, 8);
    let run = SimConfig::new(40, 24, 3, 0).unwrap();
    let plan = plan_for(&model, &run, 15, 0.4);
    for policy in [EvictionPolicy::SlidingWindow, EvictionPolicy::streaming(), EvictionPolicy::h2o()] {
        for mode in [DecodeMode::Squeeze, DecodeMode::Uniform, DecodeMode::Full] {
            let mut ledger = oracle::ShadowLedger::new(6);
            let prompt = model.spec().prompt(run.prompt_len);
            let out = simulate_decode_observed(&model, &prompt, &run, Some(&plan), &policy, mode, &mut |e| {
                ledger.observe(e)
            })
            .unwrap();
            assert_eq!(ledger.leaks, 0);
            for s in &out.report.steps {
                let entries = ledger.totals_by_step[&s.step];
                if s.step > 0 {
                    assert_eq!(s.bytes, oracle::entry_bytes(entries, 32, 2, 3));
                }
            }
            assert_eq!(out.report.steps[0].bytes, oracle::entry_bytes(6 * 40, 32, 2, 3));
            // scores rebuilt from events match the live cache
            for (l, layer) in out.cache.layers().iter().enumerate() {
                let shadow: Vec<(usize, f64)> = ledger.layers[l].iter().map(|(&p, &s)| (p, s)).collect();
                assert_eq!(shadow.len(), layer.len());
                for ((p, s), e) in shadow.iter().zip(layer.entries()) {
                    assert_eq!(*p, e.position);
                    assert!((s - e.score).abs() < 1e-9);
                }
            }
            assert_eq!(
                out.report.steps.last().unwrap().bytes,
                kv_cache_bytes_actual(&out.cache, model.shape(), 3).unwrap()
            );
        }
    }
}

#[test]
fn global_budget_and_peak() {
    let model = toy(6, 21);
    let run = SimConfig::new(50, 30, 1, 0).unwrap();
    let b_init = 10;
    let plan = plan_for(&model, &run, b_init, 0.3);
    let squeeze = simulate_decode(&model, &run, Some(&plan), &EvictionPolicy::SlidingWindow, DecodeMode::Squeeze).unwrap();
    let full = simulate_decode(&model, &run, Some(&plan), &EvictionPolicy::SlidingWindow, DecodeMode::Full).unwrap();
    for s in &squeeze.report.steps[1..] {
        assert!(s.retained.iter().sum::<usize>() <= 6 * b_init + 6);
    }
    assert!(squeeze.report.peak_bytes <= full.report.peak_bytes);
    assert_eq!(
        full.report.peak_bytes,
        kv_cache_bytes(model.shape(), &run).unwrap(),
        "the full cache peaks at the closed-form bound"
    );
    assert!(full.report.steps.iter().all(|s| s.mass_retained.iter().all(|&m| m == 1.0)));
    assert!(squeeze.report.min_mass_retained() < 1.0);
}

#[test]
fn generous_budgets_change_nothing() {
    let model = toy(4, 5);
    let run = SimConfig::new(16, 16, 1, 0).unwrap();
    let groups = LayerGroups {
        g1: vec![0],
        g2: vec![1],
        g3: vec![2, 3],
        centroids: [0.1, 0.5, 0.9],
    };
    let plan = allocate_budgets(&groups, 100, 0.5).unwrap();
    for policy in [EvictionPolicy::SlidingWindow, EvictionPolicy::h2o()] {
        let a = simulate_decode(&model, &run, Some(&plan), &policy, DecodeMode::Squeeze).unwrap();
        let b = simulate_decode(&model, &run, None, &policy, DecodeMode::Full).unwrap();
        assert_eq!(a.report.fingerprint, b.report.fingerprint);
        assert_eq!(a.final_hidden, b.final_hidden);
        assert_eq!(a.report.steps, b.report.steps);
    }
}

#[test]
fn report_is_reproducible() {
    let model = toy(4, 9);
    let run = SimConfig::new(20, 10, 2, 0).unwrap();
    let plan = plan_for(&model, &run, 6, 0.4);
    let go = || {
        let out = simulate_decode(&model, &run, Some(&plan), &EvictionPolicy::h2o(), DecodeMode::Squeeze).unwrap();
        serde_json::to_string(&out.report).unwrap()
    };
    assert_eq!(go(), go());
    let rebuilt = toy(4, 9);
    let out = simulate_decode(&rebuilt, &run, Some(&plan), &EvictionPolicy::h2o(), DecodeMode::Squeeze).unwrap();
    assert_eq!(serde_json::to_string(&out.report).unwrap(), go());
}
