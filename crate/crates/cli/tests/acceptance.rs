//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squeeze_core::eviction::{evict, EvictionPolicy};
use squeeze_core::grouping::{allocate_budgets, budget_from_fraction, cluster_layers, LayerGroups};
use squeeze_core::kv_model::{weights_crossover_tokens, CacheEntry, LayerCache, ModelShape, SimConfig};
use squeeze_core::profiler::{profile_layers, CosineProfile};
use squeeze_core::simulator::{
    make_planted_trace, prefill, simulate_decode, simulate_decode_observed, DecodeMode, ToyModel, ToyModelSpec,
};

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn run(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(()), Some(l)) if elapsed > l => Err(format!("took {elapsed:?}, limit {l:?}")),
        (o, _) => o,
    };
    match &outcome {
        Ok(()) => println!("PASS  {name}  ({:.1} ms)", elapsed.as_secs_f64() * 1e3),
        Err(e) => println!("FAIL  {name}  ({:.1} ms): {e}", elapsed.as_secs_f64() * 1e3),
    }
    outcome.is_ok()
}

fn allocation_worked_example() -> Check {
    let groups = LayerGroups {
        g1: (0..9).collect(),
        g2: (9..18).collect(),
        g3: (18..32).collect(),
        centroids: [0.0; 3],
    };
    let plan = allocate_budgets(&groups, 1000, 0.3).map_err(|e| e.to_string())?;
    // integer form of (1000·18 + 1000·0.7·14) / 18 and 1000·0.3
    let others = (1000 * 18 + 700 * 14) / 18;
    let important = 1000 * 3 / 10;
    ensure!((others, important) == (1544, 300), "oracle arithmetic drifted");
    for l in 0..32 {
        let want = if l < 18 { others } else { important };
        ensure!(plan.budgets[l] == want, "layer {l}: {} vs {want}", plan.budgets[l]);
    }
    Ok(())
}

fn memory_model() -> Check {
    let shape = ModelShape::llama2_7b();
    // K and V, 32 layers, 4096 wide, fp16
    let per_token = 2 * 32 * 4096 * 2;
    let got = shape.bytes_per_token(1).map_err(|e| e.to_string())?;
    ensure!(got == 524_288 && got == per_token, "bytes per token {got}");
    let one = squeeze_core::kv_cache_bytes(&shape, &SimConfig::new(1, 0, 1, 0).unwrap()).map_err(|e| e.to_string())?;
    ensure!(one == 524_288, "kv_cache_bytes for one token: {one}");

    let weights: u64 = 14 << 30;
    let crossover = weights_crossover_tokens(&shape, 1, weights).map_err(|e| e.to_string())?;
    // smallest n with n · 524288 ≥ weights, by linear scan
    let mut n = 0u64;
    while n * 524_288 < weights {
        n += 1;
    }
    ensure!(crossover == n, "crossover {crossover}, oracle {n}");
    ensure!((26_000..=30_000).contains(&crossover), "crossover {crossover} outside band");
    Ok(())
}

fn random_cache(rng: &mut ChaCha8Rng) -> LayerCache {
    let n = rng.random_range(1..=12);
    let mut positions: Vec<usize> = (0..20).collect();
    for i in (1..positions.len()).rev() {
        positions.swap(i, rng.random_range(0..=i));
    }
    positions.truncate(n);
    LayerCache::from_entries(
        positions
            .into_iter()
            .map(|position| CacheEntry {
                position,
                // coarse scores so ties are common
                score: rng.random_range(0..5) as f64 * 0.25,
            })
            .collect(),
    )
    .unwrap()
}

fn eviction_oracle() -> Check {
    let policies = [EvictionPolicy::SlidingWindow, EvictionPolicy::streaming(), EvictionPolicy::h2o()];
    for (k, policy) in policies.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        for case in 0..500 {
            let layer = random_cache(&mut rng);
            let budget = rng.random_range(policy.floor()..=13);
            let mut got = layer.clone();
            evict(policy, &mut got, budget).map_err(|e| e.to_string())?;
            let want = oracle::brute_force_retained(policy, layer.entries(), budget);
            ensure!(
                got.positions() == want,
                "{} case {case} budget {budget}: {:?} vs {want:?}",
                policy.name(),
                got.positions()
            );
        }
    }
    Ok(())
}

fn clustering_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    for case in 0..200 {
        let n = [12, 32, 80][case % 3];
        let values: Vec<f64> = if case % 4 == 3 {
            // quantized values exercise tie handling
            (0..n).map(|_| rng.random_range(0..6) as f64 * 0.1).collect()
        } else {
            (0..n).map(|_| rng.random_range(0.2..1.0)).collect()
        };
        let profile = CosineProfile::from_means(&values, 16).map_err(|e| e.to_string())?;
        let g = cluster_layers(&profile).map_err(|e| e.to_string())?;
        let got = oracle::partition_sse(&values, &[&g.g1, &g.g2, &g.g3]);
        let best = oracle::best_three_cluster_sse(&values);
        ensure!(
            (got - best).abs() <= 1e-9 * best.abs().max(f64::MIN_POSITIVE),
            "case {case} (n={n}): sse {got} vs optimum {best}"
        );
    }
    Ok(())
}

fn planted_recovery() -> Check {
    let sets: [&[usize]; 3] = [&[0, 1, 2, 3, 4, 15], &[0, 3, 7, 8, 12], &[1, 2, 3, 4, 5, 6, 7, 8, 9]];
    for seed in [11, 12, 13] {
        for important in sets {
            let trace = make_planted_trace(16, 48, 10, important, seed).map_err(|e| e.to_string())?;
            let g = cluster_layers(&profile_layers(&trace).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let planted: Vec<usize> = (0..16).filter(|l| !important.contains(l)).collect();
            ensure!(g.g3 == planted, "seed {seed}: g3 {:?}, planted {planted:?}", g.g3);
            for b_init in [1, 7, 100, 1000] {
                for ratio in [0.05, 0.3, 0.4, 0.77, 1.0] {
                    let plan = allocate_budgets(&g, b_init, ratio).map_err(|e| e.to_string())?;
                    let sum: usize = plan.budgets.iter().sum();
                    let target = 16 * b_init;
                    ensure!(sum <= target && target - sum <= 16, "sum {sum} vs {target}");
                }
            }
        }
    }
    Ok(())
}

fn full_cache_equivalence() -> Check {
    let shape = ModelShape::new(4, 64, 4, 2, 128).unwrap();
    let model = ToyModel::build(&ToyModelSpec::new(shape, 2718)).unwrap();
    let run = SimConfig::new(32, 32, 1, 0).unwrap();
    let groups = LayerGroups {
        g1: vec![0],
        g2: vec![1],
        g3: vec![2, 3],
        centroids: [0.0; 3],
    };
    // b_init·ratio ≥ 64 keeps even g3 layers above prompt + gen
    let plan = allocate_budgets(&groups, 128, 0.5).unwrap();
    ensure!(plan.budgets.iter().all(|&b| b >= 64), "plan {:?}", plan.budgets);
    for policy in [EvictionPolicy::SlidingWindow, EvictionPolicy::streaming(), EvictionPolicy::h2o()] {
        let sq = simulate_decode(&model, &run, Some(&plan), &policy, DecodeMode::Squeeze).map_err(|e| e.to_string())?;
        let full = simulate_decode(&model, &run, None, &policy, DecodeMode::Full).map_err(|e| e.to_string())?;
        ensure!(sq.final_hidden.len() == full.final_hidden.len(), "hidden width differs");
        for (a, b) in sq.final_hidden.iter().zip(&full.final_hidden) {
            let (a, b) = (*a as f64, *b as f64);
            ensure!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12), "hidden {a} vs {b}");
        }
        ensure!(
            sq.report.steps.iter().all(|s| s.mass_retained.iter().all(|&m| m == 1.0)),
            "mass retained below 1 without eviction"
        );
        ensure!(sq.report.tokens == full.report.tokens, "generated tokens differ");
    }
    Ok(())
}

fn memory_series_oracle() -> Check {
    let shape = ModelShape::new(8, 32, 4, 2, 256).unwrap().with_kv_dim(16).unwrap();
    let model = ToyModel::build(&ToyModelSpec::new(shape, 99)).unwrap();
    let run = SimConfig::new(80, 40, 2, 0).unwrap();
    let b_init = budget_from_fraction(0.2, run.prompt_len).unwrap();
    ensure!(b_init == 16, "b_init {b_init}");
    let prompt = model.spec().prompt(run.prompt_len);
    let p = prefill(&model, &prompt, &mut |_| {}).unwrap();
    let groups = cluster_layers(&profile_layers(&p.trace).unwrap()).unwrap();
    let plan = allocate_budgets(&groups, b_init, 0.4).unwrap();

    for policy in [EvictionPolicy::SlidingWindow, EvictionPolicy::streaming(), EvictionPolicy::h2o()] {
        let mut peaks = Vec::new();
        for mode in [DecodeMode::Squeeze, DecodeMode::Full] {
            let mut ledger = oracle::ShadowLedger::new(8);
            let out = simulate_decode_observed(&model, &prompt, &run, Some(&plan), &policy, mode, &mut |e| {
                ledger.observe(e)
            })
            .map_err(|e| e.to_string())?;
            ensure!(ledger.leaks == 0, "attention touched evicted entries");
            for s in &out.report.steps {
                // prefill emits step-0 events for every prompt token
                let entries = if s.step == 0 { 8 * run.prompt_len } else { ledger.totals_by_step[&s.step] };
                let want = oracle::entry_bytes(entries, 16, 2, 2);
                ensure!(s.bytes == want, "{} step {}: {} vs {want}", mode.name(), s.step, s.bytes);
            }
            let peak = out.report.steps.iter().map(|s| s.bytes).max().unwrap();
            ensure!(peak == out.report.peak_bytes, "peak mismatch");
            peaks.push(peak);
        }
        ensure!(peaks[0] < peaks[1], "{}: squeeze peak {} not below full {}", policy.name(), peaks[0], peaks[1]);
    }
    Ok(())
}

const TOY_CONFIG: &str = r#"{"n_layer":8,"d_model":64,"n_heads":4,"kv_dim":64,"bytes_per_scalar":2,
"max_context":512,"prompt_len":64,"gen_len":32,"batch":1,"seed":7}"#;

fn cli(args: &[&str]) -> Check {
    let mut argv = vec!["squeeze"];
    argv.extend_from_slice(args);
    squeeze_cli::run_from(argv).map_err(|e| format!("{args:?}: {e}"))
}

fn sweep_structure(dir: &Path) -> Check {
    let cfg = dir.join("sweep-model.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let out = dir.join("sweep");
    cli(&["sweep", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])?;
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let h = rdr.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).ok_or(format!("no column {name}"));
    let (ratio, sum, global, status) = (col("squeeze_ratio")?, col("budget_sum")?, col("global_budget")?, col("status")?);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    ensure!(rows.len() == 10, "{} rows", rows.len());
    for (i, r) in rows.iter().enumerate() {
        let p: f64 = r[ratio].parse().unwrap();
        ensure!((p - (i + 1) as f64 / 10.0).abs() < 1e-12, "row {i} ratio {p}");
        let (s, g): (usize, usize) = (r[sum].parse().unwrap(), r[global].parse().unwrap());
        ensure!(s <= g && g - s <= 8, "row {i}: budget sum {s} vs {g}");
        ensure!(&r[status] == "ok", "row {i} status {}", &r[status]);
    }
    Ok(())
}

fn pipeline_outputs(root: &Path, cfg: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let out = root.join("out");
    let o = out.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    cli(&["profile", "--config", c, "--out-dir", o])?;
    let profile = out.join("profile.json");
    cli(&["plan", "--profile", profile.to_str().unwrap(), "--budget", "0.2", "--out-dir", o])?;
    let plan = out.join("plan.json");
    let mut reports = Vec::new();
    for mode in ["full", "uniform", "squeeze"] {
        cli(&["simulate", "--config", c, "--plan", plan.to_str().unwrap(), "--mode", mode, "--policy", "h2o", "--out-dir", o])?;
        reports.push(out.join(format!("report-{mode}.json")).to_str().unwrap().to_string());
    }
    cli(&["sweep", "--config", c, "--squeeze-ratios", "0.2,0.4,0.6", "--jobs", "3", "--out-dir", o])?;
    let mut args = vec!["report", "--out-dir", o];
    args.extend(reports.iter().map(String::as_str));
    cli(&args)?;
    let prefix = root.to_str().unwrap().to_string();
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap().replace(&prefix, "<root>");
            (p.file_name().unwrap().to_string_lossy().into_owned(), text.into_bytes())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism(dir: &Path) -> Check {
    let cfg = dir.join("det-model.json");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let (a, b) = (dir.join("first"), dir.join("second"));
    let first = pipeline_outputs(&a, &cfg)?;
    let second = pipeline_outputs(&b, &cfg)?;
    ensure!(first.len() >= 13, "only {} artifacts", first.len());
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        ensure!(na == nb && ba == bb, "{na} differs between runs");
    }
    Ok(())
}

fn main() {
    std::env::remove_var("SOURCE_DATE_EPOCH");
    let dir = tempfile::TempDir::new().unwrap();
    let ms = Duration::from_millis;
    let results = [
        run("allocation worked example (300 / 1544)", Some(ms(1)), allocation_worked_example),
        run("memory model (524288 B/token, weights crossover)", Some(ms(1)), memory_model),
        run("eviction oracle (500 cases x 3 policies)", Some(ms(10_000)), eviction_oracle),
        run("clustering oracle (200 profiles)", Some(ms(5_000)), clustering_oracle),
        run("planted-importance recovery + conservation", Some(ms(5_000)), planted_recovery),
        run("full-cache equivalence", Some(ms(5_000)), full_cache_equivalence),
        run("memory-series shadow oracle + squeeze peak < full peak", Some(ms(10_000)), memory_series_oracle),
        run("sweep structure (10 conserving rows)", Some(ms(30_000)), || sweep_structure(dir.path())),
        run("determinism (byte-identical reruns)", None, || determinism(dir.path())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
