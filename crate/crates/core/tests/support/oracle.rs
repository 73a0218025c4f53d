//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use squeeze_core::eviction::EvictionPolicy;
use squeeze_core::kv_model::CacheEntry;
use squeeze_core::simulator::StepEvent;

/// All `k`-subsets of `0..n` as index lists.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

/// Exhaustive search for the retained position set of `policy`.
///
/// Every candidate subset of the right size that satisfies the policy's hard
/// constraint (sinks kept / recent window kept) is ranked by the policy's
/// preference, compared lexicographically from the most preferred entry down.
pub fn brute_force_retained(policy: &EvictionPolicy, entries: &[CacheEntry], budget: usize) -> Vec<usize> {
    let n = entries.len();
    let k = budget.min(n);
    let mut by_pos: Vec<usize> = (0..n).collect();
    by_pos.sort_by_key(|&i| entries[i].position);
    let recent_set = |r: usize| -> Vec<usize> { by_pos[n - r..].to_vec() };

    let mut best: Option<(Vec<(f64, usize)>, Vec<usize>)> = None;
    for cand in subsets(n, k) {
        let (required, key_of): (Vec<usize>, Box<dyn Fn(usize) -> (f64, usize)>) = match *policy {
            EvictionPolicy::SlidingWindow => (vec![], Box::new(|i| (entries[i].position as f64, 0))),
            EvictionPolicy::Streaming { n_sink } => (
                (0..n).filter(|&i| entries[i].position < n_sink).collect(),
                Box::new(|i| (entries[i].position as f64, 0)),
            ),
            EvictionPolicy::H2o { recent_fraction } => {
                let r = if n > budget {
                    (budget as f64 * recent_fraction).floor() as usize
                } else {
                    0
                };
                (recent_set(r), Box::new(|i| (entries[i].score, entries[i].position)))
            }
        };
        if n > budget && !required.iter().all(|r| cand.contains(r)) {
            continue;
        }
        let mut key: Vec<(f64, usize)> = cand
            .iter()
            .filter(|i| !required.contains(i))
            .map(|&i| key_of(i))
            .collect();
        key.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let better = match &best {
            None => true,
            Some((bk, _)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((key, cand));
        }
    }
    let mut positions: Vec<usize> = best
        .map(|(_, c)| c.into_iter().map(|i| entries[i].position).collect())
        .unwrap_or_default();
    positions.sort_unstable();
    positions
}

fn sse(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum()
}

/// Within-cluster sum of squares of an arbitrary labelled partition.
pub fn partition_sse(values: &[f64], groups: &[&[usize]]) -> f64 {
    groups
        .iter()
        .map(|g| sse(&g.iter().map(|&i| values[i]).collect::<Vec<_>>()))
        .sum()
}

/// Optimal three-cluster SSE by trying every pair of split points in sorted
/// order (one-dimensional optima are contiguous).
pub fn best_three_cluster_sse(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let mut best = f64::INFINITY;
    for i in 1..n - 1 {
        for j in i + 1..n {
            let c = sse(&s[..i]) + sse(&s[i..j]) + sse(&s[j..]);
            best = best.min(c);
        }
    }
    best
}

/// Textbook `x · W` with `W` row-major `[x.len()][out]`, f64 accumulation.
pub fn naive_matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| (0..x.len()).map(|i| x[i] as f64 * w[i * out + j] as f64).sum())
        .collect()
}

/// Bookkeeping rebuilt purely from decode events.
#[derive(Debug, Default)]
pub struct ShadowLedger {
    /// layer -> position -> accumulated score
    pub layers: Vec<BTreeMap<usize, f64>>,
    pub evicted: Vec<Vec<usize>>,
    /// count of rows that put mass on an already evicted position
    pub leaks: usize,
    /// per step: total retained entries after the step
    pub totals_by_step: BTreeMap<usize, usize>,
}

impl ShadowLedger {
    pub fn new(n_layer: usize) -> Self {
        ShadowLedger {
            layers: vec![BTreeMap::new(); n_layer],
            evicted: vec![Vec::new(); n_layer],
            ..Default::default()
        }
    }

    pub fn observe(&mut self, ev: StepEvent<'_>) {
        match ev {
            StepEvent::Evicted { layer, positions, .. } => {
                for p in positions {
                    self.layers[layer].remove(p);
                    self.evicted[layer].push(*p);
                }
            }
            StepEvent::Attended {
                step,
                layer,
                positions,
                row,
            } => {
                for (&p, &pr) in positions.iter().zip(row) {
                    if self.evicted[layer].contains(&p) {
                        self.leaks += 1;
                    }
                    *self.layers[layer].entry(p).or_insert(0.0) += pr;
                }
                if layer + 1 == self.layers.len() {
                    let total = self.layers.iter().map(BTreeMap::len).sum();
                    self.totals_by_step.insert(step, total);
                }
            }
        }
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(BTreeMap::len).sum()
    }
}

/// Bytes for `entries` cached tokens counted the long way.
pub fn entry_bytes(entries: usize, kv_dim: usize, bytes_per_scalar: usize, batch: usize) -> u64 {
    let mut total = 0u64;
    for _ in 0..entries {
        // one K row and one V row per sequence in the batch
        total += (kv_dim * bytes_per_scalar * batch) as u64;
        total += (kv_dim * bytes_per_scalar * batch) as u64;
    }
    total
}
