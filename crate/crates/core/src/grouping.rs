//! Three-way layer clustering and per-layer budget reallocation.
//!
//! Layers are clustered on their mean cosine. The group with the highest
//! centroid (`g3`) changes its inputs least; its layers keep only
//! `squeeze_ratio` of the initial budget and the freed tokens are spread
//! evenly over `g1 ∪ g2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::CosineProfile;

const GROUPS: usize = 3;
const MAX_LLOYD_ITERS: usize = 100;

/// Default share of the initial budget kept by `g3` layers.
pub const DEFAULT_SQUEEZE_RATIO: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    pub g3: Vec<usize>,
    /// Ascending; `centroids[2]` belongs to `g3`.
    #[serde(default)]
    pub centroids: [f64; 3],
}

impl LayerGroups {
    pub fn n_layer(&self) -> usize {
        self.g1.len() + self.g2.len() + self.g3.len()
    }

    /// 0, 1 or 2 for g1, g2, g3.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        [&self.g1, &self.g2, &self.g3]
            .iter()
            .position(|g| g.binary_search(&layer).is_ok())
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_layer();
        let mut seen = vec![false; n];
        for g in [&self.g1, &self.g2, &self.g3] {
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format("group members must be sorted and unique".into()));
            }
            for &l in g.iter() {
                if l >= n || std::mem::replace(&mut seen[l], true) {
                    return Err(Error::Format(format!(
                        "groups do not partition layers 0..{n} (layer {l})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Clusters layers into three groups by mean cosine.
///
/// One-dimensional k-means optima are contiguous in sorted order, so the
/// partition is found exactly by dynamic programming over split points and
/// then run through Lloyd assignment steps, which break distance ties toward
/// the lower centroid. With fewer than three distinct values the sorted
/// layers are cut into contiguous thirds instead.
pub fn cluster_layers(profile: &CosineProfile) -> Result<LayerGroups> {
    let values = profile.means();
    let n = values.len();
    if n < GROUPS {
        return Err(Error::Unsupported(format!(
            "clustering needs at least {GROUPS} layers, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("profile contains non-finite means".into()));
    }

    // layer indices sorted by (value, index)
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    let labels = if distinct < GROUPS {
        thirds(n)
    } else {
        let cuts = optimal_cuts(&sorted, GROUPS);
        let mut labels = vec![0usize; n];
        for (k, w) in cuts.windows(2).enumerate() {
            labels[w[0]..w[1]].iter_mut().for_each(|l| *l = k);
        }
        lloyd_polish(&sorted, labels)
    };

    let mut groups: [Vec<usize>; GROUPS] = Default::default();
    let mut sums = [0f64; GROUPS];
    for (pos, &label) in labels.iter().enumerate() {
        groups[label].push(order[pos]);
        sums[label] += sorted[pos];
    }
    let mut centroids = [0f64; GROUPS];
    for k in 0..GROUPS {
        centroids[k] = sums[k] / groups[k].len() as f64;
        groups[k].sort_unstable();
    }
    let [g1, g2, g3] = groups;
    Ok(LayerGroups {
        g1,
        g2,
        g3,
        centroids,
    })
}

fn thirds(n: usize) -> Vec<usize> {
    (0..n)
        .map(|pos| {
            if pos < n / 3 {
                0
            } else if pos < 2 * n / 3 {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Cluster boundaries `[0, c1, .., n]` minimising within-cluster sum of
/// squares over sorted `xs`.
fn optimal_cuts(xs: &[f64], k: usize) -> Vec<usize> {
    let n = xs.len();
    // cost[i][j]: SSE of xs[i..j], via Welford updates for stability when
    // values crowd near 1.0
    let mut cost = vec![vec![0f64; n + 1]; n + 1];
    for i in 0..n {
        let (mut mean, mut m2) = (0f64, 0f64);
        for j in i..n {
            let count = (j - i + 1) as f64;
            let delta = xs[j] - mean;
            mean += delta / count;
            m2 += delta * (xs[j] - mean);
            cost[i][j + 1] = m2.max(0.0);
        }
    }

    // best[m][j]: min cost of splitting xs[..j] into m nonempty clusters
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut arg = vec![vec![0usize; n + 1]; k + 1];
    best[0][0] = 0.0;
    for m in 1..=k {
        for j in m..=n {
            for i in (m - 1)..j {
                let c = best[m - 1][i] + cost[i][j];
                if c < best[m][j] {
                    best[m][j] = c;
                    arg[m][j] = i;
                }
            }
        }
    }
    let mut cuts = vec![n];
    let mut j = n;
    for m in (1..=k).rev() {
        j = arg[m][j];
        cuts.push(j);
    }
    cuts.reverse();
    cuts
}

/// Lloyd iterations from a starting labelling; keeps the start if a cluster
/// would empty.
fn lloyd_polish(xs: &[f64], start: Vec<usize>) -> Vec<usize> {
    let mut labels = start.clone();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = [0f64; GROUPS];
        let mut counts = [0usize; GROUPS];
        for (x, &l) in xs.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        if counts.contains(&0) {
            return start;
        }
        let centroids: Vec<f64> = (0..GROUPS).map(|k| sums[k] / counts[k] as f64).collect();
        let next: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let mut best = 0;
                for k in 1..GROUPS {
                    // strict comparison keeps ties on the lower centroid
                    if (x - centroids[k]).abs() < (x - centroids[best]).abs() {
                        best = k;
                    }
                }
                best
            })
            .collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut counts = [0usize; GROUPS];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.contains(&0) {
        start
    } else {
        labels
    }
}

/// Per-layer token budgets after reallocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub b_init: usize,
    pub squeeze_ratio: f64,
    pub groups: LayerGroups,
    pub budgets: Vec<usize>,
}

impl BudgetPlan {
    pub fn n_layer(&self) -> usize {
        self.budgets.len()
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }

    /// Errors on the first layer whose budget is below `floor`.
    pub fn enforce_floor(&self, floor: usize) -> Result<()> {
        match self.budgets.iter().position(|&b| b < floor) {
            Some(layer) => Err(Error::BudgetFloor {
                layer,
                budget: self.budgets[layer],
                floor,
            }),
            None => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: BudgetPlan =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        plan.groups.validate()?;
        if plan.groups.n_layer() != plan.budgets.len() {
            return Err(Error::Format(format!(
                "plan has {} budgets for {} grouped layers",
                plan.budgets.len(),
                plan.groups.n_layer()
            )));
        }
        if plan.b_init == 0 || !(plan.squeeze_ratio > 0.0 && plan.squeeze_ratio <= 1.0) {
            return Err(Error::Format("plan has invalid b_init or squeeze_ratio".into()));
        }
        Ok(plan)
    }
}

fn floor_tokens(x: f64) -> usize {
    // absorb representation error such as 1000 * 0.3 = 299.99999999999994
    (x + 1e-9 * x.abs().max(1.0)).floor() as usize
}

/// `b_init` as a fraction of the prompt length, at least one token.
pub fn budget_from_fraction(fraction: f64, prompt_len: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "budget fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(floor_tokens(fraction * prompt_len as f64).max(1))
}

/// Reallocates a uniform `b_init` per layer.
///
/// `g3` layers get `floor(b_init · squeeze_ratio)`; every other layer gets
/// `floor((n_layer · b_init − |g3| · b_init · squeeze_ratio) / (|g1| + |g2|))`.
pub fn allocate_budgets(groups: &LayerGroups, b_init: usize, squeeze_ratio: f64) -> Result<BudgetPlan> {
    if !(squeeze_ratio > 0.0 && squeeze_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "squeeze_ratio must lie in (0, 1], got {squeeze_ratio}"
        )));
    }
    if b_init == 0 {
        return Err(Error::InvalidConfig("b_init must be at least 1".into()));
    }
    groups.validate()?;
    let n = groups.n_layer();
    let donors = groups.g3.len();
    let receivers = n - donors;
    if receivers == 0 {
        return Err(Error::Allocation);
    }

    let reduced = b_init as f64 * squeeze_ratio;
    let raised = (n as f64 * b_init as f64 - donors as f64 * reduced) / receivers as f64;
    let (reduced, raised) = (floor_tokens(reduced), floor_tokens(raised));
    let budgets = (0..n)
        .map(|l| {
            if groups.g3.binary_search(&l).is_ok() {
                reduced
            } else {
                raised
            }
        })
        .collect();
    Ok(BudgetPlan {
        b_init,
        squeeze_ratio,
        groups: groups.clone(),
        budgets,
    })
}
