use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::profiler::PrefillTrace;

/// Relative size of the perturbation applied to unimportant layers.
const NEAR_IDENTITY_NOISE: f64 = 1e-3;

/// Synthetic trace with known layer importance.
///
/// Layers outside `important` get `B = A + e` with `‖e‖ = 1e-3 · ‖A‖`, so
/// their cosines stay above 0.999. Layers in `important` get a `B` drawn
/// independently of `A`, with cosine near zero.
pub fn make_planted_trace(
    n_layer: usize,
    d_model: usize,
    prompt_len: usize,
    important: &[usize],
    seed: u64,
) -> Result<PrefillTrace> {
    if let Some(&bad) = important.iter().find(|&&l| l >= n_layer) {
        return Err(Error::InvalidConfig(format!(
            "important layer {bad} out of range for {n_layer} layers"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect()
    };
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();

    let total = n_layer * prompt_len * d_model;
    let (mut pre, mut post) = (Vec::with_capacity(total), Vec::with_capacity(total));
    for layer in 0..n_layer {
        let is_important = important.contains(&layer);
        for _ in 0..prompt_len {
            let a = gauss(d_model);
            let b = if is_important {
                gauss(d_model)
            } else {
                let noise = gauss(d_model);
                let k = NEAR_IDENTITY_NOISE * norm(&a) / norm(&noise).max(f64::MIN_POSITIVE);
                a.iter()
                    .zip(&noise)
                    .map(|(x, e)| x + (k * *e as f64) as f32)
                    .collect()
            };
            pre.extend(a);
            post.extend(b);
        }
    }
    PrefillTrace::full(n_layer, d_model, prompt_len, pre, post)
}
