//! Spatial-temporal intervention on variant prompts.
//!
//! Each of the `⌊rN/2⌋` iterations draws, in this order, a node `w`, a node
//! `v`, a step `i` and a step `j` (all uniform, with replacement) and
//! exchanges slots `(i, w)` and `(j, v)`. Reads always come from the original
//! tensor and writes go to the copy, so overlapping draws can duplicate a
//! vector.
//!
//! The generator is `ChaCha8Rng`; [`intervene`] seeds it from
//! [`InterventionConfig::seed`], while training owns one stream for the whole
//! run so every epoch sees fresh draws.

use ndarray::{s, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::memory::{PromptKind, PromptTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self { ratio: 0.25, seed: 7 }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(MipError::Domain(format!(
                "intervention ratio must lie in [0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// One exchange between slot `(step_a, node_a)` and slot `(step_b, node_b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Swap {
    pub node_a: usize,
    pub node_b: usize,
    pub step_a: usize,
    pub step_b: usize,
}

pub fn num_swaps(ratio: f64, nodes: usize) -> usize {
    (ratio * nodes as f64 / 2.0).floor() as usize
}

/// Draws the swap sequence for one `steps × nodes` tensor.
pub fn sample_swaps<R: Rng>(steps: usize, nodes: usize, ratio: f64, rng: &mut R) -> Vec<Swap> {
    (0..num_swaps(ratio, nodes))
        .map(|_| {
            let node_a = rng.random_range(0..nodes);
            let node_b = rng.random_range(0..nodes);
            let step_a = rng.random_range(0..steps);
            let step_b = rng.random_range(0..steps);
            Swap {
                node_a,
                node_b,
                step_a,
                step_b,
            }
        })
        .collect()
}

/// For every slot `t·N + n`, the slot of the original tensor it is read from.
pub fn source_map(steps: usize, nodes: usize, swaps: &[Swap]) -> Vec<usize> {
    let mut map: Vec<usize> = (0..steps * nodes).collect();
    for sw in swaps {
        let a = sw.step_a * nodes + sw.node_a;
        let b = sw.step_b * nodes + sw.node_b;
        map[a] = b;
        map[b] = a;
    }
    map
}

/// Source map over a whole batch of `samples` stacked `steps × nodes` slabs.
/// Each sample gets its own swap draw, taken in sample order from `rng`.
pub fn batch_source_map<R: Rng>(samples: usize, steps: usize, nodes: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let slab = steps * nodes;
    let mut out = Vec::with_capacity(samples * slab);
    for b in 0..samples {
        let swaps = sample_swaps(steps, nodes, ratio, rng);
        out.extend(source_map(steps, nodes, &swaps).into_iter().map(|i| i + b * slab));
    }
    out
}

/// Applies a swap sequence with read-original / write-copy semantics.
pub fn apply_swaps(values: &Array3<f64>, swaps: &[Swap]) -> Array3<f64> {
    let mut out = values.clone();
    for sw in swaps {
        out.slice_mut(s![sw.step_a, sw.node_a, ..])
            .assign(&values.slice(s![sw.step_b, sw.node_b, ..]));
        out.slice_mut(s![sw.step_b, sw.node_b, ..])
            .assign(&values.slice(s![sw.step_a, sw.node_a, ..]));
    }
    out
}

/// Returns an intervened copy of a variant prompt tensor.
pub fn intervene(variant: &PromptTensor, config: &InterventionConfig) -> Result<PromptTensor> {
    if variant.kind != PromptKind::Variant {
        return Err(MipError::Contract("intervention applies to variant prompts only".into()));
    }
    config.validate()?;
    let (steps, nodes, _) = variant.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let swaps = sample_swaps(steps, nodes, config.ratio, &mut rng);
    Ok(PromptTensor {
        values: apply_swaps(&variant.values, &swaps),
        kind: PromptKind::Variant,
    })
}
