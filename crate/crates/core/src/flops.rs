//! Analytical cost of the visual-token attention term.
//!
//! The model charges `c * n^2 * d_k` per layer for `n` visual tokens. It is
//! an accounting device for comparing token schedules, not a measurement of
//! any real model's FLOPs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::earf::PruneSchedule;
use crate::error::{Error, Result};
use crate::stats;

/// Multiply-adds of `QK^T` plus `AV`, two FLOPs each.
pub const ATTENTION_FLOP_CONSTANT: u128 = 4;

pub const MODEL_DISCLAIMER: &str =
    "analytical visual-token attention term c*n^2*d_k only; not a measured or model-level FLOP count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub full_tokens: u64,
    pub tokens: u64,
    pub full_cost: u128,
    pub cost: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub d_k: u64,
    pub layers: Vec<LayerCost>,
    pub full_cost: u128,
    pub cost: u128,
    /// `cost / full_cost`, in `(0, 1]`.
    pub reduction_ratio: f64,
    pub note: String,
    /// Wall-clock per pipeline stage. Not serialized, so reports stay
    /// byte-identical between runs.
    #[serde(skip)]
    pub stage_times: Vec<(String, Duration)>,
}

impl EfficiencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,full_tokens,tokens,full_cost,cost\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer, l.full_tokens, l.tokens, l.full_cost, l.cost
            ));
        }
        out.push_str(&format!("total,,,{},{}\n", self.full_cost, self.cost));
        out
    }
}

fn layer_cost(tokens: u64, d_k: u64) -> u128 {
    ATTENTION_FLOP_CONSTANT * u128::from(tokens) * u128::from(tokens) * u128::from(d_k)
}

/// Costs `counts[l]` visual tokens at layer `l` against a baseline that keeps
/// `full[l]` tokens.
pub fn flops_model(full: &[u64], counts: &[u64], d_k: u64) -> Result<EfficiencyReport> {
    if full.len() != counts.len() || counts.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} baseline layers vs {} counted layers",
            full.len(),
            counts.len()
        )));
    }
    if d_k == 0 {
        return Err(Error::param("d_k", "must be positive"));
    }
    if let Some((l, _)) = counts
        .iter()
        .zip(full)
        .enumerate()
        .find(|(_, (&c, &f))| c == 0 || c > f)
    {
        return Err(Error::param(
            "counts",
            format!(
                "layer {l}: {} tokens against a baseline of {}",
                counts[l], full[l]
            ),
        ));
    }
    let layers: Vec<LayerCost> = counts
        .iter()
        .zip(full)
        .enumerate()
        .map(|(layer, (&tokens, &full_tokens))| LayerCost {
            layer,
            full_tokens,
            tokens,
            full_cost: layer_cost(full_tokens, d_k),
            cost: layer_cost(tokens, d_k),
        })
        .collect();
    let full_cost: u128 = layers.iter().map(|l| l.full_cost).sum();
    let cost: u128 = layers.iter().map(|l| l.cost).sum();
    Ok(EfficiencyReport {
        d_k,
        layers,
        full_cost,
        cost,
        reduction_ratio: cost as f64 / full_cost as f64,
        note: MODEL_DISCLAIMER.to_string(),
        stage_times: Vec::new(),
    })
}

/// Per-frame visual-token count entering each of `n_layers` layers when a
/// frame of `n_tokens` first passes the saliency stage at `saliency_rho` and
/// is then pruned at every scheduled layer. Each stage floors with a
/// minimum of one token.
pub fn cascade_counts(
    n_tokens: usize,
    saliency_rho: f64,
    schedule: &PruneSchedule,
    n_layers: usize,
) -> Vec<usize> {
    let mut current = stats::retention_budget(saliency_rho, n_tokens);
    let mut next_prune = schedule.layers.iter().zip(&schedule.rho).peekable();
    (0..n_layers)
        .map(|layer| {
            while let Some((_, &rho)) = next_prune.next_if(|(&l, _)| l as usize <= layer) {
                current = stats::retention_budget(rho, current);
            }
            current
        })
        .collect()
}
