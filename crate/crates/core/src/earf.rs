//! Rank-space fusion of attention importance and event saliency, layer-wise
//! top-K pruning, and attention over the purified active set.
//!
//! Both signals are mapped to normalized ascending ranks inside each frame,
//! so neither their scale nor their tails matter; only their orderings do.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, QuerySelection};
use crate::error::{Error, Result};
use crate::stats;

/// Head-averaged attention received by each visual token of one frame,
/// sorted by token index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAttention {
    pub frame_index: u32,
    pub tokens: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Mean over the scoring query rows of each visual column in `frame`.
pub fn attention_readout(
    map: &AttentionMap,
    frame: u32,
    selection: QuerySelection,
) -> Result<FrameAttention> {
    let rows = map.selected_rows(selection);
    if rows.is_empty() {
        return Err(Error::Empty("scoring query set"));
    }
    let mut slots: Vec<_> = map
        .visual_index
        .iter()
        .filter(|s| s.frame_index == frame)
        .collect();
    if slots.is_empty() {
        return Err(Error::UnknownFrame(frame));
    }
    slots.sort_by_key(|s| s.token_index);
    let n_q = rows.len() as f64;
    let scores = slots
        .iter()
        .map(|s| {
            let col: Vec<f64> = rows.iter().map(|r| r[s.position as usize]).collect();
            stats::pairwise_sum(&col) / n_q
        })
        .collect();
    Ok(FrameAttention {
        frame_index: frame,
        tokens: slots.iter().map(|s| s.token_index).collect(),
        scores,
    })
}

/// Zero-based ascending ranks. Equal values take consecutive ranks in
/// index order, so the result is always a permutation of `0..n`.
pub fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match values[a].total_cmp(&values[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut ranks = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

/// Ranks divided by `max(n - 1, 1)`, landing in `[0, 1]`.
pub fn rank_project(values: &[f64]) -> Vec<f64> {
    let denom = values.len().saturating_sub(1).max(1) as f64;
    ascending_ranks(values)
        .into_iter()
        .map(|r| r as f64 / denom)
        .collect()
}

/// Attention and event signals for the active tokens of one frame, aligned
/// by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualScore {
    pub frame_index: u32,
    pub tokens: Vec<u32>,
    pub attention: Vec<f64>,
    pub event: Vec<f64>,
}

impl VisualScore {
    fn check(&self) -> Result<()> {
        if self.attention.len() != self.event.len() || self.tokens.len() != self.attention.len() {
            return Err(Error::DimensionMismatch(format!(
                "frame {}: {} tokens, {} attention scores, {} event scores",
                self.frame_index,
                self.tokens.len(),
                self.attention.len(),
                self.event.len()
            )));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("{gamma} is outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - gamma) * R(attention) + gamma * R(event)` per token.
pub fn calibrate(scores: &VisualScore, gamma: f64) -> Result<Vec<f64>> {
    scores.check()?;
    check_gamma(gamma)?;
    let ra = rank_project(&scores.attention);
    let rm = rank_project(&scores.event);
    Ok(ra
        .iter()
        .zip(&rm)
        .map(|(a, m)| fuse(*a, *m, gamma))
        .collect())
}

fn fuse(attention_rank: f64, event_rank: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * attention_rank + gamma * event_rank
}

/// A token's position in the two rank spaces of its frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub attention_rank: f64,
    pub event_rank: f64,
}

impl RankedToken {
    pub fn calibrated(&self, gamma: f64) -> f64 {
        fuse(self.attention_rank, self.event_rank, gamma)
    }
}

/// Calibrated-score margin of `u` over `j`, written as the weighted sum of
/// their rank differences.
pub fn score_gap(u: RankedToken, j: RankedToken, gamma: f64) -> f64 {
    let gap = (1.0 - gamma) * (u.attention_rank - j.attention_rank)
        + gamma * (u.event_rank - j.event_rank);
    debug_assert!((gap - (u.calibrated(gamma) - j.calibrated(gamma))).abs() <= 1e-12);
    gap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub layers: Vec<u32>,
    pub gamma: Vec<f64>,
    pub rho: Vec<f64>,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.layers.len() || self.rho.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "schedule has {} layers, {} gammas and {} rhos",
                self.layers.len(),
                self.gamma.len(),
                self.rho.len()
            )));
        }
        if self.layers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "pruning layers must be strictly increasing".into(),
            ));
        }
        for &g in &self.gamma {
            check_gamma(g)?;
        }
        if let Some(r) = self.rho.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::param("rho", format!("{r} is outside (0, 1]")));
        }
        Ok(())
    }

    /// Uniform-ratio schedule whose stages, together with a leading
    /// saliency stage, compose to `final_ratio`: every stage keeps
    /// `final_ratio^(1 / (layers + 1))`. Returns `(saliency_rho, schedule)`.
    pub fn geometric(layers: Vec<u32>, gamma: Vec<f64>, final_ratio: f64) -> Result<(f64, Self)> {
        if !(final_ratio > 0.0 && final_ratio <= 1.0) {
            return Err(Error::param(
                "final_ratio",
                format!("{final_ratio} is outside (0, 1]"),
            ));
        }
        let stages = layers.len() + 1;
        let per_stage = final_ratio.powf(1.0 / stages as f64);
        let schedule = Self {
            rho: vec![per_stage; layers.len()],
            layers,
            gamma,
        };
        schedule.validate()?;
        Ok((per_stage, schedule))
    }
}

/// Always-kept text positions plus the retained visual tokens of each frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub layer: u32,
    pub text_tokens: BTreeSet<u32>,
    pub visual_tokens: BTreeMap<u32, Vec<u32>>,
}

impl ActiveSet {
    pub fn visual_count(&self) -> usize {
        self.visual_tokens.values().map(Vec::len).sum()
    }

    /// Sequence positions of the active set under `map`'s layout. Fails if a
    /// retained visual token has no slot in the map.
    pub fn key_positions(&self, map: &AttentionMap) -> Result<Vec<usize>> {
        let mut keys: BTreeSet<usize> = self.text_tokens.iter().map(|&p| p as usize).collect();
        for (&frame, tokens) in &self.visual_tokens {
            for &tok in tokens {
                let pos = map.position_of(frame, tok).ok_or_else(|| {
                    Error::Invariant(format!(
                        "frame {frame} token {tok} missing from layer {} map",
                        map.layer
                    ))
                })?;
                keys.insert(pos);
            }
        }
        Ok(keys.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePruneRecord {
    pub frame_index: u32,
    pub before: usize,
    pub budget: usize,
    pub retained: Vec<u32>,
    pub score_min: f64,
    pub score_max: f64,
    pub score_mean: f64,
}

/// Per frame keeps the `max(1, floor(rho * |V|))` tokens with the highest
/// calibrated score (ties toward the lower token index). `scores` must hold
/// one entry per active frame covering exactly that frame's active tokens.
pub fn prune_layer(
    active: &ActiveSet,
    scores: &BTreeMap<u32, VisualScore>,
    gamma: f64,
    rho: f64,
    layer: u32,
) -> Result<(ActiveSet, Vec<FramePruneRecord>)> {
    check_gamma(gamma)?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param("rho", format!("{rho} is outside (0, 1]")));
    }
    let mut next = BTreeMap::new();
    let mut records = Vec::with_capacity(active.visual_tokens.len());
    for (&frame, tokens) in &active.visual_tokens {
        if tokens.is_empty() {
            return Err(Error::Invariant(format!(
                "frame {frame} reached layer {layer} with no active tokens"
            )));
        }
        let vs = scores
            .get(&frame)
            .ok_or_else(|| Error::Invariant(format!("no scores for active frame {frame}")))?;
        if &vs.tokens != tokens {
            return Err(Error::Invariant(format!(
                "frame {frame}: scores cover {} tokens, active set has {}",
                vs.tokens.len(),
                tokens.len()
            )));
        }
        let calibrated = calibrate(vs, gamma)?;
        let k = stats::retention_budget(rho, tokens.len());
        let keep: Vec<u32> = stats::top_k_indices(&calibrated, k)
            .into_iter()
            .map(|i| tokens[i])
            .collect();
        records.push(FramePruneRecord {
            frame_index: frame,
            before: tokens.len(),
            budget: k,
            retained: keep.clone(),
            score_min: calibrated.iter().copied().fold(f64::INFINITY, f64::min),
            score_max: calibrated.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            score_mean: stats::mean(&calibrated),
        });
        next.insert(frame, keep);
    }
    Ok((
        ActiveSet {
            layer,
            text_tokens: active.text_tokens.clone(),
            visual_tokens: next,
        },
        records,
    ))
}

/// Softmax attention of every query over a chosen subset of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifiedAttention {
    /// Key indices (rows of the key matrix) that took part, ascending.
    pub keys: Vec<usize>,
    /// `n_queries x keys.len()` attention weights.
    pub alpha: DMatrix<f64>,
    /// `n_queries x d_v` outputs.
    pub outputs: DMatrix<f64>,
}

/// Attention restricted to `retained` keys: the softmax denominator runs
/// over the retained set only, so pruned keys and values play no part.
pub fn purified_attention(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
    retained: &[usize],
) -> Result<PurifiedAttention> {
    if retained.is_empty() {
        return Err(Error::Empty("retained key set"));
    }
    if queries.ncols() != keys.ncols() || keys.nrows() != values.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "q {}x{}, k {}x{}, v {}x{}",
            queries.nrows(),
            queries.ncols(),
            keys.nrows(),
            keys.ncols(),
            values.nrows(),
            values.ncols()
        )));
    }
    let mut kept: Vec<usize> = retained.to_vec();
    kept.sort_unstable();
    kept.dedup();
    if let Some(&bad) = kept.iter().find(|&&i| i >= keys.nrows()) {
        return Err(Error::DimensionMismatch(format!(
            "retained key {bad} out of range"
        )));
    }
    let k_sub = keys.select_rows(&kept);
    let v_sub = values.select_rows(&kept);
    let alpha = softmax_scores(queries, &k_sub);
    let outputs = &alpha * v_sub;
    Ok(PurifiedAttention {
        keys: kept,
        alpha,
        outputs,
    })
}

/// Row-wise `softmax(q k^T / sqrt(d_k))`, max-shifted for stability.
pub(crate) fn softmax_scores(queries: &DMatrix<f64>, keys: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = (queries.ncols() as f64).sqrt().recip();
    let mut logits = queries * keys.transpose() * scale;
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}
