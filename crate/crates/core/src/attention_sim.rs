//! Synthetic attention: peripheral-bias fixtures on a token grid and exact
//! softmax attention on small random tensors.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded via
//! `seed_from_u64`, with the layer index selecting the stream, so fixtures
//! are reproducible across platforms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, VisualSlot};
use crate::bias::RegionPartition;
use crate::earf::softmax_scores;
use crate::error::{Error, Result};

/// Per-layer peripheral-to-center ratios measured on a 28-layer
/// video-language model; the default bias profile for synthetic maps.
pub const REFERENCE_PERIPHERAL_PROFILE: [f64; 28] = [
    2.41, 2.31, 2.48, 3.75, 3.05, 4.66, 2.18, 5.92, 5.26, 9.53, 4.89, 5.89, 4.95, 4.31, 5.82, 3.87,
    6.25, 4.20, 2.33, 2.57, 2.84, 3.23, 3.64, 2.92, 2.11, 2.72, 2.47, 2.44,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasProfile {
    /// Peripheral multiplier per layer; layers past the end reuse the last value.
    pub multipliers: Vec<f64>,
    /// Half-width of the additive uniform noise on each visual mass.
    pub noise_scale: f64,
}

impl Default for BiasProfile {
    fn default() -> Self {
        Self {
            multipliers: REFERENCE_PERIPHERAL_PROFILE.to_vec(),
            noise_scale: 0.25,
        }
    }
}

impl BiasProfile {
    pub fn multiplier(&self, layer: u32) -> f64 {
        let i = (layer as usize).min(self.multipliers.len().saturating_sub(1));
        self.multipliers.get(i).copied().unwrap_or(1.0)
    }
}

/// Token layout of a synthetic map: one `partition`-shaped grid per frame,
/// followed by `n_text` text tokens that also act as the scoring queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    pub frames: Vec<u32>,
    pub n_text: usize,
    /// Unnormalized mass each text column receives.
    pub text_mass: f64,
}

impl Default for SynthLayout {
    fn default() -> Self {
        Self {
            frames: vec![0],
            n_text: 4,
            text_mass: 1.0,
        }
    }
}

/// Builds a map where center tokens get base mass 1 and peripheral tokens
/// get `multiplier`, each perturbed by `U(-noise, noise)` and clipped at 0,
/// then every row is normalized to sum to 1.
pub fn synth_biased_map(
    partition: &RegionPartition,
    profile: &BiasProfile,
    layout: &SynthLayout,
    layer: u32,
    seed: u64,
) -> Result<AttentionMap> {
    let m = profile.multiplier(layer);
    if !(m >= 0.0) {
        return Err(Error::param("multiplier", format!("{m} must be >= 0")));
    }
    if layout.n_text == 0 {
        return Err(Error::param(
            "n_text",
            "at least one text query is required",
        ));
    }
    let per_frame = partition.n_tokens();
    let n_visual = per_frame * layout.frames.len();
    let n_tokens = n_visual + layout.n_text;
    let peripheral = partition.peripheral();
    let base: Vec<f64> = (0..per_frame)
        .map(|i| if peripheral.contains(&i) { m } else { 1.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(layer));
    let rows = (0..layout.n_text)
        .map(|_| {
            let mut row: Vec<f64> = Vec::with_capacity(n_tokens);
            for _ in &layout.frames {
                for &b in &base {
                    let noise = if profile.noise_scale > 0.0 {
                        rng.gen_range(-profile.noise_scale..=profile.noise_scale)
                    } else {
                        0.0
                    };
                    row.push((b + noise).max(0.0));
                }
            }
            row.extend(std::iter::repeat_n(layout.text_mass, layout.n_text));
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            row
        })
        .collect();
    let visual_index = layout
        .frames
        .iter()
        .enumerate()
        .flat_map(|(f, &frame)| {
            (0..per_frame).map(move |t| VisualSlot {
                position: (f * per_frame + t) as u32,
                frame_index: frame,
                token_index: t as u32,
            })
        })
        .collect();
    AttentionMap::new(
        layer,
        n_tokens,
        rows,
        (n_visual..n_tokens).collect(),
        visual_index,
    )
}

/// Exact softmax attention and its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyAttention {
    pub alpha: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
}

pub fn tiny_attention(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
) -> Result<TinyAttention> {
    if queries.ncols() == 0
        || queries.ncols() != keys.ncols()
        || keys.nrows() != values.nrows()
        || keys.nrows() == 0
    {
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
    let alpha = softmax_scores(queries, keys);
    let outputs = &alpha * values;
    Ok(TinyAttention { alpha, outputs })
}

/// Random `(queries, keys, values)` with entries in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub queries: DMatrix<f64>,
    pub keys: DMatrix<f64>,
    pub values: DMatrix<f64>,
}

impl TinyInstance {
    pub fn random(n_queries: usize, n_keys: usize, d_k: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        Self {
            queries: mat(n_queries, d_k),
            keys: mat(n_keys, d_k),
            values: mat(n_keys, d_v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::{partition_regions, peripheral_ratio};
    use crate::earf::attention_readout;
    use crate::QuerySelection;

    fn ratio_for(m: f64, noise: f64) -> f64 {
        let part = partition_regions(12, 18, 0.15).unwrap();
        let profile = BiasProfile {
            multipliers: vec![m],
            noise_scale: noise,
        };
        let map = synth_biased_map(&part, &profile, &SynthLayout::default(), 0, 1).unwrap();
        let fa = attention_readout(&map, 0, QuerySelection::AllText).unwrap();
        peripheral_ratio(&fa.scores, &part).unwrap()
    }

    #[test]
    fn noiseless_maps_carry_the_multiplier() {
        assert!((ratio_for(1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((ratio_for(5.64, 0.0) - 5.64).abs() < 1e-9);
    }

    #[test]
    fn rows_are_normalized_and_seeded() {
        let part = partition_regions(6, 6, 0.2).unwrap();
        let layout = SynthLayout {
            frames: vec![3, 9],
            n_text: 3,
            text_mass: 2.0,
        };
        let a = synth_biased_map(&part, &BiasProfile::default(), &layout, 5, 42).unwrap();
        let b = synth_biased_map(&part, &BiasProfile::default(), &layout, 5, 42).unwrap();
        let c = synth_biased_map(&part, &BiasProfile::default(), &layout, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rows, c.rows);
        for row in &a.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(a.n_tokens, 2 * 36 + 3);
    }

    #[test]
    fn single_key_and_identical_keys() {
        let q = DMatrix::from_row_slice(1, 2, &[0.4, -0.2]);
        let k = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let v = DMatrix::from_row_slice(1, 3, &[7.0, 8.0, 9.0]);
        let out = tiny_attention(&q, &k, &v).unwrap();
        assert_eq!(out.alpha[(0, 0)], 1.0);
        assert_eq!(out.outputs, v);

        let k = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let v = DMatrix::from_fn(4, 1, |r, _| r as f64);
        let out = tiny_attention(&q, &k, &v).unwrap();
        for c in 0..4 {
            assert!((out.alpha[(0, c)] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let q = DMatrix::zeros(2, 3);
        let k = DMatrix::zeros(4, 2);
        let v = DMatrix::zeros(4, 1);
        assert!(tiny_attention(&q, &k, &v).is_err());
    }
}
