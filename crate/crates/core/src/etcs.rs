//! Event-triggered keyframe sampling.
//!
//! Windows are chosen by two cues, the largest activity changes and the
//! largest activity levels, then refined for clustering and coverage and
//! finally mapped to the nearest RGB frames. Every tie breaks toward the
//! earlier window index.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::ActivityProfile;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtcsParams {
    /// Frame budget.
    pub n_target: usize,
    /// Fraction of the budget reserved for the largest activity changes.
    pub delta_share: f64,
    /// Selected windows closer than this (in windows) are candidates for
    /// de-clustering. Zero disables refinement.
    pub min_gap: usize,
    /// Quantile of the flux profile below which a window counts as low-activity.
    pub low_activity_quantile: f64,
}

impl Default for EtcsParams {
    fn default() -> Self {
        Self {
            n_target: 8,
            delta_share: 0.5,
            min_gap: 0,
            low_activity_quantile: 0.25,
        }
    }
}

impl EtcsParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::param("n_target", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.delta_share) {
            return Err(Error::param("delta_share", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.low_activity_quantile) {
            return Err(Error::param("low_activity_quantile", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_index: usize,
    pub window_index: usize,
    pub frame_time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSet {
    /// Sorted by window index; frame indices are then strictly increasing too.
    pub keyframes: Vec<Keyframe>,
    /// True when the profile carried no activity and frames were spaced uniformly.
    pub uniform_fallback: bool,
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn window_indices(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.window_index).collect()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.frame_index).collect()
    }

    /// One `frame_index,window_index,frame_time_us` line per keyframe.
    pub fn to_manifest(&self) -> String {
        self.keyframes
            .iter()
            .map(|k| format!("{},{},{}\n", k.frame_index, k.window_index, k.frame_time))
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut keyframes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::MalformedRecord {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad("expected frame_index,window_index,frame_time_us"));
            }
            keyframes.push(Keyframe {
                frame_index: fields[0].parse().map_err(|_| bad("bad frame index"))?,
                window_index: fields[1].parse().map_err(|_| bad("bad window index"))?,
                frame_time: fields[2].parse().map_err(|_| bad("bad frame time"))?,
            });
        }
        Ok(Self {
            keyframes,
            uniform_fallback: false,
        })
    }
}

fn by_flux(profile: &ActivityProfile) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| match profile.flux[b].cmp(&profile.flux[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

fn by_delta(profile: &ActivityProfile) -> Vec<usize> {
    let mut order: Vec<usize> = (1..profile.len()).collect();
    order.sort_by(
        |&a, &b| match profile.deltas[b - 1].cmp(&profile.deltas[a - 1]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        },
    );
    order
}

/// Pre-refinement selection: the `ceil(delta_share * n_target)` windows with
/// the largest change, then the largest-flux windows not yet chosen.
pub fn preselect(profile: &ActivityProfile, params: &EtcsParams) -> Vec<usize> {
    let budget = params.n_target.min(profile.len());
    let n_delta = ((params.delta_share * params.n_target as f64).ceil() as usize).min(budget);
    let mut chosen: BTreeSet<usize> = by_delta(profile).into_iter().take(n_delta).collect();
    for w in by_flux(profile) {
        if chosen.len() >= budget {
            break;
        }
        chosen.insert(w);
    }
    chosen.into_iter().collect()
}

/// De-clusters low-activity picks and fills coverage gaps. Returns the
/// refined selection and the windows dropped along the way.
pub fn refine(
    profile: &ActivityProfile,
    params: &EtcsParams,
    selected: &[usize],
) -> (Vec<usize>, BTreeSet<usize>) {
    let mut current: BTreeSet<usize> = selected.iter().copied().collect();
    let mut dropped = BTreeSet::new();
    if params.min_gap == 0 || current.len() < 2 {
        return (current.into_iter().collect(), dropped);
    }
    let flux: Vec<f64> = profile.flux.iter().map(|&s| s as f64).collect();
    let low = stats::quantile(&flux, params.low_activity_quantile);
    let is_low = |w: usize| (profile.flux[w] as f64) < low;

    for _ in 0..params.n_target {
        let sorted: Vec<usize> = current.iter().copied().collect();
        let Some((a, b)) = sorted
            .windows(2)
            .map(|p| (p[0], p[1]))
            .find(|&(a, b)| b - a < params.min_gap && (is_low(a) || is_low(b)))
        else {
            break;
        };
        // Keep the busier window; on equal flux keep the earlier one.
        let victim = if profile.flux[b] <= profile.flux[a] {
            b
        } else {
            a
        };
        current.remove(&victim);
        dropped.insert(victim);

        let sorted: Vec<usize> = current.iter().copied().collect();
        let mut best: Option<(usize, usize)> = None;
        for p in sorted.windows(2) {
            let gap = p[1] - p[0];
            if gap >= 2 && best.is_none_or(|(g, _)| gap > g) {
                best = Some((gap, p[0] + gap / 2));
            }
        }
        if let Some((_, mid)) = best {
            if !dropped.contains(&mid) {
                current.insert(mid);
            }
        }
    }
    (current.into_iter().collect(), dropped)
}

/// Index of the frame whose time is nearest to `t`; ties go to the earlier frame.
pub fn nearest_frame(frame_times: &[u64], t: u64) -> usize {
    let i = frame_times.partition_point(|&ft| ft < t);
    if i == 0 {
        return 0;
    }
    if i == frame_times.len() {
        return frame_times.len() - 1;
    }
    if t - frame_times[i - 1] <= frame_times[i] - t {
        i - 1
    } else {
        i
    }
}

pub fn select_keyframes(
    profile: &ActivityProfile,
    params: &EtcsParams,
    frame_times: &[u64],
) -> Result<KeyframeSet> {
    params.validate()?;
    validate_inputs(profile, frame_times)?;
    if profile.total() == 0 {
        return uniform_keyframes(profile, params.n_target, frame_times);
    }
    let pre = preselect(profile, params);
    let (refined, dropped) = refine(profile, params, &pre);
    let keyframes = anchor(profile, params.n_target, frame_times, &refined, &dropped);
    Ok(KeyframeSet {
        keyframes,
        uniform_fallback: false,
    })
}

/// Evenly spaced windows, used when the stream carries no activity.
pub fn uniform_keyframes(
    profile: &ActivityProfile,
    n_target: usize,
    frame_times: &[u64],
) -> Result<KeyframeSet> {
    validate_inputs(profile, frame_times)?;
    if n_target == 0 {
        return Err(Error::param("n_target", "must be at least 1"));
    }
    let w = profile.len();
    let n = n_target.min(w);
    let windows: Vec<usize> = (0..n).map(|i| (2 * i + 1) * w / (2 * n)).collect();
    let keyframes = anchor(profile, n_target, frame_times, &windows, &BTreeSet::new());
    Ok(KeyframeSet {
        keyframes,
        uniform_fallback: true,
    })
}

fn validate_inputs(profile: &ActivityProfile, frame_times: &[u64]) -> Result<()> {
    if profile.is_empty() {
        return Err(Error::Empty("activity profile has no windows"));
    }
    if frame_times.is_empty() {
        return Err(Error::Empty("no frame times"));
    }
    if frame_times.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::param("frame_times", "must be strictly increasing"));
    }
    Ok(())
}

/// Maps windows to their nearest frames, dropping duplicates and backfilling
/// from the best remaining windows until the budget is met or windows run out.
fn anchor(
    profile: &ActivityProfile,
    n_target: usize,
    frame_times: &[u64],
    windows: &[usize],
    dropped: &BTreeSet<usize>,
) -> Vec<Keyframe> {
    let target = n_target.min(profile.len());
    let mut used_frames = BTreeSet::new();
    let mut used_windows = BTreeSet::new();
    let mut out = Vec::with_capacity(target);
    let mut take = |w: usize, out: &mut Vec<Keyframe>| {
        if !used_windows.insert(w) {
            return;
        }
        let f = nearest_frame(frame_times, profile.windowing.window_midpoint(w));
        if used_frames.insert(f) {
            out.push(Keyframe {
                frame_index: f,
                window_index: w,
                frame_time: frame_times[f],
            });
        }
    };
    for &w in windows {
        if out.len() >= target {
            break;
        }
        take(w, &mut out);
    }
    if out.len() < target {
        let mut backfill = by_flux(profile);
        backfill.sort_by_key(|w| dropped.contains(w));
        for w in backfill {
            if out.len() >= target {
                break;
            }
            take(w, &mut out);
        }
    }
    out.sort_by_key(|k| k.window_index);
    out
}
