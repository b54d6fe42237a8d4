//! End-to-end cascade: events, keyframe sampling, saliency filtering,
//! layer-wise pruning and the cost report, with every intermediate written
//! to the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::attention_sim::{synth_biased_map, SynthLayout};
use crate::bias::partition_regions;
use crate::config::{AttentionSourceKind, PipelineConfig, ResolvedRetention};
use crate::earf::{attention_readout, prune_layer, ActiveSet, FramePruneRecord, VisualScore};
use crate::emsf::{retain_topk, token_saliency, RetainedSet, SaliencyMap, TokenGridSpec};
use crate::error::{Error, Result};
use crate::esim::{load_frame_sequence, read_timestamps, simulate_events};
use crate::etcs::{select_keyframes, KeyframeSet};
use crate::event::{
    activity_flux, density_filter, read_events_file, write_events_binary, ActivityProfile,
    DensityFilterParams, EventStream, WindowingParams,
};
use crate::flops::{cascade_counts, flops_model, EfficiencyReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLayerReport {
    pub layer: u32,
    pub gamma: f64,
    pub rho: f64,
    /// Layer whose attention supplied the importance signal.
    pub attention_layer: u32,
    pub frames: Vec<FramePruneRecord>,
}

/// Token bookkeeping across the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub tokens_per_frame: usize,
    pub frames: Vec<u32>,
    pub emsf_rho: f64,
    pub emsf: Vec<RetainedSet>,
    pub layers: Vec<PruneLayerReport>,
    /// Visual tokens alive after the last stage, per frame.
    pub final_tokens: BTreeMap<u32, Vec<u32>>,
    pub requested_final_ratio: f64,
    pub achieved_final_ratio: f64,
}

impl PruneResult {
    /// `stage,layer,frame,before,budget,retained`, one row per frame and stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,layer,frame,before,budget,retained\n");
        for r in &self.emsf {
            out.push_str(&format!(
                "emsf,,{},{},{},{}\n",
                r.frame_index,
                self.tokens_per_frame,
                r.budget_k,
                r.indices.len()
            ));
        }
        for l in &self.layers {
            for f in &l.frames {
                out.push_str(&format!(
                    "earf,{},{},{},{},{}\n",
                    l.layer,
                    f.frame_index,
                    f.before,
                    f.budget,
                    f.retained.len()
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub keyframes: KeyframeSet,
    pub saliency: Vec<SaliencyMap>,
    pub prune: PruneResult,
    pub efficiency: EfficiencyReport,
    pub retention: ResolvedRetention,
    pub warnings: Vec<String>,
}

struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }
}

struct StageClock {
    times: Vec<(String, Duration)>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            started: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        let d = now - self.started;
        info!("stage {stage}: {:.3} ms", d.as_secs_f64() * 1e3);
        self.times.push((stage.to_string(), d));
        self.started = now;
    }
}

/// Warnings for a requested final ratio that the one-token floors cannot
/// reach on frames of `n_tokens` tokens.
pub fn retention_warnings(
    retention: &ResolvedRetention,
    n_tokens: usize,
    n_layers: usize,
) -> Vec<String> {
    let mut out = Vec::new();
    if n_tokens == 0 {
        return out;
    }
    let counts = cascade_counts(
        n_tokens,
        retention.emsf_rho,
        &retention.schedule,
        n_layers.max(1),
    );
    let last = *counts.last().expect("at least one layer");
    let achieved = last as f64 / n_tokens as f64;
    if retention.final_ratio * (n_tokens as f64) < 1.0 {
        out.push(format!(
            "final ratio {} is below one token of {n_tokens}; the floor keeps {last}",
            retention.final_ratio
        ));
    } else if achieved > retention.final_ratio + 1e-12 {
        out.push(format!(
            "final ratio {} unreachable with one-token floors; cascade keeps {last}/{n_tokens} = {achieved}",
            retention.final_ratio
        ));
    }
    out
}

fn frame_times_for(config: &PipelineConfig, stream: &EventStream) -> Result<Vec<u64>> {
    if let Some(frames) = &config.frames {
        let path = frames.timestamps_path();
        return read_timestamps(&path)
            .map_err(|e| e.in_stage("ingest", path.display().to_string()));
    }
    let (a, b) = (stream.t_start(), stream.t_end());
    let step = config.frame_interval_us;
    Ok((0..)
        .map(|k| a + k * step)
        .take_while(|&t| t <= b)
        .collect())
}

/// Event stream plus the frame times keyframes anchor to. The stream's span
/// is widened to cover every frame time.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub stream: EventStream,
    pub frame_times: Vec<u64>,
    /// True when the events were simulated from the frame directory.
    pub simulated: bool,
}

/// Reads `config.events`, or simulates events from `config.frames` when no
/// event file is given.
pub fn load_inputs(config: &PipelineConfig) -> Result<Inputs> {
    let (stream, simulated) = match (&config.events, &config.frames) {
        (Some(src), _) => {
            let dims = match (src.width, src.height) {
                (Some(w), Some(h)) => Some((w, h)),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "events.width and events.height must be given together".into(),
                    ))
                }
            };
            let stream = read_events_file(&src.path, src.format, dims)
                .map_err(|e| e.in_stage("ingest", src.path.display().to_string()))?;
            (stream, false)
        }
        (None, Some(frames)) => {
            let seq = load_frame_sequence(&frames.dir, &frames.timestamps_path())
                .map_err(|e| e.in_stage("esim", frames.dir.display().to_string()))?;
            let stream = simulate_events(&seq, &config.esim)
                .map_err(|e| e.in_stage("esim", frames.dir.display().to_string()))?;
            (stream, true)
        }
        (None, None) => {
            return Err(Error::Config(
                "either `events` or `frames` must be given".into(),
            ))
        }
    };
    let frame_times = frame_times_for(config, &stream)?;
    let (&first, &last) = match (frame_times.first(), frame_times.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Empty("no frame times").in_stage("ingest", "frame timestamps")),
    };
    let (lo, hi) = if stream.is_empty() {
        (first, last)
    } else {
        (stream.t_start().min(first), stream.t_end().max(last))
    };
    let stream = stream
        .with_span(lo, hi)
        .map_err(|e| e.in_stage("ingest", "frame timestamps"))?;
    Ok(Inputs {
        stream,
        frame_times,
        simulated,
    })
}

pub fn windowing_for(config: &PipelineConfig, stream: &EventStream) -> Result<WindowingParams> {
    let origin = config.windowing.origin_us.unwrap_or(stream.t_start());
    WindowingParams::new(config.windowing.delta_t_us, origin)
}

enum AttentionSource {
    Synthetic { layout: SynthLayout },
    Files { maps: BTreeMap<u32, AttentionMap> },
}

impl AttentionSource {
    fn open(config: &PipelineConfig, frames: &[u32], layers: &BTreeSet<u32>) -> Result<Self> {
        match config.attention.source {
            AttentionSourceKind::Synthetic => Ok(Self::Synthetic {
                layout: SynthLayout {
                    frames: frames.to_vec(),
                    n_text: config.attention.n_text,
                    ..SynthLayout::default()
                },
            }),
            AttentionSourceKind::Files => {
                let pattern = config.attention.glob.as_deref().unwrap_or_default();
                let paths = glob::glob(pattern)
                    .map_err(|e| Error::Config(format!("attention.glob: {e}")))?;
                let mut maps = BTreeMap::new();
                for entry in paths {
                    let path = entry.map_err(|e| Error::io(e.path().to_path_buf(), e.into()))?;
                    let map = AttentionMap::read(&path)?;
                    if layers.contains(&map.layer) && maps.insert(map.layer, map).is_some() {
                        return Err(Error::Format(format!(
                            "two attention files for one layer under {pattern}"
                        )));
                    }
                }
                Ok(Self::Files { maps })
            }
        }
    }

    fn map_for(&self, config: &PipelineConfig, layer: u32) -> Result<AttentionMap> {
        match self {
            Self::Synthetic { layout } => {
                let partition = partition_regions(
                    config.grid.rows,
                    config.grid.cols,
                    config.attention.margin_fraction,
                )?;
                synth_biased_map(
                    &partition,
                    &config.attention.synthetic,
                    layout,
                    layer,
                    config.seed,
                )
            }
            Self::Files { maps } => maps
                .get(&layer)
                .cloned()
                .ok_or_else(|| Error::Format(format!("no attention map for layer {layer}"))),
        }
    }
}

fn visual_scores(
    map: &AttentionMap,
    active: &ActiveSet,
    saliency: &BTreeMap<u32, &SaliencyMap>,
    config: &PipelineConfig,
) -> Result<BTreeMap<u32, VisualScore>> {
    let selection = config.attention.query;
    active
        .visual_tokens
        .par_iter()
        .map(|(&frame, tokens)| {
            let fa = attention_readout(map, frame, selection)?;
            let sal = saliency[&frame];
            let mut attention = Vec::with_capacity(tokens.len());
            let mut event = Vec::with_capacity(tokens.len());
            for &tok in tokens {
                let i = fa.tokens.binary_search(&tok).map_err(|_| {
                    Error::Format(format!(
                        "layer {} map has no slot for frame {frame} token {tok}",
                        map.layer
                    ))
                })?;
                attention.push(fa.scores[i]);
                event.push(sal.saliency[tok as usize]);
            }
            Ok((
                frame,
                VisualScore {
                    frame_index: frame,
                    tokens: tokens.clone(),
                    attention,
                    event,
                },
            ))
        })
        .collect()
}

fn token_mask(n_tokens: usize, kept: &[u32]) -> Vec<u8> {
    let mut mask = vec![0u8; n_tokens];
    for &t in kept {
        mask[t as usize] = 1;
    }
    mask
}

/// Saliency over each keyframe's window of the (already filtered) stream,
/// then top-K retention at `rho`.
pub fn emsf_stage(
    filtered: &EventStream,
    grid: &TokenGridSpec,
    windowing: &WindowingParams,
    keyframes: &KeyframeSet,
    rho: f64,
) -> Result<(Vec<SaliencyMap>, Vec<RetainedSet>)> {
    let identity = DensityFilterParams::identity();
    let stage: Vec<(SaliencyMap, RetainedSet)> = keyframes
        .keyframes
        .par_iter()
        .map(|kf| {
            let window = (
                windowing.window_start(kf.window_index),
                windowing.window_end(kf.window_index),
            );
            let map = token_saliency(filtered, grid, window, &identity, kf.frame_index as u32)?;
            let kept = retain_topk(&map, rho)?;
            Ok((map, kept))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("emsf", "keyframe windows"))?;
    Ok(stage.into_iter().unzip())
}

/// Layer-wise pruning of the saliency-retained tokens. Also returns the
/// synthetic attention maps it generated (empty for file-backed attention).
pub fn earf_stage(
    config: &PipelineConfig,
    retention: &ResolvedRetention,
    saliency: &[SaliencyMap],
    emsf: &[RetainedSet],
) -> Result<(PruneResult, Vec<AttentionMap>)> {
    let n_tokens = saliency.first().map_or(0, |m| m.len());
    let frames: Vec<u32> = emsf.iter().map(|r| r.frame_index).collect();
    let needed: BTreeSet<u32> = retention.schedule.layers.iter().map(|&l| l - 1).collect();
    let source = AttentionSource::open(config, &frames, &needed)?;
    let by_frame: BTreeMap<u32, &SaliencyMap> =
        saliency.iter().map(|m| (m.frame_index, m)).collect();
    if let Some(r) = emsf.iter().find(|r| !by_frame.contains_key(&r.frame_index)) {
        return Err(Error::Invariant(format!(
            "no saliency map for frame {}",
            r.frame_index
        )));
    }
    let mut active = ActiveSet {
        layer: 0,
        text_tokens: BTreeSet::new(),
        visual_tokens: emsf
            .iter()
            .map(|r| (r.frame_index, r.indices.iter().map(|&i| i as u32).collect()))
            .collect(),
    };
    let mut layers = Vec::with_capacity(retention.schedule.layers.len());
    let mut generated = Vec::new();
    let sched = &retention.schedule;
    for ((&layer, &gamma), &rho) in sched.layers.iter().zip(&sched.gamma).zip(&sched.rho) {
        let attention_layer = layer - 1;
        let map = source
            .map_for(config, attention_layer)
            .map_err(|e| e.in_stage("earf", format!("attention layer {attention_layer}")))?;
        active.text_tokens = map.text_positions().into_iter().map(|p| p as u32).collect();
        let scores = visual_scores(&map, &active, &by_frame, config)
            .map_err(|e| e.in_stage("earf", format!("attention layer {attention_layer}")))?;
        let (next, records) = prune_layer(&active, &scores, gamma, rho, layer)
            .map_err(|e| e.in_stage("earf", format!("layer {layer}")))?;
        layers.push(PruneLayerReport {
            layer,
            gamma,
            rho,
            attention_layer,
            frames: records,
        });
        if let AttentionSource::Synthetic { .. } = source {
            generated.push(map);
        }
        active = next;
    }
    let kept_total = active.visual_count();
    let full_total = n_tokens * frames.len();
    let prune = PruneResult {
        tokens_per_frame: n_tokens,
        frames,
        emsf_rho: retention.emsf_rho,
        emsf: emsf.to_vec(),
        layers,
        final_tokens: active.visual_tokens,
        requested_final_ratio: retention.final_ratio,
        achieved_final_ratio: if full_total == 0 {
            1.0
        } else {
            kept_total as f64 / full_total as f64
        },
    };
    Ok((prune, generated))
}

impl PruneResult {
    /// Total visual tokens entering each of `n_layers` layers: the
    /// saliency-retained count until the first pruning layer, then the count
    /// left by the latest pruning layer at or below it.
    pub fn layer_counts(&self, n_layers: usize) -> Vec<u64> {
        let emsf_total: u64 = self.emsf.iter().map(|r| r.indices.len() as u64).sum();
        (0..n_layers)
            .map(|l| {
                self.layers
                    .iter()
                    .rev()
                    .find(|r| r.layer as usize <= l)
                    .map(|r| r.frames.iter().map(|f| f.retained.len() as u64).sum())
                    .unwrap_or(emsf_total)
            })
            .collect()
    }

    pub fn masks(&self) -> impl Iterator<Item = (u32, Vec<u8>)> + '_ {
        self.final_tokens
            .iter()
            .map(|(&frame, kept)| (frame, token_mask(self.tokens_per_frame, kept)))
    }
}

pub fn efficiency_for(prune: &PruneResult, n_layers: usize, d_k: u64) -> Result<EfficiencyReport> {
    let full_total = (prune.tokens_per_frame * prune.frames.len()) as u64;
    flops_model(
        &vec![full_total; n_layers],
        &prune.layer_counts(n_layers),
        d_k,
    )
}

/// Runs the cascade and writes its artifacts under `config.output_dir`.
/// Callers choose the thread pool; results do not depend on it.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let retention = config.resolve_retention()?;
    let artifacts = Artifacts::create(&config.output_dir)?;
    // The output location is left out so identical runs into different
    // directories produce identical files.
    let mut resolved = serde_json::to_value(config)?;
    if let Some(obj) = resolved.as_object_mut() {
        obj.remove("output_dir");
    }
    artifacts.json("config.resolved.json", &resolved)?;
    let mut clock = StageClock::new();

    let Inputs {
        stream,
        frame_times,
        simulated,
    } = load_inputs(config)?;
    if simulated {
        artifacts.write("events.bin", write_events_binary(&stream))?;
    }
    clock.lap("ingest");

    let windowing = windowing_for(config, &stream)?;
    let filtered = density_filter(&stream, &config.density_filter);
    let profile: ActivityProfile =
        activity_flux(&filtered, &windowing, &DensityFilterParams::identity())
            .map_err(|e| e.in_stage("activity", "event stream"))?;
    artifacts.write("activity.csv", profile.to_csv())?;
    artifacts.json("activity.json", &profile)?;
    clock.lap("activity");

    let keyframes = select_keyframes(&profile, &config.etcs, &frame_times)
        .map_err(|e| e.in_stage("etcs", "activity profile"))?;
    if keyframes.uniform_fallback {
        warn!("no event activity; keyframes sampled uniformly");
    }
    artifacts.write("keyframes.csv", keyframes.to_manifest())?;
    artifacts.json("keyframes.json", &keyframes)?;
    clock.lap("etcs");

    let grid = TokenGridSpec::new(
        config.grid.rows,
        config.grid.cols,
        stream.width(),
        stream.height(),
    )
    .map_err(|e| e.in_stage("emsf", "token grid"))?;
    let (saliency, emsf) =
        emsf_stage(&filtered, &grid, &windowing, &keyframes, retention.emsf_rho)?;
    for m in &saliency {
        artifacts.write(&format!("saliency_f{:05}.csv", m.frame_index), m.to_csv())?;
        artifacts.write(
            &format!("saliency_f{:05}.bin", m.frame_index),
            m.to_binary(),
        )?;
    }
    artifacts.json("emsf_retained.json", &emsf)?;
    clock.lap("emsf");

    let (prune, generated) = earf_stage(config, &retention, &saliency, &emsf)?;
    for map in &generated {
        artifacts.write(&format!("attention_l{:02}.bin", map.layer), map.to_bytes())?;
    }
    for (frame, mask) in prune.masks() {
        artifacts.write(&format!("mask_f{frame:05}.bin"), mask)?;
    }
    artifacts.json("prune_result.json", &prune)?;
    artifacts.write("prune_result.csv", prune.to_csv())?;
    clock.lap("earf");

    let n_layers = config.model.n_layers;
    let mut efficiency = efficiency_for(&prune, n_layers, config.model.d_k)
        .map_err(|e| e.in_stage("flops", "token counts"))?;
    artifacts.json("efficiency.json", &efficiency)?;
    artifacts.write("efficiency.csv", efficiency.to_csv())?;
    clock.lap("flops");
    efficiency.stage_times = clock.times;

    let warnings = retention_warnings(&retention, grid.n_tokens(), n_layers);
    for w in &warnings {
        warn!("{w}");
    }
    Ok(PipelineOutcome {
        keyframes,
        saliency,
        prune,
        efficiency,
        retention,
        warnings,
    })
}
