use std::fs;
use std::path::{Path, PathBuf};

use ecp_core::attention_sim::{synth_biased_map, SynthLayout, REFERENCE_PERIPHERAL_PROFILE};
use ecp_core::bias::{
    bias_stats, distribution_diagnostics, partition_regions, profile_correlation, region_ratios,
    BiasStats,
};
use ecp_core::config::{AttentionSourceKind, FrameSourceConfig, PipelineConfig};
use ecp_core::earf::attention_readout;
use ecp_core::emsf::{retain_topk, RetainedSet, SaliencyMap, TokenGridSpec};
use ecp_core::esim::{load_frame_sequence, simulate_events};
use ecp_core::etcs::{select_keyframes, KeyframeSet};
use ecp_core::event::{
    activity_flux, density_filter, write_events_binary, write_events_csv, EventFormat,
};
use ecp_core::flops::{cascade_counts, flops_model};
use ecp_core::pipeline::{earf_stage, emsf_stage, load_inputs, run_pipeline, windowing_for};
use ecp_core::{AttentionMap, Error, Result};
use serde::Serialize;

use crate::Command;

struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }
}

pub fn dispatch(command: &Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::SimulateEvents {
            frames,
            timestamps,
            c_pos,
            c_neg,
            t_ref,
            format,
        } => {
            let src = FrameSourceConfig {
                dir: frames.clone(),
                timestamps: timestamps.clone(),
            };
            cfg.esim.c_pos = c_pos.unwrap_or(cfg.esim.c_pos);
            cfg.esim.c_neg = c_neg.unwrap_or(cfg.esim.c_neg);
            cfg.esim.t_ref = t_ref.unwrap_or(cfg.esim.t_ref);
            let seq = load_frame_sequence(&src.dir, &src.timestamps_path())?;
            let stream = simulate_events(&seq, &cfg.esim)?;
            let out = Out::new(&cfg.output_dir)?;
            let name = match format {
                EventFormat::PackedBinary => {
                    out.write("events.bin", write_events_binary(&stream))?;
                    "events.bin"
                }
                EventFormat::TextCsv => {
                    out.write("events.csv", write_events_csv(&stream))?;
                    "events.csv"
                }
            };
            println!(
                "{} events from {} frames -> {}",
                stream.len(),
                seq.len(),
                cfg.output_dir.join(name).display()
            );
            Ok(())
        }
        Command::Sample {
            input,
            delta_t,
            n_target,
        } => {
            input.apply(&mut cfg);
            cfg.windowing.delta_t_us = delta_t.unwrap_or(cfg.windowing.delta_t_us);
            cfg.etcs.n_target = n_target.unwrap_or(cfg.etcs.n_target);
            cfg.validate()?;
            let out = Out::new(&cfg.output_dir)?;
            let keyframes = sample(&cfg, &out)?;
            println!(
                "{} keyframes{}: frames {:?}",
                keyframes.len(),
                if keyframes.uniform_fallback {
                    " (uniform fallback)"
                } else {
                    ""
                },
                keyframes.frame_indices()
            );
            Ok(())
        }
        Command::Saliency {
            input,
            keyframes,
            rho,
        } => {
            input.apply(&mut cfg);
            cfg.validate()?;
            let rho = match rho {
                Some(r) => *r,
                None => cfg.resolve_retention()?.emsf_rho,
            };
            let out = Out::new(&cfg.output_dir)?;
            let inputs = load_inputs(&cfg)?;
            let keyframes = match keyframes {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    KeyframeSet::from_manifest(&text)?
                }
                None => sample(&cfg, &out)?,
            };
            let windowing = windowing_for(&cfg, &inputs.stream)?;
            let filtered = density_filter(&inputs.stream, &cfg.density_filter);
            let grid = TokenGridSpec::new(
                cfg.grid.rows,
                cfg.grid.cols,
                inputs.stream.width(),
                inputs.stream.height(),
            )?;
            let (maps, kept) = emsf_stage(&filtered, &grid, &windowing, &keyframes, rho)?;
            write_saliency(&out, &maps, &kept)?;
            println!(
                "{} saliency maps, {} of {} tokens kept per frame",
                maps.len(),
                kept.first().map_or(0, |k| k.budget_k),
                grid.n_tokens()
            );
            Ok(())
        }
        Command::Prune {
            saliency_dir,
            attention,
            query,
        } => {
            if let Some(glob) = attention {
                cfg.attention.source = AttentionSourceKind::Files;
                cfg.attention.glob = Some(glob.clone());
            }
            cfg.attention.query = query.unwrap_or(cfg.attention.query);
            let retention = cfg.resolve_retention()?;
            let maps = read_saliency_dir(saliency_dir)?;
            let kept: Vec<RetainedSet> = maps
                .iter()
                .map(|m| retain_topk(m, retention.emsf_rho))
                .collect::<Result<_>>()?;
            let (prune, generated) = earf_stage(&cfg, &retention, &maps, &kept)?;
            let out = Out::new(&cfg.output_dir)?;
            for map in &generated {
                out.write(&format!("attention_l{:02}.bin", map.layer), map.to_bytes())?;
            }
            for (frame, mask) in prune.masks() {
                out.write(&format!("mask_f{frame:05}.bin"), mask)?;
            }
            out.json("prune_result.json", &prune)?;
            out.write("prune_result.csv", prune.to_csv())?;
            println!(
                "{} frames pruned to ratio {:.4} (requested {:.4})",
                prune.frames.len(),
                prune.achieved_final_ratio,
                prune.requested_final_ratio
            );
            Ok(())
        }
        Command::AnalyzeBias {
            attention,
            margin,
            mu0,
            reference,
            query,
        } => analyze_bias(
            &cfg,
            attention,
            margin.unwrap_or(cfg.attention.margin_fraction),
            *mu0,
            *reference,
            query.unwrap_or(cfg.attention.query),
        ),
        Command::SynthAttn {
            layers,
            frames,
            noise,
        } => {
            let partition =
                partition_regions(cfg.grid.rows, cfg.grid.cols, cfg.attention.margin_fraction)?;
            let mut profile = cfg.attention.synthetic.clone();
            profile.noise_scale = noise.unwrap_or(profile.noise_scale);
            let layout = SynthLayout {
                frames: (0..frames.unwrap_or(cfg.etcs.n_target as u32)).collect(),
                n_text: cfg.attention.n_text,
                ..SynthLayout::default()
            };
            let n_layers = layers.unwrap_or(cfg.model.n_layers as u32);
            let out = Out::new(&cfg.output_dir)?;
            for layer in 0..n_layers {
                let map = synth_biased_map(&partition, &profile, &layout, layer, cfg.seed)?;
                out.write(&format!("attention_l{layer:02}.bin"), map.to_bytes())?;
            }
            println!("{n_layers} synthetic maps in {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Flops {
            counts,
            full,
            frames,
        } => {
            let report = match counts {
                Some(counts) => {
                    let full = full.ok_or_else(|| Error::Config("--counts needs --full".into()))?;
                    flops_model(&vec![full; counts.len()], counts, cfg.model.d_k)?
                }
                None => {
                    let retention = cfg.resolve_retention()?;
                    let n = cfg.grid.rows * cfg.grid.cols;
                    let frames = frames.unwrap_or(cfg.etcs.n_target as u64);
                    let per_frame = cascade_counts(
                        n,
                        retention.emsf_rho,
                        &retention.schedule,
                        cfg.model.n_layers,
                    );
                    let counts: Vec<u64> = per_frame.iter().map(|&c| c as u64 * frames).collect();
                    flops_model(
                        &vec![n as u64 * frames; counts.len()],
                        &counts,
                        cfg.model.d_k,
                    )?
                }
            };
            let out = Out::new(&cfg.output_dir)?;
            out.json("efficiency.json", &report)?;
            out.write("efficiency.csv", report.to_csv())?;
            println!(
                "attention-term ratio {:.6} ({})",
                report.reduction_ratio, report.note
            );
            Ok(())
        }
        Command::Run { input } => {
            input.apply(&mut cfg);
            let outcome = run_pipeline(&cfg)?;
            for (stage, d) in &outcome.efficiency.stage_times {
                eprintln!("{stage:>10}: {:>9.3} ms", d.as_secs_f64() * 1e3);
            }
            println!(
                "{} keyframes, retention {:.4} (requested {:.4}), attention-term ratio {:.6}; artifacts in {}",
                outcome.keyframes.len(),
                outcome.prune.achieved_final_ratio,
                outcome.prune.requested_final_ratio,
                outcome.efficiency.reduction_ratio,
                cfg.output_dir.display()
            );
            Ok(())
        }
    }
}

fn sample(cfg: &PipelineConfig, out: &Out) -> Result<KeyframeSet> {
    let inputs = load_inputs(cfg)?;
    let windowing = windowing_for(cfg, &inputs.stream)?;
    let profile = activity_flux(&inputs.stream, &windowing, &cfg.density_filter)?;
    let keyframes = select_keyframes(&profile, &cfg.etcs, &inputs.frame_times)?;
    out.write("activity.csv", profile.to_csv())?;
    out.json("activity.json", &profile)?;
    out.write("keyframes.csv", keyframes.to_manifest())?;
    out.json("keyframes.json", &keyframes)?;
    Ok(keyframes)
}

fn write_saliency(out: &Out, maps: &[SaliencyMap], kept: &[RetainedSet]) -> Result<()> {
    for m in maps {
        out.write(&format!("saliency_f{:05}.csv", m.frame_index), m.to_csv())?;
        out.write(
            &format!("saliency_f{:05}.bin", m.frame_index),
            m.to_binary(),
        )?;
    }
    out.json("emsf_retained.json", &kept)?;
    let mut csv = String::from("frame_index,budget_k,indices\n");
    for k in kept {
        let idx: Vec<String> = k.indices.iter().map(usize::to_string).collect();
        csv.push_str(&format!(
            "{},{},{}\n",
            k.frame_index,
            k.budget_k,
            idx.join(" ")
        ));
    }
    out.write("emsf_retained.csv", csv)
}

fn read_saliency_dir(dir: &Path) -> Result<Vec<SaliencyMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("saliency_f") && n.ends_with(".bin"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("no saliency_f*.bin maps"));
    }
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            SaliencyMap::from_binary(&bytes)
        })
        .collect()
}

#[derive(Serialize)]
struct LayerBiasRow {
    layer: u32,
    #[serde(flatten)]
    stats: BiasStats,
    corner_mean: f64,
    edge_mean: f64,
    skewness: Option<f64>,
    top_decile_share: Option<f64>,
}

#[derive(Serialize)]
struct BiasReport {
    margin_fraction: f64,
    mu0: f64,
    layers: Vec<LayerBiasRow>,
    reference_correlation: Option<f64>,
}

fn analyze_bias(
    cfg: &PipelineConfig,
    pattern: &str,
    margin: f64,
    mu0: f64,
    reference: bool,
    query: ecp_core::QuerySelection,
) -> Result<()> {
    let partition = partition_regions(cfg.grid.rows, cfg.grid.cols, margin)?;
    let mut maps = Vec::new();
    for entry in glob::glob(pattern).map_err(|e| Error::Config(format!("--attention: {e}")))? {
        let path = entry.map_err(|e| Error::Io {
            path: e.path().to_path_buf(),
            source: e.into(),
        })?;
        maps.push(AttentionMap::read(&path)?);
    }
    if maps.is_empty() {
        return Err(Error::Empty("no attention maps matched"));
    }
    maps.sort_by_key(|m| m.layer);
    let mut rows = Vec::with_capacity(maps.len());
    for map in &maps {
        let mut ratios = Vec::new();
        let mut corner = Vec::new();
        let mut edge = Vec::new();
        let mut pooled = Vec::new();
        for frame in map.frames() {
            let fa = attention_readout(map, frame, query)?;
            if fa.scores.len() != partition.n_tokens() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} frame {frame} has {} tokens, grid has {}",
                    map.layer,
                    fa.scores.len(),
                    partition.n_tokens()
                )));
            }
            let r = region_ratios(&fa.scores, &partition)?;
            ratios.push(r.peripheral);
            corner.push(r.corner);
            edge.push(r.edge);
            pooled.extend_from_slice(&fa.scores);
        }
        let stats = bias_stats(&ratios, mu0)?;
        let diag = distribution_diagnostics(&pooled).ok();
        rows.push(LayerBiasRow {
            layer: map.layer,
            stats,
            corner_mean: ecp_core::stats::mean(&corner),
            edge_mean: ecp_core::stats::mean(&edge),
            skewness: diag.map(|d| d.skewness),
            top_decile_share: diag.map(|d| d.top_decile_share),
        });
    }
    let reference_correlation = if reference {
        let (ours, theirs): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| {
                REFERENCE_PERIPHERAL_PROFILE
                    .get(r.layer as usize)
                    .map(|&p| (r.stats.mu, p))
            })
            .unzip();
        Some(profile_correlation(&ours, &theirs)?)
    } else {
        None
    };
    let out = Out::new(&cfg.output_dir)?;
    let mut csv =
        String::from("layer,mu,sigma,d,t,n,corner_mean,edge_mean,skewness,top_decile_share\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.layer,
            r.stats.mu,
            r.stats.sigma,
            opt(r.stats.cohens_d),
            opt(r.stats.t_stat),
            r.stats.n,
            r.corner_mean,
            r.edge_mean,
            opt(r.skewness),
            opt(r.top_decile_share)
        ));
    }
    out.write("bias.csv", csv)?;
    let report = BiasReport {
        margin_fraction: margin,
        mu0,
        layers: rows,
        reference_correlation,
    };
    out.json("bias.json", &report)?;
    for r in &report.layers {
        println!(
            "layer {:>2}: ratio {:.3} +/- {:.3}, d {}",
            r.layer,
            r.stats.mu,
            r.stats.sigma,
            r.stats
                .cohens_d
                .map_or("n/a".to_string(), |d| format!("{d:.3}"))
        );
    }
    if let Some(c) = report.reference_correlation {
        println!("correlation with reference profile: {c:.4}");
    }
    Ok(())
}
