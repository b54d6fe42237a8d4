//! Pipeline configuration.
//!
//! Config files are JSON with optional `//` comment lines, so the annotated
//! output of [`annotated_defaults`] can be edited and loaded back directly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::QuerySelection;
use crate::attention_sim::BiasProfile;
use crate::earf::PruneSchedule;
use crate::error::{Error, Result};
use crate::esim::EsimParams;
use crate::etcs::EtcsParams;
use crate::event::{DensityFilterParams, EventFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSourceConfig {
    pub path: PathBuf,
    #[serde(default = "default_event_format")]
    pub format: EventFormat,
    /// Sensor size; required for text input, checked against the header for binary.
    #[serde(default)]
    pub width: Option<u16>,
    #[serde(default)]
    pub height: Option<u16>,
}

fn default_event_format() -> EventFormat {
    EventFormat::TextCsv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSourceConfig {
    /// Directory of `*.pgm` frames named by zero-padded index.
    pub dir: PathBuf,
    /// Sidecar with one microsecond timestamp per frame; defaults to `<dir>/timestamps.txt`.
    #[serde(default)]
    pub timestamps: Option<PathBuf>,
}

impl FrameSourceConfig {
    pub fn timestamps_path(&self) -> PathBuf {
        self.timestamps
            .clone()
            .unwrap_or_else(|| self.dir.join("timestamps.txt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowingConfig {
    pub delta_t_us: u64,
    /// Start of window 0; defaults to the start of the stream.
    pub origin_us: Option<u64>,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            delta_t_us: 100_000,
            origin_us: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 12, cols: 18 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetentionConfig {
    /// When set, overrides `emsf_rho` and `layer_rho` with a geometric split.
    pub final_ratio: Option<f64>,
    pub emsf_rho: f64,
    pub layer_rho: Vec<f64>,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            final_ratio: Some(0.2),
            emsf_rho: 1.0,
            layer_rho: vec![1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub layers: Vec<u32>,
    pub gamma: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            layers: vec![3, 9, 17],
            gamma: vec![0.8, 0.6, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSourceKind {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub source: AttentionSourceKind,
    /// Glob of `ECPATT01` files, used when `source` is `files`.
    pub glob: Option<String>,
    pub query: QuerySelection,
    pub synthetic: BiasProfile,
    /// Text tokens (and scoring queries) in synthetic maps.
    pub n_text: usize,
    pub margin_fraction: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            source: AttentionSourceKind::Synthetic,
            glob: None,
            query: QuerySelection::AllText,
            synthetic: BiasProfile::default(),
            n_text: 8,
            margin_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_k: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 28,
            d_k: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub events: Option<EventSourceConfig>,
    pub frames: Option<FrameSourceConfig>,
    /// Frame spacing used to synthesize frame times when no frame directory is given.
    pub frame_interval_us: u64,
    pub esim: EsimParams,
    pub windowing: WindowingConfig,
    pub density_filter: DensityFilterParams,
    pub etcs: EtcsParams,
    pub grid: GridConfig,
    pub retention: RetentionConfig,
    pub schedule: ScheduleConfig,
    pub attention: AttentionConfig,
    pub model: ModelConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            events: None,
            frames: None,
            frame_interval_us: 33_333,
            esim: EsimParams::default(),
            windowing: WindowingConfig::default(),
            density_filter: DensityFilterParams::default(),
            etcs: EtcsParams::default(),
            grid: GridConfig::default(),
            retention: RetentionConfig::default(),
            schedule: ScheduleConfig::default(),
            attention: AttentionConfig::default(),
            model: ModelConfig::default(),
            output_dir: PathBuf::from("ecp-out"),
            seed: 0,
        }
    }
}

/// Saliency-stage ratio plus the per-layer schedule actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRetention {
    pub emsf_rho: f64,
    pub schedule: PruneSchedule,
    pub final_ratio: f64,
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let stripped = strip_comment_lines(text);
        let cfg: Self =
            serde_json::from_str(&stripped).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_retention(&self) -> Result<ResolvedRetention> {
        let sched = &self.schedule;
        let resolved = match self.retention.final_ratio {
            Some(r) => {
                let (emsf_rho, schedule) =
                    PruneSchedule::geometric(sched.layers.clone(), sched.gamma.clone(), r)?;
                ResolvedRetention {
                    emsf_rho,
                    schedule,
                    final_ratio: r,
                }
            }
            None => {
                let schedule = PruneSchedule {
                    layers: sched.layers.clone(),
                    gamma: sched.gamma.clone(),
                    rho: self.retention.layer_rho.clone(),
                };
                schedule.validate()?;
                let emsf_rho = self.retention.emsf_rho;
                if !(emsf_rho > 0.0 && emsf_rho <= 1.0) {
                    return Err(Error::param(
                        "emsf_rho",
                        format!("{emsf_rho} is outside (0, 1]"),
                    ));
                }
                let final_ratio = emsf_rho * schedule.rho.iter().product::<f64>();
                ResolvedRetention {
                    emsf_rho,
                    schedule,
                    final_ratio,
                }
            }
        };
        if let Some(&l) = resolved
            .schedule
            .layers
            .iter()
            .find(|&&l| l == 0 || l as usize >= self.model.n_layers)
        {
            return Err(Error::Config(format!(
                "pruning layer {l} must lie in 1..{} (it reads the previous layer's attention)",
                self.model.n_layers
            )));
        }
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<()> {
        if self.events.is_none() && self.frames.is_none() {
            return Err(Error::Config(
                "either `events` or `frames` must be given".into(),
            ));
        }
        if self.windowing.delta_t_us == 0 {
            return Err(Error::param("windowing.delta_t_us", "must be positive"));
        }
        if self.frame_interval_us == 0 {
            return Err(Error::param("frame_interval_us", "must be positive"));
        }
        if self.model.d_k == 0 || self.model.n_layers == 0 {
            return Err(Error::param("model", "n_layers and d_k must be positive"));
        }
        if self.attention.source == AttentionSourceKind::Files && self.attention.glob.is_none() {
            return Err(Error::Config(
                "attention.source = files needs attention.glob".into(),
            ));
        }
        self.etcs.validate()?;
        self.esim.validate()?;
        self.resolve_retention()?;
        Ok(())
    }
}

fn strip_comment_lines(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("//"))
        .collect::<Vec<_>>()
        .join("\n")
}

const FIELD_DOCS: &[(&str, &str)] = &[
    ("events", "event source {path, format: text-csv|packed-binary, width, height}; null to simulate from frames"),
    ("frames", "frame source {dir, timestamps}; PGM frames used for simulation and frame times"),
    ("frame_interval_us", "frame spacing used to synthesize frame times when no frame directory is given"),
    ("esim", "event simulation: contrast thresholds c_pos/c_neg, refractory t_ref (us), log_eps"),
    ("windowing", "activity windows: delta_t_us, origin_us (null = stream start)"),
    ("density_filter", "keep events with >= min_neighbors others within spatial_radius px and temporal_radius us; 0 disables"),
    ("etcs", "keyframe sampling: n_target, delta_share, min_gap (0 disables refinement), low_activity_quantile"),
    ("grid", "visual token grid rows x cols laid over the sensor"),
    ("retention", "final_ratio splits geometrically over saliency + pruning stages; null uses emsf_rho/layer_rho"),
    ("schedule", "pruning layers and their event weights gamma"),
    ("attention", "attention source: synthetic bias profile or ECPATT01 files (glob); query = all_text|last_token"),
    ("model", "layer count and key dimension for the analytical cost model"),
    ("output_dir", "directory receiving every artifact"),
    ("seed", "seed for synthetic attention"),
];

/// Default configuration as JSON, each top-level key preceded by a `//`
/// line describing it.
pub fn annotated_defaults() -> String {
    let value = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    let obj = value.as_object().expect("config is an object");
    let mut out = String::from("{\n");
    let n = obj.len();
    for (i, (key, val)) in obj.iter().enumerate() {
        if let Some((_, doc)) = FIELD_DOCS.iter().find(|(k, _)| k == key) {
            out.push_str(&format!("  // {doc}\n"));
        }
        let body = serde_json::to_string_pretty(val).expect("value serializes");
        let body = body.replace('\n', "\n  ");
        out.push_str(&format!(
            "  {}: {}{}\n",
            serde_json::to_string(key).expect("key"),
            body,
            if i + 1 < n { "," } else { "" }
        ));
    }
    out.push_str("}\n");
    out
}
