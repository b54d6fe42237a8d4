//! Frame-to-event simulation by thresholding linearly interpolated
//! log intensity.

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};

/// Grayscale intensity frames in `[0, 1]`, row-major, with strictly
/// increasing microsecond timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Vec<f64>>,
    timestamps: Vec<u64>,
    width: u16,
    height: u16,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<Vec<f64>>,
        timestamps: Vec<u64>,
        width: u16,
        height: u16,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Empty("at least two frames are required"));
        }
        if frames.len() != timestamps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::param(
                "frame dims",
                "width and height must be positive",
            ));
        }
        let n_pixels = usize::from(width) * usize::from(height);
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != n_pixels) {
            return Err(Error::DimensionMismatch(format!(
                "frame {i} has {} pixels, expected {width}x{height}",
                f.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param(
                "timestamps",
                "frame timestamps must be strictly increasing",
            ));
        }
        Ok(Self {
            frames,
            timestamps,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsimParams {
    pub c_pos: f64,
    pub c_neg: f64,
    /// Refractory period in microseconds.
    pub t_ref: u64,
    pub log_eps: f64,
}

impl Default for EsimParams {
    fn default() -> Self {
        Self {
            c_pos: 0.2,
            c_neg: 0.2,
            t_ref: 0,
            log_eps: 1e-3,
        }
    }
}

impl EsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_pos > 0.0) {
            return Err(Error::param("c_pos", "must be > 0"));
        }
        if !(self.c_neg > 0.0) {
            return Err(Error::param("c_neg", "must be > 0"));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::param("log_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Emits events whenever the interpolated log intensity of a pixel moves a
/// full threshold away from that pixel's reference level. The reference
/// advances by exactly one threshold per crossing; a crossing that lands
/// within `t_ref` of the pixel's last emitted event is suppressed.
pub fn simulate_events(frames: &FrameSequence, params: &EsimParams) -> Result<EventStream> {
    params.validate()?;
    let width = usize::from(frames.width);
    let n_pixels = width * usize::from(frames.height);
    let log_frames: Vec<Vec<f64>> = frames
        .frames
        .iter()
        .map(|f| f.iter().map(|&v| (v + params.log_eps).ln()).collect())
        .collect();

    let mut events: Vec<Event> = (0..n_pixels)
        .into_par_iter()
        .flat_map_iter(|pix| {
            let x = (pix % width) as u16;
            let y = (pix / width) as u16;
            let samples = log_frames.iter().map(|f| f[pix]);
            simulate_pixel(samples, &frames.timestamps, params)
                .into_iter()
                .map(move |(t, p)| Event::new(t, x, y, p))
        })
        .collect();
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    let stream = EventStream::new(events, frames.width, frames.height)?;
    let (first, last) = (
        frames.timestamps[0],
        *frames.timestamps.last().expect("two frames"),
    );
    stream.with_span(first, last)
}

fn simulate_pixel(
    mut samples: impl Iterator<Item = f64>,
    timestamps: &[u64],
    params: &EsimParams,
) -> Vec<(u64, Polarity)> {
    let mut out = Vec::new();
    let Some(mut prev) = samples.next() else {
        return out;
    };
    let mut reference = prev;
    let mut last_emit: Option<u64> = None;
    for (k, next) in samples.enumerate() {
        let (t0, t1) = (timestamps[k] as f64, timestamps[k + 1] as f64);
        let span = next - prev;
        let mut emit = |level: f64, p: Polarity| {
            let frac = (level - prev) / span;
            let t = (t0 + frac * (t1 - t0)).round_ties_even() as u64;
            if last_emit.is_some_and(|last| t.saturating_sub(last) < params.t_ref) {
                return;
            }
            last_emit = Some(t);
            out.push((t, p));
        };
        if span > 0.0 {
            while reference + params.c_pos <= next {
                reference += params.c_pos;
                emit(reference, Polarity::Positive);
            }
        } else if span < 0.0 {
            while reference - params.c_neg >= next {
                reference -= params.c_neg;
                emit(reference, Polarity::Negative);
            }
        }
        prev = next;
    }
    out
}

/// Reads `*.pgm` frames from `dir` (sorted by file name) and a timestamp
/// sidecar with one microsecond value per line. Pixel values are scaled to
/// `[0, 1]` by the bit depth of each file.
pub fn load_frame_sequence(dir: &Path, timestamps: &Path) -> Result<FrameSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    let mut dims = None;
    for path in &paths {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        let (w, h, pixels) = normalized_luma(img);
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::DimensionMismatch(format!(
                    "{} is {w}x{h}, earlier frames are {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        frames.push(pixels);
    }
    let ts = read_timestamps(timestamps)?;
    let (w, h) = dims.ok_or(Error::Empty("no PGM frames found"))?;
    let w = u16::try_from(w)
        .map_err(|_| Error::DimensionMismatch(format!("frame width {w} exceeds u16")))?;
    let h = u16::try_from(h)
        .map_err(|_| Error::DimensionMismatch(format!("frame height {h} exceeds u16")))?;
    FrameSequence::new(frames, ts, w, h)
}

fn normalized_luma(img: DynamicImage) -> (u32, u32, Vec<f64>) {
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (
                w,
                h,
                buf.into_raw()
                    .into_iter()
                    .map(|v| f64::from(v) / 255.0)
                    .collect(),
            )
        }
        other => {
            let buf = other.into_luma16();
            let (w, h) = buf.dimensions();
            (
                w,
                h,
                buf.into_raw()
                    .into_iter()
                    .map(|v| f64::from(v) / 65535.0)
                    .collect(),
            )
        }
    }
}

pub fn read_timestamps(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::MalformedRecord {
                line: i + 1,
                reason: format!("bad timestamp `{}`", l.trim()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(start: f64, log_change: f64, eps: f64) -> (f64, f64) {
        let end = (start + eps) * log_change.exp() - eps;
        (start, end)
    }

    fn single_pixel(values: &[f64], times: &[u64]) -> FrameSequence {
        FrameSequence::new(
            values.iter().map(|&v| vec![v]).collect(),
            times.to_vec(),
            1,
            1,
        )
        .unwrap()
    }

    #[test]
    fn constant_frames_emit_nothing() {
        let frames = vec![vec![0.4; 12]; 5];
        let seq = FrameSequence::new(frames, vec![0, 10, 20, 30, 40], 4, 3).unwrap();
        assert!(simulate_events(&seq, &EsimParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn half_log_ramp_gives_two_positive_events() {
        let params = EsimParams::default();
        let (a, b) = ramp(0.5, 0.5, params.log_eps);
        let seq = single_pixel(&[a, b], &[0, 1_000_000]);
        let s = simulate_events(&seq, &params).unwrap();
        let times: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(s.len(), 2);
        assert!(s.events().iter().all(|e| e.p == Polarity::Positive));
        assert!(
            times[0].abs_diff(400_000) <= 1 && times[1].abs_diff(800_000) <= 1,
            "{times:?}"
        );
    }

    #[test]
    fn falling_ramp_emits_negative_events() {
        let params = EsimParams::default();
        let (a, b) = ramp(0.9, -0.65, params.log_eps);
        let s = simulate_events(&single_pixel(&[a, b], &[0, 1000]), &params).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.events().iter().all(|e| e.p == Polarity::Negative));
    }

    #[test]
    fn refractory_period_limits_rate() {
        let params = EsimParams {
            t_ref: 1001,
            ..EsimParams::default()
        };
        let eps = params.log_eps;
        let mut values = vec![0.05];
        for _ in 0..4 {
            let last = *values.last().unwrap();
            values.push((last + eps) * 0.9f64.exp() - eps);
        }
        let s = simulate_events(
            &single_pixel(&values, &[0, 1000, 2000, 3000, 4000]),
            &params,
        )
        .unwrap();
        for k in 0..4u64 {
            let n = s
                .events()
                .iter()
                .filter(|e| e.t > k * 1000 && e.t <= (k + 1) * 1000)
                .count();
            assert!(n <= 1);
        }
    }

    #[test]
    fn too_few_frames_and_mismatched_dims_rejected() {
        assert!(FrameSequence::new(vec![vec![0.0]], vec![0], 1, 1).is_err());
        assert!(FrameSequence::new(vec![vec![0.0], vec![0.0, 1.0]], vec![0, 1], 1, 1).is_err());
        assert!(FrameSequence::new(vec![vec![0.0], vec![0.0]], vec![5, 5], 1, 1).is_err());
    }

    #[test]
    fn output_is_sorted_by_time_then_row_then_column() {
        let eps = 1e-3;
        let (a, b) = ramp(0.3, 0.45, eps);
        let frames = vec![vec![a; 6], vec![b; 6]];
        let seq = FrameSequence::new(frames, vec![0, 100], 3, 2).unwrap();
        let s = simulate_events(&seq, &EsimParams::default()).unwrap();
        assert_eq!(s.len(), 12);
        let keys: Vec<_> = s.events().iter().map(|e| (e.t, e.y, e.x)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
