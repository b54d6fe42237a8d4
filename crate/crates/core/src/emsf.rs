//! Token-aligned event saliency and budgeted top-K token retention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{density_filter, DensityFilterParams, EventStream};
use crate::stats;

/// A `rows x cols` token grid laid over a sensor. Cells are
/// `floor(width / cols)` by `floor(height / rows)` pixels; the last row and
/// column absorb the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub sensor_width: u16,
    pub sensor_height: u16,
}

impl TokenGridSpec {
    pub fn new(rows: usize, cols: usize, sensor_width: u16, sensor_height: u16) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param("grid", "rows and cols must be at least 1"));
        }
        if cols > usize::from(sensor_width) || rows > usize::from(sensor_height) {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} token grid does not tile a {sensor_width}x{sensor_height} sensor"
            )));
        }
        Ok(Self {
            rows,
            cols,
            sensor_width,
            sensor_height,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_of(&self, x: u16, y: u16) -> usize {
        let cell_w = usize::from(self.sensor_width) / self.cols;
        let cell_h = usize::from(self.sensor_height) / self.rows;
        let col = (usize::from(x) / cell_w).min(self.cols - 1);
        let row = (usize::from(y) / cell_h).min(self.rows - 1);
        row * self.cols + col
    }
}

/// Raw per-token event counts and their min-max normalized saliency for one
/// keyframe window `[window.0, window.1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub frame_index: u32,
    pub rows: usize,
    pub cols: usize,
    pub window: (u64, u64),
    pub counts: Vec<u64>,
    pub saliency: Vec<f64>,
}

/// Min-max normalization; all-equal input (including all-zero) maps to zeros.
pub fn min_max_normalize(counts: &[u64]) -> Vec<f64> {
    let (Some(&min), Some(&max)) = (counts.iter().min(), counts.iter().max()) else {
        return Vec::new();
    };
    if max == min {
        return vec![0.0; counts.len()];
    }
    let range = (max - min) as f64;
    counts.iter().map(|&c| (c - min) as f64 / range).collect()
}

impl SaliencyMap {
    pub fn from_counts(
        frame_index: u32,
        rows: usize,
        cols: usize,
        window: (u64, u64),
        counts: Vec<u64>,
    ) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for a {rows}x{cols} grid",
                counts.len()
            )));
        }
        let saliency = min_max_normalize(&counts);
        Ok(Self {
            frame_index,
            rows,
            cols,
            window,
            counts,
            saliency,
        })
    }

    pub fn len(&self) -> usize {
        self.saliency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saliency.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_index,count,saliency\n");
        for (i, (c, s)) in self.counts.iter().zip(&self.saliency).enumerate() {
            out.push_str(&format!("{i},{c},{s}\n"));
        }
        out
    }

    /// Header `(u32 frame_index, u16 rows, u16 cols)` then row-major f32
    /// saliency, all little-endian.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.len());
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&(self.rows as u16).to_le_bytes());
        out.extend_from_slice(&(self.cols as u16).to_le_bytes());
        for &s in &self.saliency {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_binary`](Self::to_binary). Counts and window are not
    /// stored in the block and come back empty.
    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(
                "saliency block shorter than its header".into(),
            ));
        }
        let frame_index = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let rows = usize::from(u16::from_le_bytes([bytes[4], bytes[5]]));
        let cols = usize::from(u16::from_le_bytes([bytes[6], bytes[7]]));
        let body = &bytes[8..];
        if body.len() != 4 * rows * cols {
            return Err(Error::Format(format!(
                "saliency block holds {} bytes, expected {} for {rows}x{cols}",
                body.len(),
                4 * rows * cols
            )));
        }
        let saliency = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Ok(Self {
            frame_index,
            rows,
            cols,
            window: (0, 0),
            counts: Vec::new(),
            saliency,
        })
    }
}

/// Counts filtered events per token inside `window` and min-max normalizes them.
pub fn token_saliency(
    stream: &EventStream,
    grid: &TokenGridSpec,
    window: (u64, u64),
    filter: &DensityFilterParams,
    frame_index: u32,
) -> Result<SaliencyMap> {
    if window.1 <= window.0 {
        return Err(Error::param(
            "window",
            format!("[{}, {}) is empty", window.0, window.1),
        ));
    }
    if (grid.sensor_width, grid.sensor_height) != (stream.width(), stream.height()) {
        return Err(Error::DimensionMismatch(format!(
            "grid laid over {}x{} but stream sensor is {}x{}",
            grid.sensor_width,
            grid.sensor_height,
            stream.width(),
            stream.height()
        )));
    }
    let filtered = density_filter(stream, filter);
    let mut counts = vec![0u64; grid.n_tokens()];
    for e in filtered.slice_time(window.0, window.1) {
        counts[grid.token_of(e.x, e.y)] += 1;
    }
    SaliencyMap::from_counts(frame_index, grid.rows, grid.cols, window, counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSet {
    pub frame_index: u32,
    pub budget_k: usize,
    pub indices: Vec<usize>,
}

/// Keeps the `max(1, floor(rho * N))` most salient tokens, ties toward the
/// lower token index.
pub fn retain_topk(map: &SaliencyMap, rho: f64) -> Result<RetainedSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param("rho", format!("{rho} is outside (0, 1]")));
    }
    if map.is_empty() {
        return Err(Error::Empty("saliency map has no tokens"));
    }
    let k = stats::retention_budget(rho, map.len());
    Ok(RetainedSet {
        frame_index: map.frame_index,
        budget_k: k,
        indices: stats::top_k_indices(&map.saliency, k),
    })
}
