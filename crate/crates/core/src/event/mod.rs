//! Event data model, background-activity filtering and window-level
//! activity flux.

mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{ingest_events, read_events_file, write_events_binary, write_events_csv, EventFormat};

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    /// Accepts both the `{-1, +1}` and `{0, 1}` on-disk conventions.
    pub fn from_raw(raw: i64) -> Option<Self> {
        match raw {
            1 => Some(Polarity::Positive),
            0 | -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// A single polarity spike at pixel `(x, y)` and time `t` (microseconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-sorted events on a `width x height` sensor covering `[t_start, t_end]`
/// (both inclusive, microseconds).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
    t_start: u64,
    t_end: u64,
}

impl EventStream {
    /// Validates bounds and stably sorts by timestamp. The span is taken
    /// from the first and last event (`0..=0` when empty).
    pub fn new(mut events: Vec<Event>, width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(
                "sensor dims",
                "width and height must be positive",
            ));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::OutOfBounds {
                    record: i + 1,
                    x: e.x.into(),
                    y: e.y.into(),
                    width: width.into(),
                    height: height.into(),
                });
            }
        }
        events.sort_by_key(|e| e.t);
        let (t_start, t_end) = match (events.first(), events.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (0, 0),
        };
        Ok(Self {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        Self::new(Vec::new(), width, height)
    }

    /// Widens the declared span. The new span must still contain every event.
    pub fn with_span(mut self, t_start: u64, t_end: u64) -> Result<Self> {
        if t_start > t_end {
            return Err(Error::param(
                "span",
                format!("t_start {t_start} > t_end {t_end}"),
            ));
        }
        if let (Some(a), Some(b)) = (self.events.first(), self.events.last()) {
            if a.t < t_start || b.t > t_end {
                return Err(Error::param(
                    "span",
                    format!(
                        "[{t_start}, {t_end}] does not cover events in [{}, {}]",
                        a.t, b.t
                    ),
                ));
            }
        }
        self.t_start = t_start;
        self.t_end = t_end;
        Ok(self)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    /// Same sensor and span, different (already sorted, in-bounds) events.
    fn derive(&self, events: Vec<Event>) -> Self {
        Self {
            events,
            width: self.width,
            height: self.height,
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }

    /// Events with `t` in `[from, to)`.
    pub fn slice_time(&self, from: u64, to: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < from);
        let hi = self.events.partition_point(|e| e.t < to);
        &self.events[lo..hi.max(lo)]
    }
}

/// Spatiotemporal neighbor-count filter. An event survives when at least
/// `min_neighbors` other events lie within Chebyshev distance
/// `spatial_radius` and `|dt| <= temporal_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityFilterParams {
    pub spatial_radius: u32,
    pub temporal_radius: u64,
    pub min_neighbors: u32,
}

impl DensityFilterParams {
    pub fn identity() -> Self {
        Self {
            min_neighbors: 0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.min_neighbors == 0
    }
}

impl Default for DensityFilterParams {
    fn default() -> Self {
        Self {
            spatial_radius: 1,
            temporal_radius: 10_000,
            min_neighbors: 1,
        }
    }
}

pub fn density_filter(stream: &EventStream, params: &DensityFilterParams) -> EventStream {
    if params.is_identity() {
        return stream.clone();
    }
    let events = stream.events();
    let need = params.min_neighbors as usize;
    let r = params.spatial_radius as i64;
    let keep: Vec<bool> = (0..events.len())
        .into_par_iter()
        .map(|i| {
            let e = events[i];
            let lo = events.partition_point(|o| o.t.saturating_add(params.temporal_radius) < e.t);
            let hi = events.partition_point(|o| o.t <= e.t.saturating_add(params.temporal_radius));
            let mut count = 0usize;
            for (j, o) in events[lo..hi].iter().enumerate() {
                if lo + j == i {
                    continue;
                }
                let dx = (i64::from(o.x) - i64::from(e.x)).abs();
                let dy = (i64::from(o.y) - i64::from(e.y)).abs();
                if dx.max(dy) <= r {
                    count += 1;
                    if count >= need {
                        return true;
                    }
                }
            }
            false
        })
        .collect();
    let kept = events
        .iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(*e))
        .collect();
    stream.derive(kept)
}

/// Fixed-length temporal windows `[origin + n*delta_t, origin + (n+1)*delta_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingParams {
    pub delta_t: u64,
    pub origin: u64,
}

impl WindowingParams {
    pub fn new(delta_t: u64, origin: u64) -> Result<Self> {
        if delta_t == 0 {
            return Err(Error::param("delta_t", "window length must be positive"));
        }
        Ok(Self { delta_t, origin })
    }

    /// Windows anchored at the stream's start time.
    pub fn anchored(stream: &EventStream, delta_t: u64) -> Result<Self> {
        Self::new(delta_t, stream.t_start())
    }

    pub fn window_start(&self, n: usize) -> u64 {
        self.origin + n as u64 * self.delta_t
    }

    pub fn window_end(&self, n: usize) -> u64 {
        self.window_start(n) + self.delta_t
    }

    pub fn window_midpoint(&self, n: usize) -> u64 {
        self.window_start(n) + self.delta_t / 2
    }

    pub fn window_of(&self, t: u64) -> Option<usize> {
        (t >= self.origin).then(|| ((t - self.origin) / self.delta_t) as usize)
    }
}

/// Per-window event counts and their absolute first differences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub flux: Vec<u64>,
    pub deltas: Vec<u64>,
    pub windowing: WindowingParams,
}

impl ActivityProfile {
    pub fn from_flux(flux: Vec<u64>, windowing: WindowingParams) -> Self {
        let deltas = flux.windows(2).map(|w| w[1].abs_diff(w[0])).collect();
        Self {
            flux,
            deltas,
            windowing,
        }
    }

    pub fn len(&self) -> usize {
        self.flux.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flux.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.flux.iter().sum()
    }

    /// `|S_n - S_{n-1}|` for window `n`; window 0 has no predecessor.
    pub fn delta_of(&self, n: usize) -> Option<u64> {
        n.checked_sub(1).and_then(|i| self.deltas.get(i).copied())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("window,start_us,flux,delta\n");
        for (n, s) in self.flux.iter().enumerate() {
            let d = self.delta_of(n).map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!("{n},{},{s},{d}\n", self.windowing.window_start(n)));
        }
        out
    }
}

/// Counts density-filtered events per window. Windows cover the whole
/// declared span `[t_start, t_end]` of the stream, zero-count ones included.
pub fn activity_flux(
    stream: &EventStream,
    windowing: &WindowingParams,
    filter: &DensityFilterParams,
) -> Result<ActivityProfile> {
    if windowing.delta_t == 0 {
        return Err(Error::param("delta_t", "window length must be positive"));
    }
    if windowing.origin > stream.t_start() {
        return Err(Error::param(
            "origin",
            format!(
                "origin {} is after stream start {}",
                windowing.origin,
                stream.t_start()
            ),
        ));
    }
    let filtered = density_filter(stream, filter);
    let n_windows = ((stream.t_end() - windowing.origin) / windowing.delta_t) as usize + 1;
    let mut flux = vec![0u64; n_windows];
    for e in filtered.events() {
        // origin <= t_start <= e.t
        let n = ((e.t - windowing.origin) / windowing.delta_t) as usize;
        flux[n] += 1;
    }
    Ok(ActivityProfile::from_flux(flux, *windowing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, Polarity::Positive)
    }

    fn brute_force_filter(events: &[Event], p: &DensityFilterParams) -> Vec<Event> {
        events
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                let n = events
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| {
                        j != i
                            && (o.x as i64 - e.x as i64)
                                .abs()
                                .max((o.y as i64 - e.y as i64).abs())
                                <= p.spatial_radius as i64
                            && o.t.abs_diff(e.t) <= p.temporal_radius
                    })
                    .count();
                n >= p.min_neighbors as usize
            })
            .map(|(_, e)| *e)
            .collect()
    }

    #[test]
    fn identity_filter_returns_input() {
        let s = EventStream::new(vec![ev(5, 1, 1), ev(9, 3, 3)], 10, 10).unwrap();
        assert_eq!(density_filter(&s, &DensityFilterParams::identity()), s);
    }

    #[test]
    fn isolated_event_is_dropped() {
        let s = EventStream::new(vec![ev(5, 1, 1)], 10, 10).unwrap();
        let p = DensityFilterParams {
            spatial_radius: 3,
            temporal_radius: 1000,
            min_neighbors: 1,
        };
        assert!(density_filter(&s, &p).is_empty());
    }

    #[test]
    fn clustered_events_survive() {
        let s = EventStream::new(vec![ev(0, 4, 4), ev(10, 4, 4), ev(20, 4, 4)], 10, 10).unwrap();
        let p = DensityFilterParams {
            spatial_radius: 1,
            temporal_radius: 15,
            min_neighbors: 1,
        };
        let expected = brute_force_filter(s.events(), &p);
        assert_eq!(expected.len(), 3);
        assert_eq!(density_filter(&s, &p).events(), expected.as_slice());
    }

    #[test]
    fn filter_matches_brute_force_on_mixed_stream() {
        let mut events = Vec::new();
        for i in 0..200u64 {
            let x = ((i * 7) % 13) as u16;
            let y = ((i * 3) % 11) as u16;
            events.push(ev(i * 37 % 2000, x, y));
        }
        let s = EventStream::new(events, 16, 16).unwrap();
        for min_neighbors in 1..4 {
            let p = DensityFilterParams {
                spatial_radius: 2,
                temporal_radius: 120,
                min_neighbors,
            };
            assert_eq!(
                density_filter(&s, &p).events(),
                brute_force_filter(s.events(), &p).as_slice()
            );
        }
    }

    #[test]
    fn flux_counts_per_window() {
        let s = EventStream::new(
            vec![ev(100_000, 0, 0), ev(200_000, 0, 0), ev(1_500_000, 0, 0)],
            4,
            4,
        )
        .unwrap()
        .with_span(0, 1_500_000)
        .unwrap();
        let w = WindowingParams::new(1_000_000, 0).unwrap();
        let prof = activity_flux(&s, &w, &DensityFilterParams::identity()).unwrap();
        assert_eq!(prof.flux, vec![2, 1]);
        assert_eq!(prof.deltas, vec![1]);
    }

    #[test]
    fn empty_stream_yields_zero_windows() {
        let dt = 1000;
        let s = EventStream::empty(4, 4)
            .unwrap()
            .with_span(0, 3 * dt - 1)
            .unwrap();
        let w = WindowingParams::new(dt, 0).unwrap();
        let prof = activity_flux(&s, &w, &DensityFilterParams::identity()).unwrap();
        assert_eq!(prof.flux, vec![0, 0, 0]);
        assert_eq!(prof.deltas, vec![0, 0]);
    }

    #[test]
    fn one_event_per_window() {
        let events = (0..5).map(|n| ev(n * 100 + 50, 1, 1)).collect();
        let s = EventStream::new(events, 4, 4)
            .unwrap()
            .with_span(0, 499)
            .unwrap();
        let w = WindowingParams::new(100, 0).unwrap();
        let prof = activity_flux(&s, &w, &DensityFilterParams::identity()).unwrap();
        assert_eq!(prof.flux, vec![1; 5]);
        assert_eq!(prof.deltas, vec![0; 4]);
    }

    #[test]
    fn zero_window_length_is_rejected() {
        assert!(WindowingParams::new(0, 0).is_err());
        let s = EventStream::empty(2, 2).unwrap();
        let w = WindowingParams {
            delta_t: 0,
            origin: 0,
        };
        assert!(activity_flux(&s, &w, &DensityFilterParams::identity()).is_err());
    }

    #[test]
    fn out_of_order_events_are_stably_sorted() {
        let s = EventStream::new(vec![ev(30, 1, 0), ev(10, 2, 0), ev(10, 3, 0)], 4, 4).unwrap();
        let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![2, 3, 1]);
        assert_eq!((s.t_start(), s.t_end()), (10, 30));
    }
}
