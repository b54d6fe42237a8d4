//! Peripheral-sink statistics over token-grid attention maps and
//! score-distribution diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Disjoint corner / edge / center token sets of a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub rows: usize,
    pub cols: usize,
    pub margin_rows: usize,
    pub margin_cols: usize,
    pub corner: BTreeSet<usize>,
    pub edge: BTreeSet<usize>,
    pub center: BTreeSet<usize>,
}

impl RegionPartition {
    pub fn peripheral(&self) -> BTreeSet<usize> {
        self.corner.union(&self.edge).copied().collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Margin bands are `floor(margin_fraction * dim)` cells wide on each side.
/// Corners sit in both a row band and a column band; the rest of the bands
/// is edge; the interior block is center.
pub fn partition_regions(
    rows: usize,
    cols: usize,
    margin_fraction: f64,
) -> Result<RegionPartition> {
    if rows < 3 || cols < 3 {
        return Err(Error::param(
            "grid",
            format!("{rows}x{cols} is smaller than 3x3"),
        ));
    }
    if !(margin_fraction > 0.0 && margin_fraction < 0.5) {
        return Err(Error::param(
            "margin_fraction",
            format!("{margin_fraction} is outside (0, 0.5)"),
        ));
    }
    let margin_rows = (margin_fraction * rows as f64).floor() as usize;
    let margin_cols = (margin_fraction * cols as f64).floor() as usize;
    if margin_rows == 0 || margin_cols == 0 {
        return Err(Error::param("margin_fraction", "a margin band is empty"));
    }
    if 2 * margin_rows >= rows || 2 * margin_cols >= cols {
        return Err(Error::param(
            "margin_fraction",
            "margins leave no center region",
        ));
    }
    let in_row_band = |r: usize| r < margin_rows || r >= rows - margin_rows;
    let in_col_band = |c: usize| c < margin_cols || c >= cols - margin_cols;
    let mut part = RegionPartition {
        rows,
        cols,
        margin_rows,
        margin_cols,
        corner: BTreeSet::new(),
        edge: BTreeSet::new(),
        center: BTreeSet::new(),
    };
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            match (in_row_band(r), in_col_band(c)) {
                (true, true) => part.corner.insert(idx),
                (false, false) => part.center.insert(idx),
                _ => part.edge.insert(idx),
            };
        }
    }
    Ok(part)
}

/// Ratios of per-token mean attention in a region to the center mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRatios {
    pub corner: f64,
    pub edge: f64,
    pub peripheral: f64,
}

fn region_mean(mass: &[f64], region: impl IntoIterator<Item = usize>) -> f64 {
    let vals: Vec<f64> = region.into_iter().map(|i| mass[i]).collect();
    stats::mean(&vals)
}

fn center_mean(mass: &[f64], partition: &RegionPartition) -> Result<f64> {
    if mass.len() != partition.n_tokens() {
        return Err(Error::DimensionMismatch(format!(
            "{} token masses for a {}x{} partition",
            mass.len(),
            partition.rows,
            partition.cols
        )));
    }
    let center = region_mean(mass, partition.center.iter().copied());
    if center <= 0.0 {
        return Err(Error::Degenerate("center region carries no attention mass"));
    }
    Ok(center)
}

/// Mean per-token mass over corner and edge tokens, divided by the mean over
/// center tokens. A value of 1 means no peripheral bias.
pub fn peripheral_ratio(mass: &[f64], partition: &RegionPartition) -> Result<f64> {
    let center = center_mean(mass, partition)?;
    Ok(region_mean(mass, partition.peripheral()) / center)
}

pub fn region_ratios(mass: &[f64], partition: &RegionPartition) -> Result<RegionRatios> {
    let center = center_mean(mass, partition)?;
    Ok(RegionRatios {
        corner: region_mean(mass, partition.corner.iter().copied()) / center,
        edge: region_mean(mass, partition.edge.iter().copied()) / center,
        peripheral: region_mean(mass, partition.peripheral()) / center,
    })
}

/// One-sample summary of per-frame ratios against a baseline `mu0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasStats {
    pub mu: f64,
    pub sigma: f64,
    /// `(mu - 1) / sigma`; `None` when `sigma == 0`.
    pub cohens_d: Option<f64>,
    /// `(mu - mu0) / (sigma / sqrt(n))`; `None` when `sigma == 0`.
    pub t_stat: Option<f64>,
    pub n: usize,
}

impl BiasStats {
    pub fn is_degenerate(&self) -> bool {
        self.cohens_d.is_none()
    }
}

pub fn bias_stats(ratios: &[f64], mu0: f64) -> Result<BiasStats> {
    if ratios.len() < 2 {
        return Err(Error::param("ratios", "need at least two samples"));
    }
    let n = ratios.len();
    let mu = stats::mean(ratios);
    let sigma = stats::sample_std(ratios);
    let (cohens_d, t_stat) = if sigma > 0.0 {
        (
            Some((mu - 1.0) / sigma),
            Some((mu - mu0) / (sigma / (n as f64).sqrt())),
        )
    } else {
        (None, None)
    };
    Ok(BiasStats {
        mu,
        sigma,
        cohens_d,
        t_stat,
        n,
    })
}

/// Pearson correlation of two equally long profiles.
pub fn profile_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "profiles of length {} and {} (need equal, >= 2)",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let da: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let db: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let cross: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x * y).collect();
    let sa: Vec<f64> = da.iter().map(|x| x * x).collect();
    let sb: Vec<f64> = db.iter().map(|y| y * y).collect();
    let (saa, sbb) = (stats::pairwise_sum(&sa), stats::pairwise_sum(&sb));
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("constant profile"));
    }
    let r = stats::pairwise_sum(&cross) / (saa * sbb).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fisher-Pearson skewness `m3 / m2^(3/2)` with population moments.
    pub skewness: f64,
    /// Share of the total held by the largest `ceil(n / 10)` values.
    pub top_decile_share: f64,
}

pub fn distribution_diagnostics(values: &[f64]) -> Result<Diagnostics> {
    if values.len() < 3 {
        return Err(Error::param("values", "need at least three values"));
    }
    let n = values.len() as f64;
    let mu = stats::mean(values);
    let d2: Vec<f64> = values.iter().map(|v| (v - mu).powi(2)).collect();
    let d3: Vec<f64> = values.iter().map(|v| (v - mu).powi(3)).collect();
    let m2 = stats::pairwise_sum(&d2) / n;
    if m2 == 0.0 {
        return Err(Error::Degenerate("zero variance"));
    }
    let m3 = stats::pairwise_sum(&d3) / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = values.len().div_ceil(10);
    let total = stats::pairwise_sum(values);
    let share = if total != 0.0 {
        stats::pairwise_sum(&sorted[..top]) / total
    } else {
        0.0
    };
    Ok(Diagnostics {
        skewness: m3 / m2.powf(1.5),
        top_decile_share: share,
    })
}

/// Per-layer summary row for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBias {
    pub layer: u32,
    #[serde(flatten)]
    pub stats: BiasStats,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `layer,mu,sigma,d,t,n`; degenerate statistics are left blank.
pub fn bias_report_csv(rows: &[LayerBias]) -> String {
    let mut out = String::from("layer,mu,sigma,d,t,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layer,
            r.stats.mu,
            r.stats.sigma,
            opt(r.stats.cohens_d),
            opt(r.stats.t_stat),
            r.stats.n
        ));
    }
    out
}
