//! Discretization grids: the ordered threshold sets each axis is quantized
//! against, together with their interval lengths.
//!
//! In-plane axes use a uniform grid. The depth axis uses a center-dense grid:
//! the first half of the range is split into M equal coarse sub-intervals and
//! the m-th of them carries 2^m evenly spaced points anchored at its left
//! edge, so point density doubles toward the middle of the range; the second
//! half mirrors the first. Depth values of hand pixels cluster around the
//! middle of a fixed-size crop cube, which is what the density profile is for.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::X => write!(f, "x"),
            Axis::Y => write!(f, "y"),
            Axis::Z => write!(f, "z"),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("unknown axis {other:?}"))),
        }
    }
}

/// Ordered thresholds `t_0 = 0 < t_1 < ... < t_{K-1} < upper_bound` plus the
/// interval lengths `Δ_k = t_{k+1} − t_k` where `t_K := upper_bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationGrid {
    axis: Axis,
    thresholds: Vec<f64>,
    upper_bound: f64,
    intervals: Vec<f64>,
}

impl DiscretizationGrid {
    /// Build from raw parts, enforcing every grid invariant. The public
    /// constructors funnel through here, as does dataset/maps deserialization.
    pub fn from_parts(axis: Axis, thresholds: Vec<f64>, upper_bound: f64) -> Result<Self> {
        if thresholds.len() < 2 {
            return Err(Error::Grid(format!(
                "{} thresholds; a single threshold cannot encode position",
                thresholds.len()
            )));
        }
        if !upper_bound.is_finite() || upper_bound <= 0.0 {
            return Err(Error::Grid(format!("bad upper bound {upper_bound}")));
        }
        if thresholds[0] != 0.0 {
            return Err(Error::Grid(format!("t_0 = {} (must be 0)", thresholds[0])));
        }
        for pair in thresholds.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::Grid(format!(
                    "thresholds not strictly increasing ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        let last = *thresholds.last().unwrap();
        if !(last < upper_bound) {
            return Err(Error::Grid(format!(
                "last threshold {last} not below upper bound {upper_bound}"
            )));
        }
        let mut intervals = Vec::with_capacity(thresholds.len());
        for k in 0..thresholds.len() {
            let next = if k + 1 < thresholds.len() {
                thresholds[k + 1]
            } else {
                upper_bound
            };
            intervals.push(next - thresholds[k]);
        }
        Ok(DiscretizationGrid {
            axis,
            thresholds,
            upper_bound,
            intervals,
        })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn k(&self) -> usize {
        self.thresholds.len()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    pub fn max_interval(&self) -> f64 {
        self.intervals.iter().cloned().fold(0.0, f64::max)
    }

    /// Index of the largest threshold `t_k <= v`. Out-of-range `v` clamps to
    /// the nearest valid index; the flag reports that it happened.
    pub fn locate_with_flag(&self, v: f64) -> (usize, bool) {
        if v < 0.0 || v.is_nan() {
            return (0, true);
        }
        let out_of_range = v >= self.upper_bound;
        let idx = self.thresholds.partition_point(|&t| t <= v);
        (idx.saturating_sub(1).min(self.k() - 1), out_of_range)
    }

    pub fn locate(&self, v: f64) -> usize {
        self.locate_with_flag(v).0
    }
}

/// `t_k = k * extent / K`, all intervals equal to `extent / K`.
pub fn uniform_grid(axis: Axis, extent: f64, k: usize) -> Result<DiscretizationGrid> {
    if k < 2 {
        return Err(Error::Grid(format!(
            "uniform grid needs K >= 2, got {k}"
        )));
    }
    if !extent.is_finite() || extent <= 0.0 {
        return Err(Error::Grid(format!("bad extent {extent}")));
    }
    let step = extent / k as f64;
    let thresholds = (0..k).map(|i| i as f64 * step).collect();
    DiscretizationGrid::from_parts(axis, thresholds, extent)
}

/// Center-dense depth grid with `M` doubling levels per half:
/// `K = 2 * (2^M - 1)` thresholds, interval lengths non-increasing up to
/// `extent/2` and non-decreasing after, and `{t_k} ∪ {extent}` symmetric
/// about `extent/2`.
pub fn normal_grid(axis: Axis, extent: f64, levels: u32) -> Result<DiscretizationGrid> {
    if levels < 1 {
        return Err(Error::Grid("normal grid needs at least one level".into()));
    }
    if !extent.is_finite() || extent <= 0.0 {
        return Err(Error::Grid(format!("bad extent {extent}")));
    }
    // 2^levels must stay well inside usize; anything beyond ~20 levels is a
    // config mistake, not a real grid.
    if levels > 20 {
        return Err(Error::Grid(format!("{levels} levels is unreasonably fine")));
    }
    let half = extent / 2.0;
    let coarse = half / levels as f64;
    let mut lower: Vec<f64> = Vec::with_capacity((1usize << levels) - 1);
    for m in 0..levels {
        let points = 1usize << m;
        let left = m as f64 * coarse;
        let step = coarse / points as f64;
        for r in 0..points {
            lower.push(left + r as f64 * step);
        }
    }
    let mut thresholds = lower.clone();
    thresholds.push(half);
    for &p in lower.iter().rev() {
        if p > 0.0 {
            thresholds.push(extent - p);
        }
    }
    DiscretizationGrid::from_parts(axis, thresholds, extent)
}

/// Snap a requested threshold count to the nearest one the center-dense
/// construction can produce: `M = round(log2(K/2 + 1))`, clamped to at least
/// one level. Returns the level count and the achieved K.
pub fn kz_to_levels(kz_target: usize) -> (u32, usize) {
    let m = ((kz_target as f64 / 2.0 + 1.0).log2().round() as i64).max(1) as u32;
    (m, 2 * ((1usize << m) - 1))
}
