//! Ground-truth encoding and soft decoding of ordinal probability maps.
//!
//! Encoding: a joint coordinate J on a grid with thresholds `t_k` becomes the
//! binary vector `[J >= t_k]`, replicated over the map's spatial replicate
//! axes. Decoding: probabilities are summed against the interval lengths
//! (`t_K := upper bound`) and the spatial replicates are averaged.
//!
//! Decoding a ground-truth encoding lands on the smallest threshold-or-bound
//! strictly above J, so the round-trip error is positive and bounded by the
//! local interval; that systematic bias is accepted and asserted by tests,
//! not corrected, since training against true coordinates absorbs it.

use crate::error::{Error, Result};
use crate::geometry::ImageGeometry;
use crate::grid::{Axis, DiscretizationGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Joint3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Joint3 { x, y, z }
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn dist(&self, other: &Joint3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub joints: Vec<Joint3>,
}

impl JointSet {
    pub fn new(joints: Vec<Joint3>) -> Self {
        JointSet { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// The three per-axis grids used together by the codec and the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    pub x: DiscretizationGrid,
    pub y: DiscretizationGrid,
    pub z: DiscretizationGrid,
}

impl GridSet {
    pub fn new(x: DiscretizationGrid, y: DiscretizationGrid, z: DiscretizationGrid) -> Result<Self> {
        if x.axis() != Axis::X || y.axis() != Axis::Y || z.axis() != Axis::Z {
            return Err(Error::Grid(format!(
                "grid set axes are ({}, {}, {}), expected (x, y, z)",
                x.axis(),
                y.axis(),
                z.axis()
            )));
        }
        Ok(GridSet { x, y, z })
    }

    pub fn get(&self, axis: Axis) -> &DiscretizationGrid {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
            Axis::Z => &self.z,
        }
    }

    pub fn max_interval(&self) -> f64 {
        self.x
            .max_interval()
            .max(self.y.max_interval())
            .max(self.z.max_interval())
    }
}

/// Dense per-joint ordinal probability maps for one frame.
///
/// Layouts (row-major): `prob_x` is `(H/s) × K_x × A` with rows as the
/// spatial replicate; `prob_y` is `K_y × (W/s) × A` with columns as the
/// replicate; `prob_z` is `(H/s) × (W/s) × K_z × A` replicated over both.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub prob_x: Tensor,
    pub prob_y: Tensor,
    pub prob_z: Tensor,
}

impl ProbabilityMaps {
    pub fn shapes(grids: &GridSet, geom: &ImageGeometry, joints: usize) -> ([usize; 3], [usize; 3], [usize; 4]) {
        let rh = geom.feature_height();
        let rw = geom.feature_width();
        (
            [rh, grids.x.k(), joints],
            [grids.y.k(), rw, joints],
            [rh, rw, grids.z.k(), joints],
        )
    }

    /// Check map shapes against grids and geometry; returns the joint count.
    pub fn joint_count(&self, grids: &GridSet, geom: &ImageGeometry) -> Result<usize> {
        let sx = self.prob_x.shape();
        let sy = self.prob_y.shape();
        let sz = self.prob_z.shape();
        if sx.len() != 3 || sy.len() != 3 || sz.len() != 4 {
            return Err(Error::Shape {
                op: "probability_maps",
                detail: format!("ranks {:?}/{:?}/{:?}, expected 3/3/4", sx, sy, sz),
            });
        }
        let a = sx[2];
        let (ex, ey, ez) = Self::shapes(grids, geom, a);
        if sx != ex || sy != ey || sz != ez {
            return Err(Error::Shape {
                op: "probability_maps",
                detail: format!(
                    "shapes x{:?} y{:?} z{:?}, expected x{:?} y{:?} z{:?}",
                    sx, sy, sz, ex, ey, ez
                ),
            });
        }
        Ok(a)
    }

    pub fn in_unit_range(&self) -> bool {
        [&self.prob_x, &self.prob_y, &self.prob_z]
            .iter()
            .all(|t| t.data().iter().all(|&p| (0.0..=1.0).contains(&p)))
    }
}

/// Binary threshold vector for a single coordinate: entry k is 1 iff `v >= t_k`.
pub fn encode_axis(v: f64, grid: &DiscretizationGrid) -> Vec<f64> {
    grid.thresholds()
        .iter()
        .map(|&t| if v >= t { 1.0 } else { 0.0 })
        .collect()
}

/// Soft decode of one threshold vector: `Σ_k p_k · Δ_k`.
pub fn decode_axis(probs: &[f64], grid: &DiscretizationGrid) -> f64 {
    probs
        .iter()
        .zip(grid.intervals())
        .map(|(p, d)| p * d)
        .sum()
}

fn check_bounds(joints: &JointSet, grids: &GridSet) -> Result<()> {
    for (idx, j) in joints.joints.iter().enumerate() {
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let v = j.get(axis);
            let upper = grids.get(axis).upper_bound();
            if !(v >= 0.0 && v < upper) {
                return Err(Error::JointOutOfBounds {
                    joint: idx,
                    axis,
                    value: v,
                    upper,
                });
            }
        }
    }
    Ok(())
}

/// Encode ground-truth joints into binary probability maps, replicated over
/// the spatial axes of each map.
pub fn encode_gt(joints: &JointSet, grids: &GridSet, geom: &ImageGeometry) -> Result<ProbabilityMaps> {
    geom.validate()?;
    check_bounds(joints, grids)?;
    let a = joints.len();
    let rh = geom.feature_height();
    let rw = geom.feature_width();
    let (kx, ky, kz) = (grids.x.k(), grids.y.k(), grids.z.k());

    let bits_x: Vec<Vec<f64>> = joints.joints.iter().map(|j| encode_axis(j.x, &grids.x)).collect();
    let bits_y: Vec<Vec<f64>> = joints.joints.iter().map(|j| encode_axis(j.y, &grids.y)).collect();
    let bits_z: Vec<Vec<f64>> = joints.joints.iter().map(|j| encode_axis(j.z, &grids.z)).collect();

    let mut px = Tensor::zeros(&[rh, kx, a]);
    {
        let d = px.data_mut();
        for i in 0..rh {
            for k in 0..kx {
                for ja in 0..a {
                    d[(i * kx + k) * a + ja] = bits_x[ja][k];
                }
            }
        }
    }
    let mut py = Tensor::zeros(&[ky, rw, a]);
    {
        let d = py.data_mut();
        for k in 0..ky {
            for jcol in 0..rw {
                for ja in 0..a {
                    d[(k * rw + jcol) * a + ja] = bits_y[ja][k];
                }
            }
        }
    }
    let mut pz = Tensor::zeros(&[rh, rw, kz, a]);
    {
        let d = pz.data_mut();
        for i in 0..rh {
            for jcol in 0..rw {
                for k in 0..kz {
                    for ja in 0..a {
                        d[((i * rw + jcol) * kz + k) * a + ja] = bits_z[ja][k];
                    }
                }
            }
        }
    }
    Ok(ProbabilityMaps {
        prob_x: px,
        prob_y: py,
        prob_z: pz,
    })
}

/// Soft-decode probability maps into joint coordinates: interval-weighted
/// sums per replicate, then the mean over replicates.
pub fn decode(maps: &ProbabilityMaps, grids: &GridSet, geom: &ImageGeometry) -> Result<JointSet> {
    let a = maps.joint_count(grids, geom)?;
    for t in [&maps.prob_x, &maps.prob_y, &maps.prob_z] {
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "decode" });
        }
    }
    let rh = geom.feature_height();
    let rw = geom.feature_width();
    let (kx, ky, kz) = (grids.x.k(), grids.y.k(), grids.z.k());
    let (dx, dy, dz) = (grids.x.intervals(), grids.y.intervals(), grids.z.intervals());

    let mut joints = vec![Joint3::new(0.0, 0.0, 0.0); a];

    let px = maps.prob_x.data();
    for ja in 0..a {
        let mut total = 0.0;
        for i in 0..rh {
            for k in 0..kx {
                total += px[(i * kx + k) * a + ja] * dx[k];
            }
        }
        joints[ja].x = total / rh as f64;
    }
    let py = maps.prob_y.data();
    for ja in 0..a {
        let mut total = 0.0;
        for k in 0..ky {
            for jcol in 0..rw {
                total += py[(k * rw + jcol) * a + ja] * dy[k];
            }
        }
        joints[ja].y = total / rw as f64;
    }
    let pz = maps.prob_z.data();
    for ja in 0..a {
        let mut total = 0.0;
        for i in 0..rh {
            for jcol in 0..rw {
                for k in 0..kz {
                    total += pz[((i * rw + jcol) * kz + k) * a + ja] * dz[k];
                }
            }
        }
        joints[ja].z = total / (rh * rw) as f64;
    }
    Ok(JointSet::new(joints))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisErrorStats {
    pub max: f64,
    pub mean: f64,
}

/// Quantization audit: per-axis max/mean of `decode(encode(J)) − J`.
pub fn roundtrip_error(
    joints: &JointSet,
    grids: &GridSet,
    geom: &ImageGeometry,
) -> Result<[AxisErrorStats; 3]> {
    let decoded = decode(&encode_gt(joints, grids, geom)?, grids, geom)?;
    let n = joints.len().max(1) as f64;
    let mut stats = [AxisErrorStats { max: 0.0, mean: 0.0 }; 3];
    for (truth, dec) in joints.joints.iter().zip(&decoded.joints) {
        for (s, axis) in stats.iter_mut().zip([Axis::X, Axis::Y, Axis::Z]) {
            let err = dec.get(axis) - truth.get(axis);
            s.max = s.max.max(err);
            s.mean += err / n;
        }
    }
    Ok(stats)
}
