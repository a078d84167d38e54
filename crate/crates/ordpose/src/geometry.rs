//! Working-frame geometry: image extents, depth range, feature stride, the
//! UV coordinate planes, and depth normalization.
//!
//! Pixel convention: `(i, j)` is row `i` in `[0, H)`, column `j` in `[0, W)`.
//! Joint x runs along columns, y along rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    /// Raw depth values live in [0, depth_range].
    pub depth_range: f64,
    /// Backbone downsampling factor; width and height divide by it.
    pub stride: usize,
}

impl ImageGeometry {
    pub fn new(width: usize, height: usize, depth_range: f64) -> Result<Self> {
        Self::with_stride(width, height, depth_range, DEFAULT_STRIDE)
    }

    pub fn with_stride(width: usize, height: usize, depth_range: f64, stride: usize) -> Result<Self> {
        let geom = ImageGeometry {
            width,
            height,
            depth_range,
            stride,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry(format!(
                "zero image dimension ({}x{})",
                self.width, self.height
            )));
        }
        if !(self.depth_range > 0.0) || !self.depth_range.is_finite() {
            return Err(Error::Geometry(format!(
                "depth range must be positive and finite, got {}",
                self.depth_range
            )));
        }
        if self.stride == 0 {
            return Err(Error::Geometry("zero stride".into()));
        }
        if self.width % self.stride != 0 || self.height % self.stride != 0 {
            return Err(Error::Geometry(format!(
                "{}x{} not divisible by stride {}",
                self.width, self.height, self.stride
            )));
        }
        Ok(())
    }

    /// Spatial width of every feature / probability map.
    pub fn feature_width(&self) -> usize {
        self.width / self.stride
    }

    /// Spatial height of every feature / probability map.
    pub fn feature_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// The two unitless coordinate planes appended to the depth channel:
/// `u(i, j) = j / W` and `v(i, j) = i / H`, exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl UvMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.width + j]
    }

    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.width + j]
    }

    pub fn u_plane(&self) -> &[f64] {
        &self.u
    }

    pub fn v_plane(&self) -> &[f64] {
        &self.v
    }
}

/// num/den as the double whose product with den rounds back to num, when
/// such a double exists. The correctly rounded quotient alone can be one
/// ulp off that identity (224 has seven such columns), and for a few
/// index/size pairs no double satisfies it at all; those keep the rounded
/// quotient and recover their index to within one ulp.
fn snapped_div(num: usize, den: usize) -> f64 {
    let (n, d) = (num as f64, den as f64);
    let q = n / d;
    if q == 0.0 || q * d == n {
        return q;
    }
    for step in 1..=2i64 {
        for sgn in [1i64, -1] {
            let candidate = f64::from_bits((q.to_bits() as i64 + sgn * step) as u64);
            if candidate * d == n {
                return candidate;
            }
        }
    }
    q
}

pub fn make_uvmap(geom: &ImageGeometry) -> Result<UvMap> {
    geom.validate()?;
    let (w, h) = (geom.width, geom.height);
    let col: Vec<f64> = (0..w).map(|j| snapped_div(j, w)).collect();
    let row: Vec<f64> = (0..h).map(|i| snapped_div(i, h)).collect();
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            u[i * w + j] = col[j];
            v[i * w + j] = row[i];
        }
    }
    Ok(UvMap {
        width: w,
        height: h,
        u,
        v,
    })
}

/// Linear map raw/D into [0,1]. Out-of-range values clamp; callers that need
/// the clamp count use [`augment_input`] or count separately.
pub fn normalize_depth(raw: f64, geom: &ImageGeometry) -> f64 {
    (raw / geom.depth_range).clamp(0.0, 1.0)
}

pub fn denormalize_depth(unit: f64, geom: &ImageGeometry) -> f64 {
    unit * geom.depth_range
}

/// Network input built from one depth frame: channel 0 is normalized depth,
/// channels 1 and 2 are the U and V planes. Shape `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct AugmentedInput {
    pub tensor: Tensor,
    /// Number of depth samples that fell outside [0, D] and were clamped.
    pub clamped: usize,
}

pub fn augment_input(depth: &[f32], uv: &UvMap, geom: &ImageGeometry) -> Result<AugmentedInput> {
    geom.validate()?;
    if uv.width != geom.width || uv.height != geom.height {
        return Err(Error::Shape {
            op: "augment_input",
            detail: format!(
                "uv map {}x{} vs geometry {}x{}",
                uv.width, uv.height, geom.width, geom.height
            ),
        });
    }
    let px = geom.pixels();
    if depth.len() != px {
        return Err(Error::Shape {
            op: "augment_input",
            detail: format!("depth buffer has {} samples, geometry needs {}", depth.len(), px),
        });
    }
    let mut data = vec![0.0f64; 3 * px];
    let mut clamped = 0usize;
    for (k, &raw) in depth.iter().enumerate() {
        let raw = raw as f64;
        if raw < 0.0 || raw > geom.depth_range {
            clamped += 1;
        }
        data[k] = normalize_depth(raw, geom);
    }
    data[px..2 * px].copy_from_slice(uv.u_plane());
    data[2 * px..].copy_from_slice(uv.v_plane());
    Ok(AugmentedInput {
        tensor: Tensor::from_vec(&[3, geom.height, geom.width], data)?,
        clamped,
    })
}
