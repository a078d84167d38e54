//! Synthetic depth-hand frames, corruption augmentations, and dataset IO.
//!
//! Frames are generated pre-cropped: the hand is already centered and
//! scaled, which stands in for the crop-and-resize step a real pipeline
//! would run. Depth is stored in native depth units and only normalized at
//! model input. To feed real sensor data, implement [`FrameSource`].

mod disk;
mod synth;

pub use disk::{read_dataset, write_dataset};
pub use synth::generate_frame;

use serde::{Deserialize, Serialize};

use crate::codec::JointSet;
use crate::error::{Error, Result};
use crate::geometry::ImageGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Box-blurs the depth map, softening silhouette edges.
    EdgeBlur,
    /// Zeroes rectangular patches, imitating missing sensor readings.
    HoleDropout,
    /// Adds Gaussian noise to every depth value.
    PlaneNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::EdgeBlur,
        CorruptionKind::HoleDropout,
        CorruptionKind::PlaneNoise,
    ];

    fn tag(self) -> u64 {
        match self {
            CorruptionKind::EdgeBlur => 0x45444745,
            CorruptionKind::HoleDropout => 0x484f4c45,
            CorruptionKind::PlaneNoise => 0x4e4f4953,
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorruptionKind::EdgeBlur => "edge_blur",
            CorruptionKind::HoleDropout => "hole_dropout",
            CorruptionKind::PlaneNoise => "plane_noise",
        })
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge_blur" => Ok(CorruptionKind::EdgeBlur),
            "hole_dropout" => Ok(CorruptionKind::HoleDropout),
            "plane_noise" => Ok(CorruptionKind::PlaneNoise),
            other => Err(Error::Config(format!(
                "unknown corruption kind '{other}' (expected edge_blur, hole_dropout, or plane_noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionTag {
    pub kind: CorruptionKind,
    pub magnitude: f64,
}

/// Parses `kind=magnitude`, e.g. `hole_dropout=0.4`.
impl std::str::FromStr for CorruptionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, mag) = s.split_once('=').ok_or_else(|| {
            Error::Config(format!("corruption '{s}' is not of the form kind=magnitude"))
        })?;
        let magnitude: f64 = mag
            .parse()
            .map_err(|_| Error::Config(format!("corruption magnitude '{mag}' is not a number")))?;
        Ok(CorruptionTag { kind: kind.parse()?, magnitude })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seed: u64,
    pub corruptions: Vec<CorruptionTag>,
}

#[derive(Debug, Clone)]
pub struct DepthFrame {
    /// Row-major H×W depth values in [0, depth_range]; 0 reads as a hole.
    pub depth: Vec<f32>,
    pub joints_gt: JointSet,
    pub meta: FrameMeta,
}

/// Everything the generator needs. Length-like fields are fractions of the
/// smaller image dimension (or of the depth range for z fields), so one
/// config scales across image sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub geometry: ImageGeometry,
    /// Recorded joints per frame: palm root, then two joints per digit,
    /// then palm-ring points as needed.
    pub joints: usize,
    pub palm_radius: [f64; 2],
    pub bone_length: [f64; 2],
    pub digit_radius: [f64; 2],
    /// Angle between adjacent digits, radians.
    pub fan_spread: f64,
    /// Uniform jitter added to each digit's direction, radians.
    pub angle_jitter: f64,
    /// Uniform jitter of the second bone's bend, radians.
    pub curl_jitter: f64,
    /// Max offset of the hand root from the image center, fraction of W/H.
    pub root_offset: f64,
    /// Std of the root depth around depth_range/2, fraction of depth_range;
    /// draws are clamped to two sigma.
    pub z_sigma: f64,
    /// Max per-bone depth drift, fraction of depth_range.
    pub z_bone_drift: f64,
    /// Fraction of pixels hole_dropout zeroes at magnitude 1.
    pub hole_ceiling: f64,
    /// Box blur radius in pixels at magnitude 1.
    pub blur_max_radius: usize,
    /// Gaussian depth noise sigma at magnitude 1, fraction of depth_range.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            geometry: ImageGeometry::new(224, 224, 224.0).unwrap(),
            joints: 14,
            palm_radius: [0.06, 0.09],
            bone_length: [0.09, 0.12],
            digit_radius: [0.022, 0.032],
            fan_spread: 0.45,
            angle_jitter: 0.04,
            curl_jitter: 0.15,
            root_offset: 0.10,
            z_sigma: 1.0 / 12.0,
            z_bone_drift: 0.015,
            hole_ceiling: 0.5,
            blur_max_radius: 4,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.joints < 2 {
            return Err(Error::Config(format!(
                "need at least 2 joints, got {}",
                self.joints
            )));
        }
        for (name, [lo, hi]) in [
            ("palm_radius", self.palm_radius),
            ("bone_length", self.bone_length),
            ("digit_radius", self.digit_radius),
        ] {
            if !(0.0 < lo && lo < hi) {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] must satisfy 0 < lo < hi"
                )));
            }
        }
        for (name, v) in [
            ("fan_spread", self.fan_spread),
            ("z_sigma", self.z_sigma),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("angle_jitter", self.angle_jitter),
            ("curl_jitter", self.curl_jitter),
            ("root_offset", self.root_offset),
            ("z_bone_drift", self.z_bone_drift),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0 < self.hole_ceiling && self.hole_ceiling <= 1.0) {
            return Err(Error::Config(format!(
                "hole_ceiling must be in (0, 1], got {}",
                self.hole_ceiling
            )));
        }
        // the farthest any surface can reach from the image center
        let reach = self.root_offset
            + self.palm_radius[1]
            + 2.0 * self.bone_length[1]
            + self.digit_radius[1];
        if reach > 0.49 {
            return Err(Error::Config(format!(
                "kinematic reach {reach:.3} of the half-extent would leave the frame; \
                 shrink root_offset, palm_radius, or bone_length"
            )));
        }
        let z_span = 2.0 * self.z_sigma + 2.0 * self.z_bone_drift;
        if z_span > 0.25 {
            return Err(Error::Config(format!(
                "depth span {z_span:.3} exceeds the [D/4, 3D/4] joint budget"
            )));
        }
        Ok(())
    }
}

/// Applies one corruption, returning a new frame with the tag recorded.
/// Deterministic in (frame seed, kind, magnitude); magnitude 0 leaves the
/// depth untouched.
pub fn corrupt(
    cfg: &SynthConfig,
    frame: &DepthFrame,
    kind: CorruptionKind,
    magnitude: f64,
) -> Result<DepthFrame> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::Config(format!(
            "corruption magnitude must be in [0, 1], got {magnitude}"
        )));
    }
    let mut out = frame.clone();
    out.meta.corruptions.push(CorruptionTag { kind, magnitude });
    if magnitude == 0.0 {
        return Ok(out);
    }
    let geom = &cfg.geometry;
    let (w, h) = (geom.width, geom.height);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(
        frame
            .meta
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ kind.tag()
            ^ magnitude.to_bits(),
    );
    match kind {
        CorruptionKind::EdgeBlur => {
            let radius = (magnitude * cfg.blur_max_radius as f64).round() as usize;
            if radius == 0 {
                return Ok(out);
            }
            let src = frame.depth.clone();
            for y in 0..h {
                for x in 0..w {
                    let y0 = y.saturating_sub(radius);
                    let y1 = (y + radius).min(h - 1);
                    let x0 = x.saturating_sub(radius);
                    let x1 = (x + radius).min(w - 1);
                    let mut acc = 0.0f64;
                    let mut n = 0u32;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            acc += src[yy * w + xx] as f64;
                            n += 1;
                        }
                    }
                    out.depth[y * w + x] = (acc / n as f64) as f32;
                }
            }
        }
        CorruptionKind::HoleDropout => {
            let target = (magnitude * cfg.hole_ceiling * (w * h) as f64).ceil() as usize;
            let mut zeroed = frame.depth.iter().filter(|&&v| v == 0.0).count();
            let side = w.min(h) as f64;
            let mut guard = 0;
            while zeroed < target && guard < 10_000 {
                guard += 1;
                let rw = (rng.gen_range(0.05..0.20) * side).ceil() as usize;
                let rh = (rng.gen_range(0.05..0.20) * side).ceil() as usize;
                let x0 = rng.gen_range(0..w);
                let y0 = rng.gen_range(0..h);
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        let v = &mut out.depth[y * w + x];
                        if *v != 0.0 {
                            *v = 0.0;
                            zeroed += 1;
                        }
                    }
                }
            }
        }
        CorruptionKind::PlaneNoise => {
            let sigma = magnitude * cfg.noise_sigma * geom.depth_range;
            let normal = rand_distr::Normal::new(0.0, sigma).map_err(|e| {
                Error::Config(format!("bad noise sigma {sigma}: {e}"))
            })?;
            for v in &mut out.depth {
                let noisy = *v as f64 + rand_distr::Distribution::sample(&normal, &mut rng);
                *v = noisy.clamp(0.0, geom.depth_range) as f32;
            }
        }
    }
    Ok(out)
}

/// Adapter interface for feeding frames to training and evaluation. The
/// synthetic generator and the disk reader both implement it; wrap real
/// sensor data by implementing it yourself.
pub trait FrameSource {
    fn geometry(&self) -> &ImageGeometry;
    fn count(&self) -> usize;
    fn get(&self, index: usize) -> Result<DepthFrame>;
}

/// Frames generated on demand: frame `i` uses seed `start_seed + i`, then
/// the configured corruptions in order.
pub struct SynthSource {
    pub cfg: SynthConfig,
    pub start_seed: u64,
    pub count: usize,
    pub corruptions: Vec<CorruptionTag>,
}

impl FrameSource for SynthSource {
    fn geometry(&self) -> &ImageGeometry {
        &self.cfg.geometry
    }

    fn count(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<DepthFrame> {
        let mut frame = generate_frame(&self.cfg, self.start_seed + index as u64)?;
        for tag in &self.corruptions {
            frame = corrupt(&self.cfg, &frame, tag.kind, tag.magnitude)?;
        }
        Ok(frame)
    }
}

/// Frames already materialized in memory (e.g. read from disk).
pub struct MemorySource {
    pub geometry: ImageGeometry,
    pub frames: Vec<DepthFrame>,
}

impl FrameSource for MemorySource {
    fn geometry(&self) -> &ImageGeometry {
        &self.geometry
    }

    fn count(&self) -> usize {
        self.frames.len()
    }

    fn get(&self, index: usize) -> Result<DepthFrame> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::FrameCount {
                detail: format!(
                    "frame {index} requested from a source of {}",
                    self.frames.len()
                ),
            })
    }
}

pub fn collect_frames(source: &dyn FrameSource) -> Result<Vec<DepthFrame>> {
    (0..source.count()).map(|i| source.get(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            geometry: ImageGeometry::with_stride(64, 64, 64.0, 32).unwrap(),
            joints: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn corruption_kind_parsing() {
        assert_eq!(
            "edge_blur".parse::<CorruptionKind>().unwrap(),
            CorruptionKind::EdgeBlur
        );
        assert!("fog".parse::<CorruptionKind>().is_err());
        let tag: CorruptionTag = "hole_dropout=0.4".parse().unwrap();
        assert_eq!(tag.kind, CorruptionKind::HoleDropout);
        assert_eq!(tag.magnitude, 0.4);
        assert!("hole_dropout".parse::<CorruptionTag>().is_err());
        assert!("hole_dropout=much".parse::<CorruptionTag>().is_err());
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let cfg = small_cfg();
        let frame = generate_frame(&cfg, 5).unwrap();
        for kind in CorruptionKind::ALL {
            let c = corrupt(&cfg, &frame, kind, 0.0).unwrap();
            assert_eq!(c.depth, frame.depth, "{kind} at magnitude 0 changed depth");
            assert_eq!(c.joints_gt.joints, frame.joints_gt.joints);
            assert_eq!(c.meta.corruptions.len(), 1);
        }
    }

    #[test]
    fn corruptions_are_deterministic_and_keep_joints() {
        let cfg = small_cfg();
        let frame = generate_frame(&cfg, 6).unwrap();
        for kind in CorruptionKind::ALL {
            let a = corrupt(&cfg, &frame, kind, 0.7).unwrap();
            let b = corrupt(&cfg, &frame, kind, 0.7).unwrap();
            assert_eq!(a.depth, b.depth, "{kind} not deterministic");
            assert_eq!(a.joints_gt.joints, frame.joints_gt.joints);
            // a different magnitude must actually change the output
            let c = corrupt(&cfg, &frame, kind, 0.3).unwrap();
            assert_ne!(a.depth, c.depth, "{kind} ignores magnitude");
        }
    }

    #[test]
    fn hole_dropout_hits_its_ceiling() {
        let cfg = small_cfg();
        let frame = generate_frame(&cfg, 7).unwrap();
        let c = corrupt(&cfg, &frame, CorruptionKind::HoleDropout, 1.0).unwrap();
        let zeroed = c.depth.iter().filter(|&&v| v == 0.0).count();
        let total = cfg.geometry.pixels();
        assert!(
            zeroed as f64 >= 0.5 * total as f64,
            "only {zeroed}/{total} pixels zeroed at full magnitude"
        );
    }

    #[test]
    fn plane_noise_stays_in_depth_bounds() {
        let cfg = small_cfg();
        let frame = generate_frame(&cfg, 8).unwrap();
        let c = corrupt(&cfg, &frame, CorruptionKind::PlaneNoise, 1.0).unwrap();
        let d = cfg.geometry.depth_range as f32;
        assert!(c.depth.iter().all(|&v| (0.0..=d).contains(&v)));
    }

    #[test]
    fn magnitude_out_of_range_rejected() {
        let cfg = small_cfg();
        let frame = generate_frame(&cfg, 9).unwrap();
        assert!(corrupt(&cfg, &frame, CorruptionKind::EdgeBlur, 1.5).is_err());
        assert!(corrupt(&cfg, &frame, CorruptionKind::EdgeBlur, -0.1).is_err());
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        assert!(SynthConfig::default().validate().is_ok());
        let mut c = SynthConfig::default();
        c.joints = 1;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.palm_radius = [0.09, 0.06];
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.bone_length = [0.09, 0.25]; // reach past the frame edge
        assert!(c.validate().is_err());
    }

    #[test]
    fn synth_source_applies_corruptions() {
        let cfg = small_cfg();
        let plain = SynthSource {
            cfg: cfg.clone(),
            start_seed: 100,
            count: 3,
            corruptions: vec![],
        };
        let noisy = SynthSource {
            cfg,
            start_seed: 100,
            count: 3,
            corruptions: vec![CorruptionTag {
                kind: CorruptionKind::PlaneNoise,
                magnitude: 0.5,
            }],
        };
        assert_eq!(plain.count(), 3);
        let a = plain.get(1).unwrap();
        let b = noisy.get(1).unwrap();
        assert_eq!(a.meta.seed, b.meta.seed);
        assert_ne!(a.depth, b.depth);
        assert_eq!(a.joints_gt.joints, b.joints_gt.joints);
    }
}
