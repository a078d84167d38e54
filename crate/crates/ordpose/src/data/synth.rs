//! Procedural depth-hand generator.
//!
//! A frame is a palm sphere plus five two-bone digit chains rendered as
//! capsules, z-buffered against a far background. Joints are recorded in a
//! fixed order: palm root, then (mid, tip) for each digit, then palm-ring
//! points filling out larger joint counts. Everything is drawn from one
//! seeded RNG, so a (config, seed) pair pins the frame bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{Joint3, JointSet};
use crate::data::{DepthFrame, FrameMeta, SynthConfig};
use crate::error::{Error, Result};

/// Digit chain joints rendered per frame: five digits, two joints each,
/// plus the root. Ring points are appended beyond this.
const CHAIN_JOINTS: usize = 11;

pub fn generate_frame(cfg: &SynthConfig, seed: u64) -> Result<DepthFrame> {
    cfg.validate()?;
    let geom = &cfg.geometry;
    let (w, h) = (geom.width, geom.height);
    let d_range = geom.depth_range;
    let s = w.min(h) as f64;

    let mut rng = ChaCha12Rng::seed_from_u64(
        cfg.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let palm_r = rng.gen_range(cfg.palm_radius[0]..cfg.palm_radius[1]) * s;
    let root_x = w as f64 / 2.0 + rng.gen_range(-1.0..1.0) * cfg.root_offset * w as f64;
    let root_y = h as f64 / 2.0 + rng.gen_range(-1.0..1.0) * cfg.root_offset * h as f64;
    let z_sigma = cfg.z_sigma * d_range;
    let normal = Normal::new(d_range / 2.0, z_sigma).expect("validated sigma");
    let root_z = normal
        .sample(&mut rng)
        .clamp(d_range / 2.0 - 2.0 * z_sigma, d_range / 2.0 + 2.0 * z_sigma);
    let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut depth = vec![d_range as f32; w * h];
    render_sphere(&mut depth, w, h, root_x, root_y, root_z, palm_r, d_range);

    let mut chain = Vec::with_capacity(CHAIN_JOINTS);
    chain.push(Joint3::new(root_x, root_y, root_z));

    for digit in 0..5 {
        let ang = theta0
            + (digit as f64 - 2.0) * cfg.fan_spread
            + rng.gen_range(-1.0..1.0) * cfg.angle_jitter;
        let len1 = rng.gen_range(cfg.bone_length[0]..cfg.bone_length[1]) * s;
        let len2 = rng.gen_range(cfg.bone_length[0]..cfg.bone_length[1]) * s;
        let r_d = rng.gen_range(cfg.digit_radius[0]..cfg.digit_radius[1]) * s;
        let curl = rng.gen_range(-1.0..1.0) * cfg.curl_jitter;
        let dz1 = rng.gen_range(-1.0..1.0) * cfg.z_bone_drift * d_range;
        let dz2 = rng.gen_range(-1.0..1.0) * cfg.z_bone_drift * d_range;

        let (dir1x, dir1y) = (ang.cos(), ang.sin());
        let (dir2x, dir2y) = ((ang + curl).cos(), (ang + curl).sin());
        let base = (root_x + palm_r * dir1x, root_y + palm_r * dir1y, root_z);
        let mid = (base.0 + len1 * dir1x, base.1 + len1 * dir1y, root_z + dz1);
        let tip = (mid.0 + len2 * dir2x, mid.1 + len2 * dir2y, mid.2 + dz2);

        render_capsule(&mut depth, w, h, base, mid, r_d, d_range);
        render_capsule(&mut depth, w, h, mid, tip, 0.85 * r_d, d_range);

        chain.push(Joint3::new(mid.0, mid.1, mid.2));
        chain.push(Joint3::new(tip.0, tip.1, tip.2));
    }

    let mut joints = chain;
    joints.truncate(cfg.joints);
    if cfg.joints > CHAIN_JOINTS {
        // ring points sit halfway into the palm, on the root's depth plane
        let n_ring = cfg.joints - CHAIN_JOINTS;
        for k in 0..n_ring {
            let ang = theta0 + std::f64::consts::TAU * (k as f64 + 0.5) / n_ring as f64;
            joints.push(Joint3::new(
                root_x + 0.5 * palm_r * ang.cos(),
                root_y + 0.5 * palm_r * ang.sin(),
                root_z,
            ));
        }
    }

    for (i, j) in joints.iter().enumerate() {
        let ok = j.x >= 0.0
            && j.x < w as f64
            && j.y >= 0.0
            && j.y < h as f64
            && j.z >= d_range / 4.0
            && j.z <= 3.0 * d_range / 4.0;
        if !ok {
            return Err(Error::Geometry(format!(
                "generated joint {i} at ({}, {}, {}) escapes the frame bounds",
                j.x, j.y, j.z
            )));
        }
    }

    Ok(DepthFrame {
        depth,
        joints_gt: JointSet::new(joints),
        meta: FrameMeta { seed, corruptions: Vec::new() },
    })
}

fn bbox(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    (x0, y0, x1, y1)
}

fn render_sphere(
    depth: &mut [f32],
    w: usize,
    h: usize,
    cx: f64,
    cy: f64,
    cz: f64,
    r: f64,
    d_max: f64,
) {
    let (x0, y0, x1, y1) = bbox(w, h, cx, cy, r);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r * r {
                let z = (cz - (r * r - d2).sqrt()).clamp(0.0, d_max) as f32;
                let cell = &mut depth[y * w + x];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
}

/// Capsule between two 3D points (lateral coordinates in pixels, depth in
/// depth units); the cross-section dips like a sphere around the segment's
/// nearest point, with depth interpolated along the segment.
fn render_capsule(
    depth: &mut [f32],
    w: usize,
    h: usize,
    p: (f64, f64, f64),
    q: (f64, f64, f64),
    r: f64,
    d_max: f64,
) {
    let (x0, y0, x1, y1) = bbox(
        w,
        h,
        (p.0 + q.0) / 2.0,
        (p.1 + q.1) / 2.0,
        r + ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt() / 2.0,
    );
    let vx = q.0 - p.0;
    let vy = q.1 - p.1;
    let len2 = vx * vx + vy * vy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let px = x as f64 - p.0;
            let py = y as f64 - p.1;
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = px - t * vx;
            let dy = py - t * vy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r * r {
                let zc = p.2 + t * (q.2 - p.2);
                let z = (zc - (r * r - d2).sqrt()).clamp(0.0, d_max) as f32;
                let cell = &mut depth[y * w + x];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
}
