//! On-disk dataset layout:
//!
//! ```text
//! dataset/
//!   manifest.json      geometry, counts, per-frame records, format version
//!   frames/NNNNNN.f32  row-major H×W little-endian f32 depth
//!   joints.csv         frame_index,joint_index,x,y,z
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Joint3, JointSet};
use crate::data::{DepthFrame, FrameMeta};
use crate::error::{Error, Result};
use crate::geometry::ImageGeometry;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    #[serde(flatten)]
    meta: FrameMeta,
    blob: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    geometry: ImageGeometry,
    count: usize,
    joints_per_frame: usize,
    frames: Vec<FrameRecord>,
}

pub fn write_dataset(dir: &Path, geom: &ImageGeometry, frames: &[DepthFrame]) -> Result<()> {
    geom.validate()?;
    let joints_per_frame = frames.first().map(|f| f.joints_gt.len()).unwrap_or(0);
    for (i, f) in frames.iter().enumerate() {
        if f.depth.len() != geom.pixels() {
            return Err(Error::Config(format!(
                "frame {i} has {} depth values, geometry wants {}",
                f.depth.len(),
                geom.pixels()
            )));
        }
        if f.joints_gt.len() != joints_per_frame {
            return Err(Error::Config(format!(
                "frame {i} has {} joints, frame 0 has {joints_per_frame}",
                f.joints_gt.len()
            )));
        }
    }

    fs::create_dir_all(dir.join("frames"))?;
    let mut records = Vec::with_capacity(frames.len());
    let mut csv = String::from("frame_index,joint_index,x,y,z\n");
    for (i, frame) in frames.iter().enumerate() {
        let blob = format!("frames/{i:06}.f32");
        let mut bytes = Vec::with_capacity(frame.depth.len() * 4);
        for &v in &frame.depth {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&blob), bytes)?;
        for (a, j) in frame.joints_gt.joints.iter().enumerate() {
            csv.push_str(&format!("{i},{a},{},{},{}\n", j.x, j.y, j.z));
        }
        records.push(FrameRecord { meta: frame.meta.clone(), blob });
    }
    fs::write(dir.join("joints.csv"), csv)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        geometry: *geom,
        count: frames.len(),
        joints_per_frame,
        frames: records,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(ImageGeometry, Vec<DepthFrame>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    manifest.geometry.validate()?;
    if manifest.count != manifest.frames.len() {
        return Err(Error::FrameCount {
            detail: format!(
                "manifest count {} but {} frame records",
                manifest.count,
                manifest.frames.len()
            ),
        });
    }

    // all blobs must exist before any is read: a missing file is a count
    // disagreement, not a truncation
    let missing: Vec<usize> = manifest
        .frames
        .iter()
        .enumerate()
        .filter(|(_, r)| !dir.join(&r.blob).is_file())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(Error::FrameCount {
            detail: format!(
                "manifest lists {} frames but blobs for frames {missing:?} are missing",
                manifest.count
            ),
        });
    }

    let joints = read_joints_csv(
        &dir.join("joints.csv"),
        manifest.count,
        manifest.joints_per_frame,
    )?;

    let expected_len = manifest.geometry.pixels() as u64 * 4;
    let mut frames = Vec::with_capacity(manifest.count);
    for (record, joint_set) in manifest.frames.into_iter().zip(joints) {
        let path = dir.join(&record.blob);
        let bytes = fs::read(&path)?;
        if bytes.len() as u64 != expected_len {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                expected: expected_len,
                found: bytes.len() as u64,
            });
        }
        let depth: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(DepthFrame {
            depth,
            joints_gt: joint_set,
            meta: record.meta,
        });
    }
    Ok((manifest.geometry, frames))
}

fn read_joints_csv(path: &Path, count: usize, joints_per_frame: usize) -> Result<Vec<JointSet>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame_index,joint_index,x,y,z") => {}
        other => {
            return Err(Error::DatasetFormat(format!(
                "joints.csv header is {other:?}"
            )))
        }
    }
    let mut sets = vec![Vec::with_capacity(joints_per_frame); count];
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = || {
            fields.next().ok_or_else(|| {
                Error::DatasetFormat(format!("joints.csv line {}: too few fields", lineno + 2))
            })
        };
        let parse_err =
            |v: &str| Error::DatasetFormat(format!("joints.csv line {}: bad number '{v}'", lineno + 2));
        let fi: usize = next()?.parse().map_err(|_| parse_err(line))?;
        let ji: usize = next()?.parse().map_err(|_| parse_err(line))?;
        let x: f64 = next()?.parse().map_err(|_| parse_err(line))?;
        let y: f64 = next()?.parse().map_err(|_| parse_err(line))?;
        let z: f64 = next()?.parse().map_err(|_| parse_err(line))?;
        if fi >= count || ji != sets[fi].len() {
            return Err(Error::DatasetFormat(format!(
                "joints.csv line {}: unexpected indices ({fi}, {ji})",
                lineno + 2
            )));
        }
        sets[fi].push(Joint3::new(x, y, z));
    }
    for (i, s) in sets.iter().enumerate() {
        if s.len() != joints_per_frame {
            return Err(Error::DatasetFormat(format!(
                "frame {i} has {} joints in joints.csv, manifest says {joints_per_frame}",
                s.len()
            )));
        }
    }
    Ok(sets.into_iter().map(JointSet::new).collect())
}
