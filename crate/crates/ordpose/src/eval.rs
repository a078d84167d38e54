//! Pose metrics: mean 3D error, per-axis and per-joint breakdowns, and the
//! success curve (fraction of frames whose worst joint stays under a
//! threshold).

use crate::codec::JointSet;
use crate::data::{collect_frames, FrameSource};
use crate::error::{Error, Result};
use crate::geometry::{augment_input, make_uvmap};
use crate::grid::Axis;
use crate::net::model::extract_joint_sets;
use crate::net::{Model, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub joints_per_frame: usize,
    /// Mean over frames and joints of the Euclidean prediction error.
    pub mean_3d_error: f64,
    /// Mean absolute error per axis, x/y/z.
    pub per_axis_error: [f64; 3],
    /// Mean 3D error per joint index.
    pub per_joint_error: Vec<f64>,
    /// (threshold, fraction of frames whose worst joint error < threshold),
    /// sorted by threshold.
    pub success_curve: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("frames,{}\n", self.frames));
        out.push_str(&format!("joints_per_frame,{}\n", self.joints_per_frame));
        out.push_str(&format!("mean_3d_error,{}\n", self.mean_3d_error));
        out.push_str(&format!("mean_abs_x,{}\n", self.per_axis_error[0]));
        out.push_str(&format!("mean_abs_y,{}\n", self.per_axis_error[1]));
        out.push_str(&format!("mean_abs_z,{}\n", self.per_axis_error[2]));
        for (j, e) in self.per_joint_error.iter().enumerate() {
            out.push_str(&format!("joint_{j}_error,{e}\n"));
        }
        for (tau, frac) in &self.success_curve {
            out.push_str(&format!("success@{tau},{frac}\n"));
        }
        out
    }
}

/// Compares predictions against ground truth, frame by frame.
pub fn evaluate_sets(
    pred: &[JointSet],
    gt: &[JointSet],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if pred.is_empty() {
        return Err(Error::Config("evaluation needs at least one frame".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Config(format!(
            "{} predictions vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let a = gt[0].len();
    if a == 0 {
        return Err(Error::Config("ground truth has zero joints".into()));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != a || g.len() != a {
            return Err(Error::Config(format!(
                "frame {i}: {} predicted vs {} true joints (expected {a})",
                p.len(),
                g.len()
            )));
        }
    }

    let n = pred.len();
    let mut mean_3d = 0.0;
    let mut per_axis = [0.0f64; 3];
    let mut per_joint = vec![0.0f64; a];
    let mut worst = vec![0.0f64; n];
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        for (j, (pj, gj)) in p.joints.iter().zip(&g.joints).enumerate() {
            let d = pj.dist(gj);
            mean_3d += d;
            per_joint[j] += d;
            worst[i] = worst[i].max(d);
            for (acc, axis) in per_axis.iter_mut().zip([Axis::X, Axis::Y, Axis::Z]) {
                *acc += (pj.get(axis) - gj.get(axis)).abs();
            }
        }
    }
    let total = (n * a) as f64;
    mean_3d /= total;
    for acc in &mut per_axis {
        *acc /= total;
    }
    for acc in &mut per_joint {
        *acc /= n as f64;
    }

    let mut taus: Vec<f64> = thresholds.to_vec();
    taus.sort_by(|p, q| p.total_cmp(q));
    taus.dedup();
    let success_curve = taus
        .into_iter()
        .map(|tau| {
            let hits = worst.iter().filter(|&&w| w < tau).count();
            (tau, hits as f64 / n as f64)
        })
        .collect();

    Ok(EvalReport {
        frames: n,
        joints_per_frame: a,
        mean_3d_error: mean_3d,
        per_axis_error: per_axis,
        per_joint_error: per_joint,
        success_curve,
    })
}

/// Runs the model over a frame source in batches and scores the decoded
/// joints against the source's ground truth.
pub fn evaluate_model(
    model: &Model,
    source: &dyn FrameSource,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let geom = model.geometry();
    let sg = source.geometry();
    if sg.width != geom.width || sg.height != geom.height || sg.depth_range != geom.depth_range {
        return Err(Error::Config(format!(
            "source frames are {}x{} depth {}, model wants {}x{} depth {}",
            sg.width, sg.height, sg.depth_range, geom.width, geom.height, geom.depth_range
        )));
    }
    let frames = collect_frames(source)?;
    if frames.is_empty() {
        return Err(Error::Config("evaluation needs at least one frame".into()));
    }
    let uv = make_uvmap(geom)?;

    let mut pred = Vec::with_capacity(frames.len());
    let mut gt = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|f| Ok(augment_input(&f.depth, &uv, geom)?.tensor))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, Tensor::stack(&inputs)?)?;
        pred.extend(extract_joint_sets(&tape, &pass));
        gt.extend(chunk.iter().map(|f| f.joints_gt.clone()));
    }
    evaluate_sets(&pred, &gt, thresholds)
}
