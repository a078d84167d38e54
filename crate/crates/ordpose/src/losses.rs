//! Training losses: per-axis ordinal cross-entropy, smooth-L1 joint
//! regression, and their weighted combination.
//!
//! The ordinal loss normalizer divides by the replicate and joint counts
//! but deliberately not by the threshold count, so it scales with grid
//! resolution; `normalize_thresholds` opts into dividing by K as well.
//! Batched forms divide by batch size, so reported numbers are per-sample.

use serde::{Deserialize, Serialize};

use crate::codec::{JointSet, ProbabilityMaps};
use crate::error::{Error, Result};
use crate::net::model::ForwardPass;
use crate::net::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight on the joint regression term.
    pub lambda_joint: f64,
    /// Weight on the ordinal terms; zero disables dense supervision.
    pub lambda_ord: f64,
    /// Smooth-L1 quadratic/linear switchover, in coordinate units.
    pub smooth_l1_beta: f64,
    /// Probabilities are clamped to [eps, 1-eps] before any log.
    pub clamp_eps: f64,
    /// Also divide ordinal losses by the threshold count.
    pub normalize_thresholds: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_joint: 3.0,
            lambda_ord: 2.0,
            smooth_l1_beta: 1.0,
            clamp_eps: 1e-7,
            normalize_thresholds: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_joint > 0.0) {
            return Err(Error::Config(format!(
                "lambda_joint must be positive, got {}",
                self.lambda_joint
            )));
        }
        if !(self.lambda_ord >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_ord must be non-negative, got {}",
                self.lambda_ord
            )));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config(format!(
                "smooth_l1_beta must be positive, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp_eps must be in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub joint: f64,
    pub ord_x: f64,
    pub ord_y: f64,
    pub ord_z: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,joint,ord_x,ord_y,ord_z,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.joint, self.ord_x, self.ord_y, self.ord_z, self.total
        )
    }
}

fn binary_cross_entropy_sum(pred: &Tensor, gt: &Tensor, eps: f64) -> f64 {
    let mut acc = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let p = p.clamp(eps, 1.0 - eps);
        acc += g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    -acc
}

fn check_binary(gt: &Tensor, axis: &str) -> Result<()> {
    if gt.data().iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::Config(format!(
            "ordinal ground truth for {axis} contains non-binary entries"
        )));
    }
    Ok(())
}

/// Per-axis ordinal losses of one sample's probability maps.
///
/// The divisor for each axis is (replicate count × joint count): rows for x,
/// columns for y, and the full spatial grid for z. Thresholds stay summed.
pub fn dor_loss(
    pred: &ProbabilityMaps,
    gt: &ProbabilityMaps,
    cfg: &LossConfig,
) -> Result<[f64; 3]> {
    cfg.validate()?;
    for (p, g, axis) in [
        (&pred.prob_x, &gt.prob_x, "x"),
        (&pred.prob_y, &gt.prob_y, "y"),
        (&pred.prob_z, &gt.prob_z, "z"),
    ] {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "dor_loss",
                detail: format!("{axis}: pred {:?} vs gt {:?}", p.shape(), g.shape()),
            });
        }
        check_binary(g, axis)?;
    }
    let sx = pred.prob_x.shape(); // [rows, k_x, joints]
    let sy = pred.prob_y.shape(); // [k_y, cols, joints]
    let sz = pred.prob_z.shape(); // [rows, cols, k_z, joints]
    let mut div_x = (sx[0] * sx[2]) as f64;
    let mut div_y = (sy[1] * sy[2]) as f64;
    let mut div_z = (sz[0] * sz[1] * sz[3]) as f64;
    if cfg.normalize_thresholds {
        div_x *= sx[1] as f64;
        div_y *= sy[0] as f64;
        div_z *= sz[2] as f64;
    }
    Ok([
        binary_cross_entropy_sum(&pred.prob_x, &gt.prob_x, cfg.clamp_eps) / div_x,
        binary_cross_entropy_sum(&pred.prob_y, &gt.prob_y, cfg.clamp_eps) / div_y,
        binary_cross_entropy_sum(&pred.prob_z, &gt.prob_z, cfg.clamp_eps) / div_z,
    ])
}

/// Smooth-L1 applied per coordinate and summed over joints.
pub fn joint_loss(pred: &JointSet, gt: &JointSet, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::Config(format!(
            "joint count mismatch: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let beta = cfg.smooth_l1_beta;
    let smooth = |d: f64| {
        if d.abs() < beta {
            d * d / (2.0 * beta)
        } else {
            d.abs() - beta / 2.0
        }
    };
    Ok(pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| smooth(p.x - g.x) + smooth(p.y - g.y) + smooth(p.z - g.z))
        .sum())
}

pub fn total_loss(joint: f64, ords: [f64; 3], cfg: &LossConfig) -> LossBreakdown {
    let [ord_x, ord_y, ord_z] = ords;
    LossBreakdown {
        joint,
        ord_x,
        ord_y,
        ord_z,
        total: cfg.lambda_joint * joint + cfg.lambda_ord * (ord_x + ord_y + ord_z),
    }
}

/// Tape ids of the batched loss terms; ordinal ids are absent when the
/// model has no probability maps to supervise.
pub struct LossIds {
    pub joint: ValueId,
    pub ord: Option<[ValueId; 3]>,
    pub total: ValueId,
}

/// Ground truth for one batch, already encoded and stacked batch-first.
pub struct BatchTargets {
    /// Coordinates per axis, each `[N, joints]`.
    pub coord_x: Tensor,
    pub coord_y: Tensor,
    pub coord_z: Tensor,
    /// Stacked binary maps matching the ordinal head output shapes.
    pub maps: Option<(Tensor, Tensor, Tensor)>,
}

/// Builds the full training objective on the tape:
/// total = λ_joint · joint + λ_ord · (ord_x + ord_y + ord_z),
/// every term averaged per sample.
pub fn build_training_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    targets: &BatchTargets,
    cfg: &LossConfig,
) -> Result<LossIds> {
    cfg.validate()?;
    let n = tape.value(pass.coord_x).shape()[0] as f64;

    let lx = tape.smooth_l1_sum(pass.coord_x, &targets.coord_x, cfg.smooth_l1_beta)?;
    let ly = tape.smooth_l1_sum(pass.coord_y, &targets.coord_y, cfg.smooth_l1_beta)?;
    let lz = tape.smooth_l1_sum(pass.coord_z, &targets.coord_z, cfg.smooth_l1_beta)?;
    let sum_xy = tape.add(lx, ly)?;
    let sum = tape.add(sum_xy, lz)?;
    let joint = tape.affine(sum, 1.0 / n, 0.0)?;

    let ord = match (&pass.probs, &targets.maps) {
        // a zero ordinal weight disables the term entirely so its columns
        // log as zero instead of as an unweighted value
        _ if cfg.lambda_ord == 0.0 => None,
        (Some(probs), Some((gx, gy, gz))) => {
            let mut build = |pred: ValueId, gt: &Tensor, k_axis: usize| -> Result<ValueId> {
                let shape = tape.value(pred).shape().to_vec();
                // all axes except batch, threshold, and joint replicate
                let mut div: f64 = shape.iter().product::<usize>() as f64 / shape[k_axis] as f64;
                if cfg.normalize_thresholds {
                    div *= shape[k_axis] as f64;
                }
                let s = tape.bce_sum(pred, gt, cfg.clamp_eps)?;
                tape.affine(s, -1.0 / div, 0.0)
            };
            // threshold axis positions: [N,H',Kx,A]=2, [N,Ky,W',A]=1, [N,H',W',Kz,A]=3
            let ox = build(probs.x, gx, 2)?;
            let oy = build(probs.y, gy, 1)?;
            let oz = build(probs.z, gz, 3)?;
            Some([ox, oy, oz])
        }
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::Config(
                "ordinal head requires encoded target maps".into(),
            ))
        }
    };

    let total = match ord {
        Some([ox, oy, oz]) => {
            let j = tape.affine(joint, cfg.lambda_joint, 0.0)?;
            let oxy = tape.add(ox, oy)?;
            let osum = tape.add(oxy, oz)?;
            let o = tape.affine(osum, cfg.lambda_ord, 0.0)?;
            tape.add(j, o)?
        }
        None => tape.affine(joint, cfg.lambda_joint, 0.0)?,
    };

    Ok(LossIds { joint, ord, total })
}

/// Reads the component values of built loss ids off the tape.
pub fn read_breakdown(tape: &Tape, ids: &LossIds, cfg: &LossConfig) -> LossBreakdown {
    let joint = tape.value(ids.joint).item();
    let [ord_x, ord_y, ord_z] = match ids.ord {
        Some([x, y, z]) => [
            tape.value(x).item(),
            tape.value(y).item(),
            tape.value(z).item(),
        ],
        None => [0.0; 3],
    };
    let mut b = total_loss(joint, [ord_x, ord_y, ord_z], cfg);
    // keep the reported total equal to the optimized scalar
    b.total = tape.value(ids.total).item();
    b
}
