//! The pose network: a strided conv encoder producing two feature maps,
//! plus either ordinal-classification heads or an offset-regression head.
//!
//! The encoder halves the spatial dims once per stage, so `stride` must be
//! 2^stages. Both feature maps live at (H/stride, W/stride). The ordinal
//! heads merge one spatial axis into the channel axis so that each output
//! location carries a full set of per-joint threshold probabilities; the
//! leftover spatial axes act as independent replicates that decoding
//! averages over.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{GridSet, Joint3, JointSet, ProbabilityMaps};
use crate::error::{Error, Result};
use crate::geometry::ImageGeometry;
use crate::net::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Ordered binary classifiers per coordinate, decoded by summing
    /// interval widths. The main path.
    Ordinal,
    /// Attention-weighted offset regression, kept as a comparison baseline.
    Offset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Joints predicted per frame.
    pub joints: usize,
    /// Output channels of each stride-2 encoder stage.
    pub widths: Vec<usize>,
    /// Odd kernel size per stage, padded k/2 so even dims halve exactly.
    pub kernels: Vec<usize>,
    /// Channels of both feature maps.
    pub feature_channels: usize,
    /// Two softmaxed logits per binary classifier; `false` uses a single
    /// sigmoid logit instead.
    pub two_logit: bool,
    pub head: HeadKind,
    /// When false the model blanks the input's coordinate channels, leaving
    /// depth alone. Recorded here so checkpoints evaluate as trained.
    #[serde(default = "default_true")]
    pub uvmap: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 14,
            widths: vec![8, 16, 32, 48, 64],
            kernels: vec![3, 3, 5, 5, 7],
            feature_channels: 64,
            two_logit: true,
            head: HeadKind::Ordinal,
            uvmap: true,
            seed: 42,
        }
    }
}

/// Classifier-head geometry, derived from the grids and config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub k_x: usize,
    pub k_y: usize,
    pub k_z: usize,
    pub joints: usize,
    pub two_logit: bool,
}

impl HeadConfig {
    pub fn logits_per_classifier(&self) -> usize {
        if self.two_logit {
            2
        } else {
            1
        }
    }

    /// The width axis merges into channels for the x head (and height for
    /// the y head), which only works if the counts divide evenly.
    pub fn validate(&self, geom: &ImageGeometry) -> Result<()> {
        let (fw, fh) = (geom.feature_width(), geom.feature_height());
        if self.k_x * self.joints % fw != 0 {
            return Err(Error::Config(format!(
                "x head needs k_x*joints divisible by feature width: {}*{} % {} != 0",
                self.k_x, self.joints, fw
            )));
        }
        if self.k_y * self.joints % fh != 0 {
            return Err(Error::Config(format!(
                "y head needs k_y*joints divisible by feature height: {}*{} % {} != 0",
                self.k_y, self.joints, fh
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv {
    name: &'static str,
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

/// Keeps the starting logits small so every classifier begins near
/// probability one half instead of saturating its cross-entropy.
const HEAD_STD: f64 = 0.02;

/// Signal-preserving weight scale for the relu trunk. A fixed small std
/// shrinks activations multiplicatively with depth, and heads training on
/// near-zero features cannot converge within a small step budget.
fn fan_in_std(in_ch: usize, kernel: usize) -> f64 {
    (2.0 / (in_ch * kernel * kernel) as f64).sqrt()
}

impl Conv {
    fn new(
        rng: &mut ChaCha12Rng,
        name: &'static str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        std: f64,
    ) -> Self {
        Conv {
            name,
            weight: trunc_normal(rng, &[out_ch, in_ch, kernel, kernel], std),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding: kernel / 2,
        }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        input: ValueId,
        params: &mut Vec<(String, ValueId)>,
    ) -> Result<ValueId> {
        let w = tape.leaf(self.weight.clone())?;
        let b = tape.leaf(self.bias.clone())?;
        params.push((format!("{}.weight", self.name), w));
        params.push((format!("{}.bias", self.name), b));
        tape.conv2d(input, w, Some(b), self.stride, self.padding)
    }
}

/// Weights drawn from N(0, std²) with draws beyond two deviations
/// rejected and redrawn.
fn trunc_normal(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Debug, Clone)]
enum Head {
    Ordinal {
        hx: Conv,
        hy: Conv,
        hz: Conv,
    },
    Offset {
        off_x: Conv,
        off_y: Conv,
        off_z: Conv,
        attn: Conv,
        /// Pixel-center x coordinate of each flattened feature cell.
        pos_x: Tensor,
        pos_y: Tensor,
    },
}

/// Tape ids of the per-threshold probability maps, shaped
/// `[N,H',K_x,A]`, `[N,K_y,W',A]`, and `[N,H',W',K_z,A]`.
pub struct ProbIds {
    pub x: ValueId,
    pub y: ValueId,
    pub z: ValueId,
}

/// Everything a training step needs back from one forward pass.
pub struct ForwardPass {
    /// Parameter leaf ids in the same order as [`Model::named_params`].
    pub params: Vec<(String, ValueId)>,
    /// Present for the ordinal head only.
    pub probs: Option<ProbIds>,
    /// Decoded coordinates, each `[N, joints]`.
    pub coord_x: ValueId,
    pub coord_y: ValueId,
    pub coord_z: ValueId,
}

#[derive(Debug, Clone)]
pub struct Model {
    geom: ImageGeometry,
    grids: GridSet,
    config: ModelConfig,
    stages: Vec<Conv>,
    to_xy: Conv,
    to_z: Conv,
    head: Head,
}

const STAGE_NAMES: [&str; 8] = [
    "stage0", "stage1", "stage2", "stage3", "stage4", "stage5", "stage6", "stage7",
];

impl Model {
    pub fn new(geom: ImageGeometry, grids: GridSet, config: ModelConfig) -> Result<Model> {
        geom.validate()?;
        if config.joints == 0 {
            return Err(Error::Config("joint count must be positive".into()));
        }
        if config.widths.is_empty() || config.widths.len() != config.kernels.len() {
            return Err(Error::Config(format!(
                "need matching non-empty stage widths and kernels, got {} and {}",
                config.widths.len(),
                config.kernels.len()
            )));
        }
        if config.widths.len() > STAGE_NAMES.len() {
            return Err(Error::Config(format!(
                "at most {} encoder stages supported",
                STAGE_NAMES.len()
            )));
        }
        if let Some(k) = config.kernels.iter().find(|k| **k % 2 == 0 || **k == 0) {
            return Err(Error::Config(format!(
                "encoder kernels must be odd so stride-2 stages halve exactly, got {k}"
            )));
        }
        if 1usize << config.widths.len() != geom.stride {
            return Err(Error::Config(format!(
                "{} stride-2 stages give total stride {}, geometry expects {}",
                config.widths.len(),
                1usize << config.widths.len(),
                geom.stride
            )));
        }
        if config.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        for (grid, extent) in [
            (&grids.x, geom.width as f64),
            (&grids.y, geom.height as f64),
            (&grids.z, geom.depth_range),
        ] {
            if grid.upper_bound() != extent {
                return Err(Error::Config(format!(
                    "{} grid upper bound {} does not match geometry extent {}",
                    grid.axis(),
                    grid.upper_bound(),
                    extent
                )));
            }
        }

        let head_cfg = HeadConfig {
            k_x: grids.x.k(),
            k_y: grids.y.k(),
            k_z: grids.z.k(),
            joints: config.joints,
            two_logit: config.two_logit,
        };

        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut in_ch = 3;
        for (i, (&w, &k)) in config.widths.iter().zip(&config.kernels).enumerate() {
            stages.push(Conv::new(&mut rng, STAGE_NAMES[i], w, in_ch, k, 2, fan_in_std(in_ch, k)));
            in_ch = w;
        }
        let cf = config.feature_channels;
        let to_xy = Conv::new(&mut rng, "feat_xy", cf, in_ch, 1, 1, fan_in_std(in_ch, 1));
        let to_z = Conv::new(&mut rng, "feat_z", cf, in_ch, 1, 1, fan_in_std(in_ch, 1));

        let head = match config.head {
            HeadKind::Ordinal => {
                head_cfg.validate(&geom)?;
                let l = head_cfg.logits_per_classifier();
                let cx = l * (head_cfg.k_x * config.joints / geom.feature_width());
                let cy = l * (head_cfg.k_y * config.joints / geom.feature_height());
                let cz = l * head_cfg.k_z * config.joints;
                Head::Ordinal {
                    hx: Conv::new(&mut rng, "head_x", cx, cf, 1, 1, HEAD_STD),
                    hy: Conv::new(&mut rng, "head_y", cy, cf, 1, 1, HEAD_STD),
                    hz: Conv::new(&mut rng, "head_z", cz, cf, 1, 1, HEAD_STD),
                }
            }
            HeadKind::Offset => {
                let a = config.joints;
                let (fw, fh) = (geom.feature_width(), geom.feature_height());
                let s = geom.stride as f64;
                let p = fw * fh;
                let pos_x: Vec<f64> = (0..p).map(|i| ((i % fw) as f64 + 0.5) * s).collect();
                let pos_y: Vec<f64> = (0..p).map(|i| ((i / fw) as f64 + 0.5) * s).collect();
                Head::Offset {
                    off_x: Conv::new(&mut rng, "offset_x", a, cf, 1, 1, HEAD_STD),
                    off_y: Conv::new(&mut rng, "offset_y", a, cf, 1, 1, HEAD_STD),
                    off_z: Conv::new(&mut rng, "offset_z", a, cf, 1, 1, HEAD_STD),
                    attn: Conv::new(&mut rng, "offset_attn", a, cf, 1, 1, HEAD_STD),
                    pos_x: Tensor::from_vec(&[p], pos_x)?,
                    pos_y: Tensor::from_vec(&[p], pos_y)?,
                }
            }
        };

        Ok(Model { geom, grids, config, stages, to_xy, to_z, head })
    }

    pub fn geometry(&self) -> &ImageGeometry {
        &self.geom
    }

    pub fn grids(&self) -> &GridSet {
        &self.grids
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            k_x: self.grids.x.k(),
            k_y: self.grids.y.k(),
            k_z: self.grids.z.k(),
            joints: self.config.joints,
            two_logit: self.config.two_logit,
        }
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut v: Vec<&Conv> = self.stages.iter().collect();
        v.push(&self.to_xy);
        v.push(&self.to_z);
        match &self.head {
            Head::Ordinal { hx, hy, hz } => {
                v.extend([hx, hy, hz]);
            }
            Head::Offset { off_x, off_y, off_z, attn, .. } => {
                v.extend([off_x, off_y, off_z, attn]);
            }
        }
        v
    }

    /// Parameters in forward-visit order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for c in self.convs() {
            out.push((format!("{}.weight", c.name), &c.weight));
            out.push((format!("{}.bias", c.name), &c.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for c in self.convs_mut() {
            let name = c.name;
            let Conv { weight, bias, .. } = c;
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.bias"), bias));
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut v: Vec<&mut Conv> = self.stages.iter_mut().collect();
        v.push(&mut self.to_xy);
        v.push(&mut self.to_z);
        match &mut self.head {
            Head::Ordinal { hx, hy, hz } => {
                v.extend([hx, hy, hz]);
            }
            Head::Offset { off_x, off_y, off_z, attn, .. } => {
                v.extend([off_x, off_y, off_z, attn]);
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Runs the network over a `[N, 3, H, W]` batch on the given tape.
    pub fn forward(&self, tape: &mut Tape, mut input: Tensor) -> Result<ForwardPass> {
        let shape = input.shape().to_vec();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != self.geom.height
            || shape[3] != self.geom.width
        {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!(
                    "input {:?}, expected [N, 3, {}, {}]",
                    shape, self.geom.height, self.geom.width
                ),
            });
        }
        let n = shape[0];
        if !self.config.uvmap {
            let px = self.geom.pixels();
            let data = input.data_mut();
            for s in 0..n {
                data[s * 3 * px + px..(s + 1) * 3 * px].fill(0.0);
            }
        }
        let mut params = Vec::new();
        let mut cur = tape.leaf(input)?;
        for stage in &self.stages {
            cur = stage.apply(tape, cur, &mut params)?;
            cur = tape.relu(cur)?;
        }
        let f_xy = self.to_xy.apply(tape, cur, &mut params)?;
        let f_z = self.to_z.apply(tape, cur, &mut params)?;

        let (fh, fw) = (self.geom.feature_height(), self.geom.feature_width());
        let hc = self.head_config();
        let a = hc.joints;

        match &self.head {
            Head::Ordinal { hx, hy, hz } => {
                // x: merge (channels, width) into (joint, threshold[, logit])
                let lx = hx.apply(tape, f_xy, &mut params)?;
                let px = tape.permute(lx, &[0, 2, 1, 3])?; // [N,H',Cx,W']
                let prob = self.classifier_probs(tape, px, &[n, fh, a, hc.k_x])?;
                let prob_x = tape.permute(prob, &[0, 1, 3, 2])?; // [N,H',Kx,A]

                // y: same construction mirrored over the height axis
                let ly = hy.apply(tape, f_xy, &mut params)?;
                let py = tape.permute(ly, &[0, 3, 1, 2])?; // [N,W',Cy,H']
                let prob = self.classifier_probs(tape, py, &[n, fw, a, hc.k_y])?;
                let prob_y = tape.permute(prob, &[0, 3, 1, 2])?; // [N,Ky,W',A]

                // z: every spatial cell predicts the full threshold set
                let lz = hz.apply(tape, f_z, &mut params)?;
                let pz = tape.permute(lz, &[0, 2, 3, 1])?; // [N,H',W',Cz]
                let prob = self.classifier_probs(tape, pz, &[n, fh, fw, a, hc.k_z])?;
                let prob_z = tape.permute(prob, &[0, 1, 2, 4, 3])?; // [N,H',W',Kz,A]

                // soft decode: expected coordinate = sum of interval widths
                // weighted by P(coord >= threshold), averaged over replicates
                let sx = tape.scale_axis(prob_x, self.grids.x.intervals(), 2)?;
                let sum_x = tape.reduce_sum(sx, &[2])?; // [N,H',A]
                let coord_x = tape.reduce_mean(sum_x, &[1])?;

                let sy = tape.scale_axis(prob_y, self.grids.y.intervals(), 1)?;
                let sum_y = tape.reduce_sum(sy, &[1])?; // [N,W',A]
                let coord_y = tape.reduce_mean(sum_y, &[1])?;

                let sz = tape.scale_axis(prob_z, self.grids.z.intervals(), 3)?;
                let sum_z = tape.reduce_sum(sz, &[3])?; // [N,H',W',A]
                let coord_z = tape.reduce_mean(sum_z, &[1, 2])?;

                Ok(ForwardPass {
                    params,
                    probs: Some(ProbIds { x: prob_x, y: prob_y, z: prob_z }),
                    coord_x,
                    coord_y,
                    coord_z,
                })
            }
            Head::Offset { off_x, off_y, off_z, attn, pos_x, pos_y } => {
                let p = fh * fw;
                let flat = |tape: &mut Tape, id: ValueId| -> Result<ValueId> {
                    tape.reshape(id, &[n, a, p])
                };
                let ox = off_x.apply(tape, f_xy, &mut params)?;
                let ox = flat(tape, ox)?;
                let oy = off_y.apply(tape, f_xy, &mut params)?;
                let oy = flat(tape, oy)?;
                let oz = off_z.apply(tape, f_z, &mut params)?;
                let oz = flat(tape, oz)?;
                let lg = attn.apply(tape, f_xy, &mut params)?;
                let lg = flat(tape, lg)?;
                let w = tape.softmax(lg, 2)?;

                // estimate = attention-weighted mean of (cell center + offset)
                let ax = tape.add_const_suffix(ox, pos_x)?;
                let wx = tape.mul(w, ax)?;
                let coord_x = tape.reduce_sum(wx, &[2])?;

                let ay = tape.add_const_suffix(oy, pos_y)?;
                let wy = tape.mul(w, ay)?;
                let coord_y = tape.reduce_sum(wy, &[2])?;

                // depth has no spatial anchor; the offset is the estimate
                let wz = tape.mul(w, oz)?;
                let coord_z = tape.reduce_sum(wz, &[2])?;

                Ok(ForwardPass { params, probs: None, coord_x, coord_y, coord_z })
            }
        }
    }

    /// Turns raw merged logits into per-classifier probabilities.
    /// `grouped` is the target shape without the logit axis; the input's
    /// trailing two axes must flatten to its trailing two times L.
    fn classifier_probs(
        &self,
        tape: &mut Tape,
        merged: ValueId,
        grouped: &[usize],
    ) -> Result<ValueId> {
        if self.config.two_logit {
            let mut with_l = grouped.to_vec();
            with_l.push(2);
            let r = tape.reshape(merged, &with_l)?;
            let s = tape.softmax(r, with_l.len() - 1)?;
            // channel 0 is P(coordinate >= threshold)
            let picked = tape.scale_axis(s, &[1.0, 0.0], with_l.len() - 1)?;
            tape.reduce_sum(picked, &[with_l.len() - 1])
        } else {
            let r = tape.reshape(merged, grouped)?;
            tape.sigmoid(r)
        }
    }
}

/// Decoded coordinates of one forward pass as plain joint sets.
pub fn extract_joint_sets(tape: &Tape, pass: &ForwardPass) -> Vec<JointSet> {
    let cx = tape.value(pass.coord_x);
    let cy = tape.value(pass.coord_y);
    let cz = tape.value(pass.coord_z);
    let (n, a) = (cx.shape()[0], cx.shape()[1]);
    (0..n)
        .map(|s| {
            JointSet::new(
                (0..a)
                    .map(|j| Joint3::new(cx.at(&[s, j]), cy.at(&[s, j]), cz.at(&[s, j])))
                    .collect(),
            )
        })
        .collect()
}

/// One sample's probability maps copied off the tape, or None for the
/// offset head.
pub fn extract_probability_maps(
    tape: &Tape,
    pass: &ForwardPass,
    sample: usize,
) -> Option<ProbabilityMaps> {
    let probs = pass.probs.as_ref()?;
    let take = |id: ValueId| -> Tensor {
        let t = tape.value(id);
        let per = t.numel() / t.shape()[0];
        let slice = t.data()[sample * per..(sample + 1) * per].to_vec();
        Tensor::from_vec(&t.shape()[1..], slice).unwrap()
    };
    Some(ProbabilityMaps {
        prob_x: take(probs.x),
        prob_y: take(probs.y),
        prob_z: take(probs.z),
    })
}
