//! Optimizer and training loop.
//!
//! A run is fully described by a [`TrainConfig`] (loadable from TOML) plus a
//! frame source; given the same config and source it reproduces the same
//! loss curve bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_gt, GridSet};
use crate::data::{collect_frames, DepthFrame, FrameSource};
use crate::error::{Error, Result};
use crate::geometry::{augment_input, make_uvmap, ImageGeometry};
use crate::grid::{normal_grid, uniform_grid, Axis};
use crate::losses::{
    build_training_loss, read_breakdown, BatchTargets, LossBreakdown, LossConfig,
};
use crate::net::checkpoint;
use crate::net::{HeadKind, Model, ModelConfig, Tape};
use crate::tensor::Tensor;

/// Depth threshold layout. The center-dense grid concentrates classifiers
/// where hand depths cluster; the uniform one spaces them evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZGridKind {
    NormalZ,
    UniformZ,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // image and label space
    pub width: usize,
    pub height: usize,
    pub depth: f64,
    pub joints: usize,

    // architecture
    pub widths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub feature_channels: usize,
    pub two_logit: bool,
    pub head: HeadKind,
    pub uvmap: bool,

    // discretization; in-plane counts default to half the image side
    pub z_grid: ZGridKind,
    pub z_levels: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_x: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_y: Option<usize>,
    /// Classifier count for a uniform z grid; defaults to the count the
    /// center-dense grid would have at `z_levels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_z: Option<usize>,

    // optimizer
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// lr multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,

    // loop
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,

    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            width: 224,
            height: 224,
            depth: 224.0,
            joints: m.joints,
            widths: m.widths,
            kernels: m.kernels,
            feature_channels: m.feature_channels,
            two_logit: m.two_logit,
            head: m.head,
            uvmap: m.uvmap,
            z_grid: ZGridKind::NormalZ,
            z_levels: 4,
            k_x: None,
            k_y: None,
            k_z: None,
            learning_rate: 3.5e-4,
            weight_decay: 1e-4,
            lr_decay: 0.2,
            decay_every: 7,
            batch_size: 8,
            epochs: 21,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.loss.validate()?;
        self.geometry()?;
        self.grids()?;
        Ok(())
    }

    /// Image geometry with the stride the encoder will produce.
    pub fn geometry(&self) -> Result<ImageGeometry> {
        if self.widths.is_empty() {
            return Err(Error::Config("widths must name at least one stage".into()));
        }
        ImageGeometry::with_stride(self.width, self.height, self.depth, 1 << self.widths.len())
    }

    pub fn grids(&self) -> Result<GridSet> {
        let k_x = self.k_x.unwrap_or(self.width / 2);
        let k_y = self.k_y.unwrap_or(self.height / 2);
        let z = match self.z_grid {
            ZGridKind::NormalZ => normal_grid(Axis::Z, self.depth, self.z_levels)?,
            ZGridKind::UniformZ => {
                let k_z = self.k_z.unwrap_or(2 * ((1usize << self.z_levels) - 1));
                uniform_grid(Axis::Z, self.depth, k_z)?
            }
        };
        GridSet::new(
            uniform_grid(Axis::X, self.width as f64, k_x)?,
            uniform_grid(Axis::Y, self.height as f64, k_y)?,
            z,
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            joints: self.joints,
            widths: self.widths.clone(),
            kernels: self.kernels.clone(),
            feature_channels: self.feature_channels,
            two_logit: self.two_logit,
            head: self.head,
            uvmap: self.uvmap,
            seed: self.seed,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.geometry()?, self.grids()?, self.model_config())
    }

    /// Stepped decay: lr(epoch) = lr0 * lr_decay^floor(epoch / decay_every).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Adam with decoupled weight decay. Decay multiplies the weights directly
/// each step; it never passes through the moment estimates.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    slots: Vec<MomentSlot>,
}

struct MomentSlot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over named parameters. `grads` must list the same names in
    /// the same order. A non-finite gradient aborts before anything mutates.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Tensor)],
        grads: &[(String, Tensor)],
    ) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(name, p)| MomentSlot {
                    name: name.clone(),
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        if params.len() != grads.len() || params.len() != self.slots.len() {
            return Err(Error::Config(format!(
                "optimizer saw {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.slots.len()
            )));
        }
        for (((name, p), (gname, g)), slot) in params.iter().zip(grads).zip(&self.slots) {
            if name != gname || *name != slot.name {
                return Err(Error::Config(format!(
                    "optimizer param '{name}' paired with gradient '{gname}' and state '{}'",
                    slot.name
                )));
            }
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("param '{name}' {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step: self.steps + 1,
                    reason: format!("non-finite gradient for parameter '{name}'"),
                });
            }
        }

        let t = self.steps + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        // two phases: stage every update, then commit only if every new
        // value stays in range. Finite gradients can still overflow the
        // squared moment or the decay product, and a half-written step would
        // break the caller's "last good parameters" guarantee. Parameters
        // are bounded by what an f32 checkpoint blob can represent, since a
        // value outside that range cannot round-trip through persistence.
        let shrink = 1.0 - lr * self.weight_decay;
        let mut staged = Vec::with_capacity(params.len());
        for (slot, ((name, p), (_, g))) in self.slots.iter().zip(params.iter().zip(grads)) {
            let pd = p.data();
            let gd = g.data();
            let mut np = vec![0.0; pd.len()];
            let mut nm = vec![0.0; pd.len()];
            let mut nv = vec![0.0; pd.len()];
            let mut ok = true;
            for i in 0..pd.len() {
                nm[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gd[i];
                nv[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = nm[i] / bc1;
                let v_hat = nv[i] / bc2;
                np[i] = pd[i] * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
                ok &= (np[i] as f32).is_finite() && nm[i].is_finite() && nv[i].is_finite();
            }
            if !ok {
                return Err(Error::Diverged {
                    step: t,
                    reason: format!("update for parameter '{name}' left the usable range"),
                });
            }
            staged.push((np, nm, nv));
        }
        for (slot, ((_, p), (np, nm, nv))) in
            self.slots.iter_mut().zip(params.iter_mut().zip(staged))
        {
            p.data_mut().copy_from_slice(&np);
            slot.m = nm;
            slot.v = nv;
        }
        self.steps = t;
        Ok(())
    }
}

/// One frame, ready to batch.
struct Prepared {
    input: Tensor,
    coords: [Tensor; 3],
    maps: Option<(Tensor, Tensor, Tensor)>,
}

fn prepare_frame(
    frame: &DepthFrame,
    model: &Model,
    uv: &crate::geometry::UvMap,
    with_maps: bool,
) -> Result<Prepared> {
    let geom = model.geometry();
    let a = frame.joints_gt.len();
    let mut coords = [
        Tensor::zeros(&[a]),
        Tensor::zeros(&[a]),
        Tensor::zeros(&[a]),
    ];
    for (j, joint) in frame.joints_gt.joints.iter().enumerate() {
        coords[0].data_mut()[j] = joint.x;
        coords[1].data_mut()[j] = joint.y;
        coords[2].data_mut()[j] = joint.z;
    }
    let maps = if with_maps {
        let m = encode_gt(&frame.joints_gt, model.grids(), geom)?;
        Some((m.prob_x, m.prob_y, m.prob_z))
    } else {
        None
    };
    Ok(Prepared {
        input: augment_input(&frame.depth, uv, geom)?.tensor,
        coords,
        maps,
    })
}

fn batch_targets(prepared: &[Prepared], chunk: &[usize]) -> Result<BatchTargets> {
    let pick = |f: &dyn Fn(&Prepared) -> Tensor| -> Vec<Tensor> {
        chunk.iter().map(|&i| f(&prepared[i])).collect()
    };
    let maps = if prepared[chunk[0]].maps.is_some() {
        let gx = Tensor::stack(&pick(&|p| p.maps.as_ref().unwrap().0.clone()))?;
        let gy = Tensor::stack(&pick(&|p| p.maps.as_ref().unwrap().1.clone()))?;
        let gz = Tensor::stack(&pick(&|p| p.maps.as_ref().unwrap().2.clone()))?;
        Some((gx, gy, gz))
    } else {
        None
    };
    Ok(BatchTargets {
        coord_x: Tensor::stack(&pick(&|p| p.coords[0].clone()))?,
        coord_y: Tensor::stack(&pick(&|p| p.coords[1].clone()))?,
        coord_z: Tensor::stack(&pick(&|p| p.coords[2].clone()))?,
        maps,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    /// (step, losses) per optimizer step, in order.
    pub history: Vec<(u64, LossBreakdown)>,
}

/// Checks that a frame source can feed a model built from `cfg`.
fn check_source(cfg: &TrainConfig, source: &dyn FrameSource) -> Result<()> {
    let g = source.geometry();
    if g.width != cfg.width || g.height != cfg.height || g.depth_range != cfg.depth {
        return Err(Error::Config(format!(
            "source frames are {}x{} depth {}, config wants {}x{} depth {}",
            g.width, g.height, g.depth_range, cfg.width, cfg.height, cfg.depth
        )));
    }
    Ok(())
}

/// Runs the full loop: shuffled minibatches, stepped lr decay, a checkpoint
/// and loss CSV under `out_dir` refreshed every epoch. On divergence the
/// params from before the bad step are what's on disk.
pub fn train(
    cfg: &TrainConfig,
    source: &dyn FrameSource,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_source(cfg, source)?;
    let mut model = cfg.build_model()?;

    let frames = collect_frames(source)?;
    if frames.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.joints_gt.len() != cfg.joints {
            return Err(Error::Config(format!(
                "frame {i} has {} joints, config wants {}",
                f.joints_gt.len(),
                cfg.joints
            )));
        }
    }

    let uv = make_uvmap(model.geometry())?;
    let with_maps = model.config().head == HeadKind::Ordinal && cfg.loss.lambda_ord > 0.0;
    let prepared: Vec<Prepared> = frames
        .iter()
        .map(|f| prepare_frame(f, &model, &uv, with_maps))
        .collect::<Result<_>>()?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history: Vec<(u64, LossBreakdown)> = Vec::new();
    let mut csv = format!("{}\n", LossBreakdown::csv_header());
    let mut step: u64 = 0;

    let persist = |model: &Model, csv: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            checkpoint::save(model, &dir.join("checkpoint"))?;
            fs::write(dir.join("loss.csv"), csv)?;
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let input = {
                let views: Vec<Tensor> = chunk.iter().map(|&i| prepared[i].input.clone()).collect();
                Tensor::stack(&views)?
            };
            let targets = batch_targets(&prepared, chunk)?;

            let mut tape = Tape::new();
            let step_result = (|| -> Result<(LossBreakdown, Vec<(String, Tensor)>)> {
                let pass = model.forward(&mut tape, input)?;
                let ids = build_training_loss(&mut tape, &pass, &targets, &cfg.loss)?;
                let breakdown = read_breakdown(&tape, &ids, &cfg.loss);
                if !breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        reason: format!("total loss is {}", breakdown.total),
                    });
                }
                let mut grads = tape.backward(ids.total)?;
                let named: Vec<(String, Tensor)> = pass
                    .params
                    .iter()
                    .map(|(name, vid)| {
                        let g = grads
                            .take(*vid)
                            .unwrap_or_else(|| Tensor::zeros(tape.value(*vid).shape()));
                        (name.clone(), g)
                    })
                    .collect();
                Ok((breakdown, named))
            })();

            let (breakdown, grad_list) = match step_result {
                Ok(v) => v,
                Err(e) => {
                    // model params are still pre-step: checkpoint them as the
                    // last good state before reporting the failure
                    persist(&model, &csv)?;
                    return Err(as_divergence(e, step));
                }
            };

            let mut params = model.named_params_mut();
            let aligned = align_grads(&params, grad_list)?;
            if let Err(e) = opt.step(lr, &mut params, &aligned) {
                drop(params);
                persist(&model, &csv)?;
                return Err(as_divergence(e, step));
            }
            drop(params);

            csv.push_str(&breakdown.csv_row(step));
            csv.push('\n');
            log::debug!(
                "step {step}: total {:.6} joint {:.6} lr {lr:.2e}",
                breakdown.total,
                breakdown.joint
            );
            history.push((step, breakdown));
        }
        persist(&model, &csv)?;
        if let Some((_, last)) = history.last() {
            log::info!(
                "epoch {epoch}: lr {lr:.2e}, last total {:.6}",
                last.total
            );
        }
    }

    Ok(TrainOutcome { model, history })
}

fn as_divergence(e: Error, step: u64) -> Error {
    match e {
        e @ Error::Diverged { .. } => e,
        Error::NonFinite { op } => Error::Diverged {
            step,
            reason: format!("non-finite values out of '{op}'"),
        },
        other => other,
    }
}

/// Reorders forward-pass gradients to match the model's canonical parameter
/// order; a parameter the loss never touched gets a zero gradient.
fn align_grads(
    params: &[(String, &mut Tensor)],
    mut grads: Vec<(String, Tensor)>,
) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::with_capacity(params.len());
    for (name, p) in params {
        match grads.iter().position(|(n, _)| n == name) {
            Some(idx) => out.push(grads.swap_remove(idx)),
            None => out.push((name.clone(), Tensor::zeros(p.shape()))),
        }
    }
    if let Some((stray, _)) = grads.first() {
        return Err(Error::Config(format!(
            "gradient for unknown parameter '{stray}'"
        )));
    }
    Ok(out)
}
