//! Acceptance gate: one test per shipping criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see the PASS lines). Tolerances
//! are pinned here and nowhere else.

use std::time::Instant;

use ordpose::bench::{self, BenchOptions};
use ordpose::codec::{decode, encode_gt, GridSet, Joint3, JointSet, ProbabilityMaps};
use ordpose::data::{
    collect_frames, read_dataset, write_dataset, FrameSource, SynthConfig, SynthSource,
};
use ordpose::eval::{evaluate_model, evaluate_sets};
use ordpose::geometry::ImageGeometry;
use ordpose::grid::{normal_grid, uniform_grid, Axis};
use ordpose::losses::{build_training_loss, dor_loss, total_loss, BatchTargets, LossConfig};
use ordpose::net::gradcheck::{max_rel_error, numeric_gradient};
use ordpose::net::{HeadKind, Model, ModelConfig, Tape, ValueId};
use ordpose::tensor::Tensor;
use ordpose::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

type Check = Result<String, String>;

fn report(n: usize, label: &str, r: Check) {
    match r {
        Ok(detail) => println!("ACCEPTANCE {n} ({label}): PASS; {detail}"),
        Err(why) => {
            println!("ACCEPTANCE {n} ({label}): FAIL; {why}");
            panic!("acceptance criterion {n} ({label}) failed: {why}");
        }
    }
}

fn es(e: ordpose::Error) -> String {
    e.to_string()
}

fn random_set(rng: &mut ChaCha12Rng, joints: usize, w: f64, h: f64, d: f64) -> JointSet {
    JointSet::new(
        (0..joints)
            .map(|_| {
                Joint3::new(
                    rng.gen_range(0.0..w),
                    rng.gen_range(0.0..h),
                    rng.gen_range(0.0..d),
                )
            })
            .collect(),
    )
}

// ---------------------------------------------------------------- criterion 1

fn codec_roundtrip() -> Check {
    let t0 = Instant::now();
    let geom = ImageGeometry::new(224, 224, 224.0).map_err(es)?;
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for m in [2u32, 3, 4] {
        let grids = GridSet::new(
            uniform_grid(Axis::X, 224.0, 112).map_err(es)?,
            uniform_grid(Axis::Y, 224.0, 112).map_err(es)?,
            normal_grid(Axis::Z, 224.0, m).map_err(es)?,
        )
        .map_err(es)?;
        let mut rng = ChaCha12Rng::seed_from_u64(100 + m as u64);
        // 715 sets x 14 joints = 10_010 samples per axis at this depth grid
        for _ in 0..715 {
            let set = random_set(&mut rng, 14, 224.0, 224.0, 224.0);
            let maps = encode_gt(&set, &grids, &geom).map_err(es)?;
            let dec = decode(&maps, &grids, &geom).map_err(es)?;
            for (d, t) in dec.joints.iter().zip(&set.joints) {
                for axis in [Axis::X, Axis::Y, Axis::Z] {
                    let truth = t.get(axis);
                    let err = d.get(axis) - truth;
                    let g = grids.get(axis);
                    let local = g.intervals()[g.locate(truth)];
                    // the decode must land above the truth by at most the
                    // local interval; 1e-9 absorbs summation roundoff only
                    if err <= 0.0 || err > local + 1e-9 {
                        violations += 1;
                    }
                    worst_ratio = worst_ratio.max(err / local);
                    checked += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if violations > 0 {
        return Err(format!("{violations} of {checked} samples broke (0, local interval]"));
    }
    if secs >= 5.0 {
        return Err(format!("took {secs:.2}s, budget is 5s"));
    }
    Ok(format!(
        "{checked} samples (10010/axis for depth levels 2..4), 0 violations, worst err/interval {worst_ratio:.4}, {secs:.2}s"
    ))
}

#[test]
fn acceptance_1_codec_roundtrip() {
    report(1, "codec round-trip", codec_roundtrip());
}

// ---------------------------------------------------------------- criterion 2

fn gt_maps_ordered() -> Check {
    let geom = ImageGeometry::new(224, 224, 224.0).map_err(es)?;
    let grids = GridSet::new(
        uniform_grid(Axis::X, 224.0, 112).map_err(es)?,
        uniform_grid(Axis::Y, 224.0, 112).map_err(es)?,
        normal_grid(Axis::Z, 224.0, 3).map_err(es)?,
    )
    .map_err(es)?;
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let mut entries = 0usize;
    // a map slice along its threshold axis must be a step function: binary,
    // starting at 1 and never rising again once it has dropped
    let mut scan = |t: &Tensor, k_axis: usize| -> usize {
        let shape = t.shape();
        let lanes = shape[k_axis];
        let inner: usize = shape[k_axis + 1..].iter().product();
        let outer: usize = shape[..k_axis].iter().product();
        let data = t.data();
        let mut bad = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let mut prev = 1.0;
                for l in 0..lanes {
                    let v = data[(o * lanes + l) * inner + i];
                    if (v != 0.0 && v != 1.0) || v > prev {
                        bad += 1;
                    }
                    prev = v;
                }
            }
        }
        entries += outer * lanes * inner;
        bad
    };
    let mut bad = 0usize;
    for _ in 0..1000 {
        let set = random_set(&mut rng, 14, 224.0, 224.0, 224.0);
        let maps = encode_gt(&set, &grids, &geom).map_err(es)?;
        bad += scan(&maps.prob_x, 1);
        bad += scan(&maps.prob_y, 0);
        bad += scan(&maps.prob_z, 2);
    }
    if bad > 0 {
        return Err(format!("{bad} of {entries} entries non-binary or rising along thresholds"));
    }
    Ok(format!("1000 joint sets, {entries} entries, all binary and non-increasing"))
}

#[test]
fn acceptance_2_ordinal_ground_truth() {
    report(2, "ordinal ground truth", gt_maps_ordered());
}

// ---------------------------------------------------------------- criterion 3

fn fd_worst(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[ValueId]) -> ordpose::Result<ValueId>) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let root = f(&mut tape, &ids).unwrap();
    let grads = tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        let numeric = numeric_gradient(inputs, which, f).unwrap();
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    worst
}

fn rand_t(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.3, 1.0], away from the relu kink by much more than the
/// finite-difference step.
fn rand_signed(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap()
}

fn elementary_ops_worst(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut track = |e: f64| worst = worst.max(e);

    // weighted reductions to a scalar root; the weights are leaves too, so
    // their gradients are checked alongside
    let a = rand_signed(&mut rng, &[2, 3]);
    let b = rand_signed(&mut rng, &[2, 3]);
    let w = rand_signed(&mut rng, &[2, 3]);
    for op in ["add", "sub", "mul"] {
        track(fd_worst(&[a.clone(), b.clone(), w.clone()], &|t, ids| {
            let y = match op {
                "add" => t.add(ids[0], ids[1])?,
                "sub" => t.sub(ids[0], ids[1])?,
                _ => t.mul(ids[0], ids[1])?,
            };
            let yw = t.mul(y, ids[2])?;
            t.reduce_sum(yw, &[0, 1])
        }));
    }
    track(fd_worst(&[a.clone(), w.clone()], &|t, ids| {
        let y = t.affine(ids[0], 1.7, -0.3)?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));

    let ma = rand_signed(&mut rng, &[2, 3]);
    let mb = rand_signed(&mut rng, &[3, 2]);
    let mw = rand_signed(&mut rng, &[2, 2]);
    track(fd_worst(&[ma, mb, mw], &|t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        let yw = t.mul(y, ids[2])?;
        t.reduce_sum(yw, &[0, 1])
    }));

    let cx = rand_signed(&mut rng, &[1, 2, 5, 5]);
    let cw = rand_signed(&mut rng, &[3, 2, 3, 3]);
    let cb = rand_signed(&mut rng, &[3]);
    let cww = rand_signed(&mut rng, &[1, 3, 3, 3]);
    track(fd_worst(&[cx, cw, cb, cww], &|t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        let yw = t.mul(y, ids[3])?;
        t.reduce_sum(yw, &[0, 1, 2, 3])
    }));

    let rx = rand_signed(&mut rng, &[2, 4]);
    let rw = rand_signed(&mut rng, &[2, 4]);
    track(fd_worst(&[rx.clone(), rw.clone()], &|t, ids| {
        let y = t.relu(ids[0])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));
    track(fd_worst(&[rx.clone(), rw.clone()], &|t, ids| {
        let y = t.sigmoid(ids[0])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));
    track(fd_worst(&[rx.clone(), rw.clone()], &|t, ids| {
        let y = t.softmax(ids[0], 1)?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));

    let px = rand_signed(&mut rng, &[2, 6]);
    let pw = rand_signed(&mut rng, &[3, 4]);
    track(fd_worst(&[px, pw], &|t, ids| {
        let y = t.reshape(ids[0], &[3, 4])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));

    let qx = rand_signed(&mut rng, &[2, 3, 4]);
    let qw = rand_signed(&mut rng, &[4, 2, 3]);
    track(fd_worst(&[qx.clone(), qw], &|t, ids| {
        let y = t.permute(ids[0], &[2, 0, 1])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1, 2])
    }));

    let sw = rand_signed(&mut rng, &[2, 4]);
    track(fd_worst(&[qx.clone(), sw], &|t, ids| {
        let y = t.reduce_sum(ids[0], &[1])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1])
    }));
    let mw2 = rand_signed(&mut rng, &[3]);
    track(fd_worst(&[qx.clone(), mw2], &|t, ids| {
        let y = t.reduce_mean(ids[0], &[0, 2])?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0])
    }));

    track(fd_worst(&[qx.clone()], &|t, ids| {
        let y = t.scale_axis(ids[0], &[0.5, -1.0, 2.0], 1)?;
        t.reduce_sum(y, &[0, 1, 2])
    }));

    let tx = rand_signed(&mut rng, &[2, 3]);
    let tw = rand_signed(&mut rng, &[2, 4, 3]);
    track(fd_worst(&[tx.clone(), tw], &|t, ids| {
        let y = t.repeat_axis(ids[0], 1, 4)?;
        let yw = t.mul(y, ids[1])?;
        t.reduce_sum(yw, &[0, 1, 2])
    }));

    let suffix = rand_signed(&mut rng, &[3]);
    track(fd_worst(&[tx.clone()], &|t, ids| {
        let y = t.add_const_suffix(ids[0], &suffix)?;
        let y2 = t.mul(y, y)?;
        t.reduce_sum(y2, &[0, 1])
    }));

    let bp = rand_t(&mut rng, &[2, 3], 0.1, 0.9);
    let bt = Tensor::from_vec(&[2, 3], (0..6).map(|i| ((i * 7 + seed as usize) % 2) as f64).collect()).unwrap();
    track(fd_worst(&[bp], &|t, ids| t.bce_sum(ids[0], &bt, 1e-7)));

    let sp = rand_t(&mut rng, &[2, 3], 0.0, 2.0);
    // keep |pred - target| away from the smooth-L1 kink at beta
    let st = Tensor::from_vec(
        &[2, 3],
        sp.data().iter().map(|&v| v - 0.4).collect(),
    )
    .unwrap();
    track(fd_worst(&[sp], &|t, ids| t.smooth_l1_sum(ids[0], &st, 1.0)));

    worst
}

fn composed_loss_value(model: &Model, input: &Tensor, targets: &BatchTargets, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, input.clone()).unwrap();
    let ids = build_training_loss(&mut tape, &pass, targets, cfg).unwrap();
    tape.value(ids.total).item()
}

fn composed_worst(head: HeadKind, two_logit: bool, seed: u64) -> Result<f64, String> {
    let geom = ImageGeometry::with_stride(8, 8, 8.0, 4).map_err(es)?;
    let grids = GridSet::new(
        uniform_grid(Axis::X, 8.0, 4).map_err(es)?,
        uniform_grid(Axis::Y, 8.0, 4).map_err(es)?,
        normal_grid(Axis::Z, 8.0, 2).map_err(es)?,
    )
    .map_err(es)?;
    let config = ModelConfig {
        joints: 2,
        widths: vec![4, 6],
        kernels: vec![3, 3],
        feature_channels: 6,
        two_logit,
        head,
        uvmap: true,
        seed,
    };
    let model = Model::new(geom, grids, config).map_err(es)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let input = rand_t(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let set = random_set(&mut rng, 2, 8.0, 8.0, 8.0);
    let coord = |f: &dyn Fn(&Joint3) -> f64| {
        Tensor::from_vec(&[1, 2], set.joints.iter().map(|j| f(j)).collect()).unwrap()
    };
    let maps = if head == HeadKind::Ordinal {
        let m = encode_gt(&set, model.grids(), model.geometry()).map_err(es)?;
        Some((
            Tensor::stack(&[m.prob_x]).map_err(es)?,
            Tensor::stack(&[m.prob_y]).map_err(es)?,
            Tensor::stack(&[m.prob_z]).map_err(es)?,
        ))
    } else {
        None
    };
    let targets = BatchTargets {
        coord_x: coord(&|j| j.x),
        coord_y: coord(&|j| j.y),
        coord_z: coord(&|j| j.z),
        maps,
    };
    let cfg = LossConfig::default();

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, input.clone()).map_err(es)?;
    let ids = build_training_loss(&mut tape, &pass, &targets, &cfg).map_err(es)?;
    let grads = tape.backward(ids.total).map_err(es)?;
    let analytic: Vec<Tensor> = pass
        .params
        .iter()
        .map(|(_, id)| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        debug_assert_eq!(*name, pass.params[pi].0);
        let numel = analytic[pi].numel();
        let stride = (numel / 5).max(1);
        for e in (0..numel).step_by(stride) {
            let x = model.named_params()[pi].1.data()[e];
            let h = 1e-5 * x.abs().max(1.0);
            let eval_at = |v: f64| -> f64 {
                let mut m = model.clone();
                m.named_params_mut()[pi].1.data_mut()[e] = v;
                composed_loss_value(&m, &input, &targets, &cfg)
            };
            let numeric = (eval_at(x + h) - eval_at(x - h)) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Check {
    let t0 = Instant::now();
    let mut worst_elem = 0.0f64;
    for seed in 0..5 {
        worst_elem = worst_elem.max(elementary_ops_worst(seed));
    }
    if worst_elem > 1e-4 {
        return Err(format!("elementary op gradient off by {worst_elem:.3e} (budget 1e-4)"));
    }
    let mut worst_comp = 0.0f64;
    for seed in 0..5u64 {
        for (head, two_logit) in [
            (HeadKind::Ordinal, true),
            (HeadKind::Ordinal, false),
            (HeadKind::Offset, true),
        ] {
            worst_comp = worst_comp.max(composed_worst(head, two_logit, seed)?);
        }
    }
    if worst_comp > 1e-3 {
        return Err(format!("composed-path gradient off by {worst_comp:.3e} (budget 1e-3)"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s, budget is 60s"));
    }
    Ok(format!(
        "5 seeds; elementary worst {worst_elem:.2e} <= 1e-4, composed worst {worst_comp:.2e} <= 1e-3, {secs:.1}s"
    ))
}

#[test]
fn acceptance_3_gradient_suite() {
    report(3, "gradient checks", gradient_suite());
}

// ---------------------------------------------------------------- criterion 4

fn loss_values() -> Check {
    let geom = ImageGeometry::new(128, 128, 128.0).map_err(es)?;
    let grids = GridSet::new(
        uniform_grid(Axis::X, 128.0, 64).map_err(es)?,
        uniform_grid(Axis::Y, 128.0, 64).map_err(es)?,
        uniform_grid(Axis::Z, 128.0, 64).map_err(es)?,
    )
    .map_err(es)?;
    let cfg = LossConfig::default();
    if cfg.lambda_joint != 3.0 || cfg.lambda_ord != 2.0 {
        return Err(format!(
            "default weights are ({}, {}), expected (3, 2)",
            cfg.lambda_joint, cfg.lambda_ord
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let mut worst_perfect = 0.0f64;
    let mut worst_half = 0.0f64;
    let half_target = 64.0 * std::f64::consts::LN_2;
    for _ in 0..20 {
        let set = random_set(&mut rng, 5, 128.0, 128.0, 128.0);
        let gt = encode_gt(&set, &grids, &geom).map_err(es)?;
        let perfect = ProbabilityMaps {
            prob_x: gt.prob_x.clone(),
            prob_y: gt.prob_y.clone(),
            prob_z: gt.prob_z.clone(),
        };
        for v in dor_loss(&perfect, &gt, &cfg).map_err(es)? {
            worst_perfect = worst_perfect.max(v);
        }
        let half = ProbabilityMaps {
            prob_x: Tensor::full(gt.prob_x.shape(), 0.5),
            prob_y: Tensor::full(gt.prob_y.shape(), 0.5),
            prob_z: Tensor::full(gt.prob_z.shape(), 0.5),
        };
        for v in dor_loss(&half, &gt, &cfg).map_err(es)? {
            worst_half = worst_half.max((v - half_target).abs());
        }
    }
    if worst_perfect > 1e-5 {
        return Err(format!("perfect-prediction loss reached {worst_perfect:.3e} (budget 1e-5)"));
    }
    if worst_half > 1e-6 {
        return Err(format!("half-probability loss off K*ln2 by {worst_half:.3e} (budget 1e-6)"));
    }
    let bd = total_loss(1.25, [0.5, 0.75, 0.25], &cfg);
    let expect = 3.0 * 1.25 + 2.0 * (0.5 + 0.75 + 0.25);
    if bd.total != expect || bd.total != 6.75 {
        return Err(format!("total {} != 3*joint + 2*sum(ord) = {expect}", bd.total));
    }
    Ok(format!(
        "perfect <= {worst_perfect:.2e}, |half - 64*ln2| <= {worst_half:.2e}, weighting 3/2 exact"
    ))
}

#[test]
fn acceptance_4_loss_values() {
    report(4, "loss values", loss_values());
}

// ---------------------------------------------------------------- criterion 5

fn overfit_small_batch() -> Check {
    let t0 = Instant::now();
    // Full-batch steps keep the gradient deterministic, which AdamW needs to
    // make per-step progress close to the learning rate; the decay horizon
    // sits past the run so the pinned 3.5e-4 rate holds throughout. The wide
    // tail feeds the channel-merged classifier heads enough features to move
    // their logits within the step budget; it costs almost nothing at 7x7.
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 500,
        decay_every: 600,
        widths: vec![8, 16, 32, 48, 96],
        feature_channels: 96,
        ..TrainConfig::default()
    };
    let model = cfg.build_model().map_err(es)?;
    let params = model.param_count();
    if params > 5_000_000 {
        return Err(format!("{params} parameters exceed the 5M budget"));
    }
    let src = SynthSource {
        cfg: SynthConfig {
            geometry: cfg.geometry().map_err(es)?,
            joints: cfg.joints,
            ..SynthConfig::default()
        },
        start_seed: 0,
        count: 32,
        corruptions: vec![],
    };
    let out = train(&cfg, &src, None).map_err(es)?;
    let steps = out.history.len();
    if steps > 500 {
        return Err(format!("{steps} optimizer steps exceed the 500 budget"));
    }
    let report = evaluate_model(&out.model, &src, &[], 4).map_err(es)?;
    let bound_3d = 2.0 * out.model.grids().max_interval();
    let secs = t0.elapsed().as_secs_f64();
    if report.mean_3d_error > bound_3d {
        return Err(format!(
            "mean 3D error {:.3} px exceeds 2x max interval {:.3} px after {steps} steps ({secs:.0}s)",
            report.mean_3d_error, bound_3d
        ));
    }
    let [ex, ey, _] = report.per_axis_error;
    if ex > 4.0 || ey > 4.0 {
        return Err(format!(
            "in-plane error ({ex:.3}, {ey:.3}) px exceeds the 4 px bound after {steps} steps"
        ));
    }
    if secs >= 1200.0 {
        return Err(format!("took {secs:.0}s, budget is 20 minutes"));
    }
    Ok(format!(
        "{params} params, {steps} steps, mean 3D {:.3} <= {bound_3d:.1} px, in-plane ({ex:.3}, {ey:.3}) <= 4 px, {secs:.0}s",
        report.mean_3d_error
    ))
}

#[test]
fn acceptance_5_overfit() {
    report(5, "synthetic overfit", overfit_small_batch());
}

// ---------------------------------------------------------------- criterion 6

fn depth_grid_properties() -> Check {
    let d = 224.0;
    for m in 1..=6u32 {
        let g = normal_grid(Axis::Z, d, m).map_err(es)?;
        let expect_k = 2 * (2usize.pow(m) - 1);
        if g.k() != expect_k {
            return Err(format!("levels {m}: {} thresholds, expected {expect_k}", g.k()));
        }
        let t = g.thresholds();
        if t[0] != 0.0 {
            return Err(format!("levels {m}: first threshold {} != 0", t[0]));
        }
        for i in 1..t.len() {
            if t[i] <= t[i - 1] {
                return Err(format!("levels {m}: thresholds not strictly increasing at {i}"));
            }
        }
        if *t.last().unwrap() >= d {
            return Err(format!("levels {m}: last threshold {} not below {d}", t.last().unwrap()));
        }
        // intervals must fall toward the center of the range, then rise,
        // and mirror around it
        let iv = g.intervals();
        let mut rising = false;
        for i in 1..iv.len() {
            if iv[i] > iv[i - 1] + 1e-9 {
                rising = true;
            } else if iv[i] < iv[i - 1] - 1e-9 && rising {
                return Err(format!("levels {m}: intervals fall again after rising, at {i}"));
            }
        }
        let n = iv.len();
        for i in 0..n {
            if (iv[i] - iv[n - 1 - i]).abs() > 1e-9 {
                return Err(format!("levels {m}: interval {i} breaks the mirror symmetry"));
            }
        }
        // edges (thresholds plus the upper bound) mirror around d/2
        let mut edges = t.to_vec();
        edges.push(g.upper_bound());
        let ne = edges.len();
        for i in 0..ne {
            if (edges[i] + edges[ne - 1 - i] - d).abs() > 1e-9 {
                return Err(format!("levels {m}: edge {i} breaks symmetry about {}", d / 2.0));
            }
        }
    }
    Ok("levels 1..6: counts 2(2^M - 1), strictly increasing, center-dense, symmetric".into())
}

#[test]
fn acceptance_6_depth_grid() {
    report(6, "center-dense depth grid", depth_grid_properties());
}

// ---------------------------------------------------------------- criterion 7

fn ablation_matrix() -> Check {
    let t0 = Instant::now();
    let base = bench::desk_config();
    let opts = BenchOptions {
        seeds: vec![1, 2, 3],
        ..BenchOptions::default()
    };
    let report = bench::run_benchmark(&base, &opts).map_err(es)?;
    println!("{}", report.to_csv());
    println!("{}", report.summary());
    if report.rows.len() != 8 {
        return Err(format!("{} table rows, expected 8", report.rows.len()));
    }
    for row in &report.rows {
        if row.failed() {
            return Err(format!(
                "row {}/{} converged on {}/{} seeds",
                row.table, row.row, row.seeds_ok, row.seeds
            ));
        }
        let m = row.mean.as_ref().unwrap();
        if ![m.x, m.y, m.z, m.mean_3d].iter().all(|v| v.is_finite()) {
            return Err(format!("row {}/{} has non-finite metrics", row.table, row.row));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(format!(
        "8 rows x 3 seeds over head/depth-grid/uv/ordinal-loss axes, all converged; orderings above are reported, not asserted; {secs:.0}s"
    ))
}

#[test]
fn acceptance_7_ablation_matrix() {
    report(7, "ablation matrix", ablation_matrix());
}

// ---------------------------------------------------------------- criterion 8

fn metrics_and_storage() -> Check {
    // fixed-offset case: per-joint distance sqrt(3^2 + 4^2) = 5 exactly
    let gt = vec![JointSet::new(vec![Joint3::new(10.0, 10.0, 10.0)])];
    let pred = vec![JointSet::new(vec![Joint3::new(13.0, 14.0, 10.0)])];
    let r = evaluate_sets(&pred, &gt, &[]).map_err(es)?;
    if r.mean_3d_error != 5.0 {
        return Err(format!("3-4-5 case gave {}", r.mean_3d_error));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for case in 0..30 {
        let frames = rng.gen_range(1..5);
        let joints = rng.gen_range(1..4);
        let gt: Vec<JointSet> = (0..frames)
            .map(|_| random_set(&mut rng, joints, 64.0, 64.0, 64.0))
            .collect();
        let pred: Vec<JointSet> = (0..frames)
            .map(|_| random_set(&mut rng, joints, 64.0, 64.0, 64.0))
            .collect();
        let taus: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..128.0)).collect();
        let r = evaluate_sets(&pred, &gt, &taus).map_err(es)?;
        let curve = &r.success_curve;
        for i in 0..curve.len() {
            let (tau, frac) = curve[i];
            if !(0.0..=1.0).contains(&frac) {
                return Err(format!("case {case}: fraction {frac} at tau {tau} out of range"));
            }
            if i > 0 && (curve[i].0 <= curve[i - 1].0 || frac < curve[i - 1].1) {
                return Err(format!("case {case}: success curve not sorted/non-decreasing at {i}"));
            }
        }
    }

    // disk round-trip: everything that defines a frame survives bit-exactly
    let src = SynthSource {
        cfg: SynthConfig {
            geometry: ImageGeometry::with_stride(64, 64, 64.0, 1).map_err(es)?,
            joints: 4,
            ..SynthConfig::default()
        },
        start_seed: 300,
        count: 100,
        corruptions: vec!["plane_noise=0.15".parse().map_err(es)?],
    };
    let frames = collect_frames(&src).map_err(es)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_dataset(dir.path(), src.geometry(), &frames).map_err(es)?;
    let (geom_back, back) = read_dataset(dir.path()).map_err(es)?;
    if geom_back != *src.geometry() {
        return Err("geometry changed across the disk round-trip".into());
    }
    if back.len() != frames.len() {
        return Err(format!("wrote {} frames, read {}", frames.len(), back.len()));
    }
    for (i, (a, b)) in frames.iter().zip(&back).enumerate() {
        if a.depth != b.depth {
            return Err(format!("frame {i}: depth bits changed"));
        }
        let same_joints = a
            .joints_gt
            .joints
            .iter()
            .zip(&b.joints_gt.joints)
            .all(|(x, y)| x.x == y.x && x.y == y.y && x.z == y.z);
        if a.joints_gt.len() != b.joints_gt.len() || !same_joints {
            return Err(format!("frame {i}: joints changed"));
        }
        if a.meta.seed != b.meta.seed || a.meta.corruptions != b.meta.corruptions {
            return Err(format!("frame {i}: metadata changed"));
        }
    }
    Ok("3-4-5 distance exact, 30 random success curves monotone in [0,1], 100-frame disk round-trip bit-exact".into())
}

#[test]
fn acceptance_8_metrics_and_storage() {
    report(8, "metrics and storage", metrics_and_storage());
}
