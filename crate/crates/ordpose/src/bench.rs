//! Ablation harness. Four comparison axes, each toggling one design choice
//! off a shared reference config:
//!
//!   head      ordinal vs offset
//!   z_grid    center-dense vs uniform depth thresholds
//!   uvmap     coordinate channels on vs off
//!   dor_loss  dense ordinal supervision on vs off
//!
//! Every variant trains on the same frames with the same seed set and is
//! scored on a corrupted held-out split. Divergence marks the row failed
//! instead of aborting the run, and relative orderings are reported rather
//! than asserted: at this scale gaps between variants can be noise.

use crate::data::{CorruptionKind, CorruptionTag, SynthConfig, SynthSource};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::net::HeadKind;
use crate::train::{train, TrainConfig, ZGridKind};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Model-init seeds shared by every variant.
    pub seeds: Vec<u64>,
    pub train_frames: usize,
    pub eval_frames: usize,
    /// Applied to the eval split only.
    pub corruptions: Vec<CorruptionTag>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seeds: vec![1, 2, 3],
            train_frames: 12,
            eval_frames: 12,
            corruptions: vec![
                CorruptionTag { kind: CorruptionKind::HoleDropout, magnitude: 0.2 },
                CorruptionTag { kind: CorruptionKind::PlaneNoise, magnitude: 0.2 },
            ],
        }
    }
}

/// Reference config small enough to sweep on one desktop core.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        width: 64,
        height: 64,
        depth: 64.0,
        joints: 4,
        widths: vec![4, 8, 12, 16, 24],
        kernels: vec![3, 3, 3, 3, 3],
        feature_channels: 24,
        z_levels: 3,
        batch_size: 4,
        epochs: 10,
        ..TrainConfig::default()
    }
}

/// Distinct trainings per seed. Rows reuse these by key, so the reference
/// config trains once per seed however many tables quote it.
pub const VARIANT_KEYS: [&str; 5] =
    ["reference", "offset_head", "uniform_z", "uvmap_off", "dor_off"];

/// (table, row label, variant key) in presentation order.
pub const ROWS: [(&str, &str, &str); 8] = [
    ("head", "ordinal", "reference"),
    ("head", "offset", "offset_head"),
    ("z_grid", "normal_z", "reference"),
    ("z_grid", "uniform_z", "uniform_z"),
    ("uvmap", "on", "reference"),
    ("uvmap", "off", "uvmap_off"),
    ("dor_loss", "on", "reference"),
    ("dor_loss", "off", "dor_off"),
];

fn variant_config(base: &TrainConfig, key: &str) -> TrainConfig {
    let mut cfg = base.clone();
    match key {
        "reference" => {}
        "offset_head" => cfg.head = HeadKind::Offset,
        "uniform_z" => cfg.z_grid = ZGridKind::UniformZ,
        "uvmap_off" => cfg.uvmap = false,
        "dor_off" => cfg.loss.lambda_ord = 0.0,
        other => unreachable!("unknown variant {other}"),
    }
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub mean_3d: f64,
}

#[derive(Debug, Clone)]
pub struct RawResult {
    pub key: &'static str,
    pub seed: u64,
    /// None when that training diverged or scored non-finite.
    pub metrics: Option<Metrics>,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub table: &'static str,
    pub row: &'static str,
    pub key: &'static str,
    /// Per-column means over the seeds that finished.
    pub mean: Option<Metrics>,
    /// Sample std of the 3D mean over finished seeds.
    pub std_3d: f64,
    pub seeds_ok: usize,
    pub seeds: usize,
}

impl BenchRow {
    pub fn failed(&self) -> bool {
        self.seeds_ok < self.seeds
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub raw: Vec<RawResult>,
    pub seeds: Vec<u64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,row,x,y,z,mean_3d,mean_3d_std,seeds_ok,seeds,status\n");
        for r in &self.rows {
            let cells = match &r.mean {
                Some(m) => format!(
                    "{:.4},{:.4},{:.4},{:.4},{:.4}",
                    m.x, m.y, m.z, m.mean_3d, r.std_3d
                ),
                None => ",,,,".into(),
            };
            let status = if r.failed() { "failed" } else { "ok" };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.table, r.row, cells, r.seeds_ok, r.seeds, status
            ));
        }
        out
    }

    /// Human-readable direction notes, one line per table. Orderings are
    /// described, never enforced.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for pair in self.rows.chunks(2) {
            let [a, b] = pair else { continue };
            out.push_str(&format!("{}: ", a.table));
            match (&a.mean, &b.mean) {
                (Some(ma), Some(mb)) => {
                    let wins = self
                        .seeds
                        .iter()
                        .filter(|&&s| {
                            let get = |key| {
                                self.raw
                                    .iter()
                                    .find(|r| r.key == key && r.seed == s)
                                    .and_then(|r| r.metrics)
                            };
                            match (get(a.key), get(b.key)) {
                                (Some(x), Some(y)) => x.mean_3d <= y.mean_3d,
                                _ => false,
                            }
                        })
                        .count();
                    out.push_str(&format!(
                        "{} {:.4} vs {} {:.4} mean 3D; '{}' lower or equal in {}/{} seeds\n",
                        a.row,
                        ma.mean_3d,
                        b.row,
                        mb.mean_3d,
                        a.row,
                        wins,
                        self.seeds.len()
                    ));
                }
                _ => out.push_str(&format!(
                    "{} {}/{} seeds ok, {} {}/{} seeds ok; no comparison\n",
                    a.row, a.seeds_ok, a.seeds, b.row, b.seeds_ok, b.seeds
                )),
            }
        }
        out
    }
}

fn synth_for(base: &TrainConfig) -> Result<SynthConfig> {
    Ok(SynthConfig {
        geometry: base.geometry()?,
        joints: base.joints,
        ..SynthConfig::default()
    })
}

pub fn run_benchmark(base: &TrainConfig, opts: &BenchOptions) -> Result<BenchReport> {
    base.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one seed".into()));
    }
    if opts.train_frames == 0 || opts.eval_frames == 0 {
        return Err(Error::Config("benchmark needs train and eval frames".into()));
    }

    let synth = synth_for(base)?;
    let train_src = SynthSource {
        cfg: synth.clone(),
        start_seed: 1_000,
        count: opts.train_frames,
        corruptions: vec![],
    };
    let eval_src = SynthSource {
        cfg: synth,
        start_seed: 9_000,
        count: opts.eval_frames,
        corruptions: opts.corruptions.clone(),
    };

    let mut raw = Vec::new();
    for key in VARIANT_KEYS {
        for &seed in &opts.seeds {
            let mut cfg = variant_config(base, key);
            cfg.seed = seed;
            let result = train(&cfg, &train_src, None).and_then(|out| {
                evaluate_model(&out.model, &eval_src, &[], cfg.batch_size)
            });
            let (metrics, note) = match result {
                Ok(report) => {
                    let m = Metrics {
                        x: report.per_axis_error[0],
                        y: report.per_axis_error[1],
                        z: report.per_axis_error[2],
                        mean_3d: report.mean_3d_error,
                    };
                    if m.x.is_finite() && m.y.is_finite() && m.z.is_finite() && m.mean_3d.is_finite()
                    {
                        (Some(m), String::new())
                    } else {
                        (None, "non-finite evaluation".to_string())
                    }
                }
                Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                    (None, e.to_string())
                }
                Err(other) => return Err(other),
            };
            log::info!(
                "bench {key} seed {seed}: {}",
                metrics.map_or_else(|| note.clone(), |m| format!("mean 3D {:.4}", m.mean_3d))
            );
            raw.push(RawResult { key, seed, metrics, note });
        }
    }

    let rows = ROWS
        .iter()
        .map(|&(table, row, key)| {
            let done: Vec<Metrics> = raw
                .iter()
                .filter(|r| r.key == key)
                .filter_map(|r| r.metrics)
                .collect();
            let seeds_ok = done.len();
            let mean = if done.is_empty() {
                None
            } else {
                let n = done.len() as f64;
                Some(Metrics {
                    x: done.iter().map(|m| m.x).sum::<f64>() / n,
                    y: done.iter().map(|m| m.y).sum::<f64>() / n,
                    z: done.iter().map(|m| m.z).sum::<f64>() / n,
                    mean_3d: done.iter().map(|m| m.mean_3d).sum::<f64>() / n,
                })
            };
            let std_3d = match (&mean, done.len()) {
                (Some(m), n) if n > 1 => {
                    let var = done
                        .iter()
                        .map(|d| (d.mean_3d - m.mean_3d).powi(2))
                        .sum::<f64>()
                        / (n as f64 - 1.0);
                    var.sqrt()
                }
                _ => 0.0,
            };
            BenchRow {
                table,
                row,
                key,
                mean,
                std_3d,
                seeds_ok,
                seeds: opts.seeds.len(),
            }
        })
        .collect();

    Ok(BenchReport { rows, raw, seeds: opts.seeds.clone() })
}
