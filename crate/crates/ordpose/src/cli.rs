//! Command-line surface. Machine output (CSV, datasets, checkpoints) goes to
//! stdout or files; progress chatter stays on stderr behind `--verbose`.
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage (from clap).

use std::fs;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bench::{desk_config, run_benchmark, BenchOptions};
use crate::codec::{decode, encode_gt, GridSet, Joint3, JointSet};
use crate::data::{
    read_dataset, write_dataset, CorruptionTag, FrameSource, MemorySource, SynthConfig,
    SynthSource,
};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::geometry::ImageGeometry;
use crate::grid::{normal_grid, uniform_grid, Axis, DiscretizationGrid};
use crate::net::{checkpoint, HeadKind};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ordpose",
    version,
    about = "Hand pose from depth images via per-threshold binary classifiers"
)]
pub struct Cli {
    /// Print progress summaries to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic depth dataset to disk.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint/ and loss.csv under --out.
    Train(TrainArgs),
    /// Score a checkpoint; prints a metric CSV.
    Eval(EvalArgs),
    /// Train every ablation variant across seeds and print the table CSV.
    Benchmark(BenchArgs),
    /// Push random joints through encode/decode and report the error.
    DecodeDemo(DecodeDemoArgs),
    /// Print a discretization grid as CSV.
    GridInfo(GridInfoArgs),
}

fn parse_corruption(s: &str) -> std::result::Result<CorruptionTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    match s {
        "ordinal" => Ok(HeadKind::Ordinal),
        "offset" => Ok(HeadKind::Offset),
        other => Err(format!("unknown head '{other}' (ordinal or offset)")),
    }
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    match s {
        "x" => Ok(Axis::X),
        "y" => Ok(Axis::Y),
        "z" => Ok(Axis::Z),
        other => Err(format!("unknown axis '{other}' (x, y, or z)")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Frames to generate.
    #[arg(long)]
    pub count: usize,
    /// Seed of the first frame; frame i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 14)]
    pub joints: usize,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    #[arg(long, default_value_t = 224.0)]
    pub depth: f64,
    /// kind=magnitude with kind in {edge_blur, hole_dropout, plane_noise};
    /// repeatable, applied in order.
    #[arg(long = "corrupt", value_parser = parse_corruption)]
    pub corrupt: Vec<CorruptionTag>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file of TrainConfig fields; omitted fields use defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint/ and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on a dataset directory instead of generated frames.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated training frames when --data is not given.
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    /// Corruptions for generated training frames; repeatable.
    #[arg(long = "corrupt", value_parser = parse_corruption)]
    pub corrupt: Vec<CorruptionTag>,
    // common config overrides
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; omitted means generated frames.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated eval frames when --data is not given.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Seed of the first generated frame.
    #[arg(long, default_value_t = 9000)]
    pub seed: u64,
    /// Corruptions for generated eval frames; repeatable.
    #[arg(long = "corrupt", value_parser = parse_corruption)]
    pub corrupt: Vec<CorruptionTag>,
    /// Success-curve thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML base config; defaults to a small desk-scale setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 12)]
    pub train_frames: usize,
    #[arg(long, default_value_t = 12)]
    pub eval_frames: usize,
    /// Eval-split corruptions; repeatable. Defaults to mild dropout+noise.
    #[arg(long = "corrupt", value_parser = parse_corruption)]
    pub corrupt: Vec<CorruptionTag>,
    /// Write the table CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeDemoArgs {
    /// Random joint sets to push through the codec.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 14)]
    pub joints: usize,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    #[arg(long, default_value_t = 224.0)]
    pub depth: f64,
    /// In-plane classifier counts; default half the image side.
    #[arg(long)]
    pub k_x: Option<usize>,
    #[arg(long)]
    pub k_y: Option<usize>,
    /// Levels of the center-dense depth grid.
    #[arg(long, default_value_t = 3)]
    pub z_levels: u32,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["levels", "k"])))]
pub struct GridInfoArgs {
    /// x, y, or z.
    #[arg(long, value_parser = parse_axis)]
    pub axis: Axis,
    /// Upper bound of the axis.
    #[arg(long)]
    pub extent: f64,
    /// Build the center-dense grid with this many levels.
    #[arg(long)]
    pub levels: Option<u32>,
    /// Build the uniform grid with this many thresholds.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn dispatch(cli: Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.cmd {
        Command::Synth(args) => run_synth(&args, verbose),
        Command::Train(args) => run_train(&args, verbose),
        Command::Eval(args) => {
            let csv = eval_csv(&args, verbose)?;
            emit(args.out.as_deref(), &csv)
        }
        Command::Benchmark(args) => {
            let (csv, summary) = benchmark_csv(&args)?;
            if verbose {
                eprint!("{summary}");
            }
            emit(args.out.as_deref(), &csv)
        }
        Command::DecodeDemo(args) => {
            let csv = decode_demo_csv(&args)?;
            print!("{csv}");
            Ok(())
        }
        Command::GridInfo(args) => {
            let csv = grid_info_csv(&args)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn emit(path: Option<&std::path::Path>, payload: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, payload)?;
            Ok(())
        }
        None => {
            print!("{payload}");
            Ok(())
        }
    }
}

fn data_geometry(width: usize, height: usize, depth: f64) -> Result<ImageGeometry> {
    // stride 1: datasets carry no downsampling commitment
    ImageGeometry::with_stride(width, height, depth, 1)
}

fn run_synth(args: &SynthArgs, verbose: bool) -> Result<()> {
    let cfg = SynthConfig {
        geometry: data_geometry(args.width, args.height, args.depth)?,
        joints: args.joints,
        ..SynthConfig::default()
    };
    let source = SynthSource {
        cfg: cfg.clone(),
        start_seed: args.seed,
        count: args.count,
        corruptions: args.corrupt.clone(),
    };
    let frames = crate::data::collect_frames(&source)?;
    write_dataset(&args.out, &cfg.geometry, &frames)?;
    if verbose {
        eprintln!(
            "wrote {} frames ({}x{}, {} joints) to {}",
            frames.len(),
            args.width,
            args.height,
            args.joints,
            args.out.display()
        );
    }
    Ok(())
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(head) = args.head {
        cfg.head = head;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_source(cfg: &TrainConfig, args: &TrainArgs) -> Result<Box<dyn FrameSource>> {
    match &args.data {
        Some(dir) => {
            let (geometry, frames) = read_dataset(dir)?;
            Ok(Box::new(MemorySource { geometry, frames }))
        }
        None => Ok(Box::new(SynthSource {
            cfg: SynthConfig {
                geometry: data_geometry(cfg.width, cfg.height, cfg.depth)?,
                joints: cfg.joints,
                ..SynthConfig::default()
            },
            start_seed: cfg.seed,
            count: args.frames,
            corruptions: args.corrupt.clone(),
        })),
    }
}

fn run_train(args: &TrainArgs, verbose: bool) -> Result<()> {
    let cfg = load_train_config(args)?;
    let source = train_source(&cfg, args)?;
    let outcome = train(&cfg, source.as_ref(), Some(&args.out))?;
    if verbose {
        let last = outcome.history.last().map(|(_, b)| b.total);
        eprintln!(
            "trained {} steps, final total loss {}, checkpoint at {}",
            outcome.history.len(),
            last.map_or("n/a".into(), |v| format!("{v:.6}")),
            args.out.join("checkpoint").display()
        );
    }
    Ok(())
}

fn eval_csv(args: &EvalArgs, verbose: bool) -> Result<String> {
    let model = checkpoint::load(&args.checkpoint)?;
    let report = match &args.data {
        Some(dir) => {
            let (geometry, frames) = read_dataset(dir)?;
            let src = MemorySource { geometry, frames };
            evaluate_model(&model, &src, &args.thresholds, args.batch_size)?
        }
        None => {
            let geom = model.geometry();
            let src = SynthSource {
                cfg: SynthConfig {
                    geometry: data_geometry(geom.width, geom.height, geom.depth_range)?,
                    joints: model.config().joints,
                    ..SynthConfig::default()
                },
                start_seed: args.seed,
                count: args.frames,
                corruptions: args.corrupt.clone(),
            };
            evaluate_model(&model, &src, &args.thresholds, args.batch_size)?
        }
    };
    if verbose {
        eprintln!(
            "{} frames: mean 3D error {:.4}",
            report.frames, report.mean_3d_error
        );
    }
    Ok(report.to_csv())
}

fn benchmark_csv(args: &BenchArgs) -> Result<(String, String)> {
    let base = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => desk_config(),
    };
    let mut opts = BenchOptions {
        seeds: args.seeds.clone(),
        train_frames: args.train_frames,
        eval_frames: args.eval_frames,
        ..BenchOptions::default()
    };
    if !args.corrupt.is_empty() {
        opts.corruptions = args.corrupt.clone();
    }
    let report = run_benchmark(&base, &opts)?;
    Ok((report.to_csv(), report.summary()))
}

fn decode_demo_csv(args: &DecodeDemoArgs) -> Result<String> {
    let geom = ImageGeometry::new(args.width, args.height, args.depth)?;
    let grids = GridSet::new(
        uniform_grid(Axis::X, args.width as f64, args.k_x.unwrap_or(args.width / 2))?,
        uniform_grid(Axis::Y, args.height as f64, args.k_y.unwrap_or(args.height / 2))?,
        normal_grid(Axis::Z, args.depth, args.z_levels)?,
    )?;
    if args.count == 0 || args.joints == 0 {
        return Err(Error::Config("count and joints must be positive".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let mut mean = [0.0f64; 3];
    let mut max = [0.0f64; 3];
    let mut violations = [0usize; 3];
    let samples = args.count * args.joints;
    for _ in 0..args.count {
        let joints = JointSet::new(
            (0..args.joints)
                .map(|_| {
                    Joint3::new(
                        rng.gen_range(0.0..args.width as f64),
                        rng.gen_range(0.0..args.height as f64),
                        rng.gen_range(0.0..args.depth),
                    )
                })
                .collect(),
        );
        let decoded = decode(&encode_gt(&joints, &grids, &geom)?, &grids, &geom)?;
        for (truth, dec) in joints.joints.iter().zip(&decoded.joints) {
            for (i, axis) in [Axis::X, Axis::Y, Axis::Z].into_iter().enumerate() {
                let err = dec.get(axis) - truth.get(axis);
                let grid = grids.get(axis);
                let local = grid.intervals()[grid.locate(truth.get(axis))];
                if err <= 0.0 || err > local + 1e-9 {
                    violations[i] += 1;
                }
                mean[i] += err / samples as f64;
                max[i] = max[i].max(err);
            }
        }
    }

    let mut out = String::from("axis,samples,mean_error,max_error,max_interval,violations\n");
    for (i, axis) in ["x", "y", "z"].into_iter().enumerate() {
        let grid = grids.get([Axis::X, Axis::Y, Axis::Z][i]);
        out.push_str(&format!(
            "{axis},{samples},{},{},{},{}\n",
            mean[i],
            max[i],
            grid.max_interval(),
            violations[i]
        ));
    }
    Ok(out)
}

fn grid_info_csv(args: &GridInfoArgs) -> Result<String> {
    let grid: DiscretizationGrid = match (args.levels, args.k) {
        (Some(levels), None) => normal_grid(args.axis, args.extent, levels)?,
        (None, Some(k)) => uniform_grid(args.axis, args.extent, k)?,
        _ => unreachable!("clap enforces exactly one of --levels/--k"),
    };
    let mut out = String::from("index,threshold,interval\n");
    for (i, (t, dt)) in grid.thresholds().iter().zip(grid.intervals()).enumerate() {
        out.push_str(&format!("{i},{t},{dt}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(argv: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(argv)
    }

    #[test]
    fn usage_errors_are_rejected_at_parse_time() {
        assert!(parse(&["ordpose"]).is_err());
        assert!(parse(&["ordpose", "no-such-command"]).is_err());
        assert!(parse(&["ordpose", "synth", "--count", "2"]).is_err()); // no --out
        assert!(parse(&["ordpose", "synth", "--count", "2", "--out", "d", "--bogus"]).is_err());
        // grid-info demands exactly one of --levels/--k
        assert!(parse(&["ordpose", "grid-info", "--axis", "z", "--extent", "8"]).is_err());
        assert!(parse(&[
            "ordpose", "grid-info", "--axis", "z", "--extent", "8", "--levels", "2", "--k", "4"
        ])
        .is_err());
        assert!(parse(&["ordpose", "grid-info", "--axis", "w", "--extent", "8", "--k", "4"])
            .is_err());
        assert!(
            parse(&["ordpose", "synth", "--count", "1", "--out", "d", "--corrupt", "fog=0.5"])
                .is_err()
        );
    }

    #[test]
    fn grid_info_center_dense_has_expected_row_count() {
        let cli = parse(&[
            "ordpose", "grid-info", "--axis", "z", "--extent", "8", "--levels", "2",
        ])
        .unwrap();
        let Command::GridInfo(args) = cli.cmd else { panic!() };
        let csv = grid_info_csv(&args).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        // 2 levels -> 2 * (2^2 - 1) = 6 thresholds
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "index,threshold,interval");
        let grid = normal_grid(Axis::Z, 8.0, 2).unwrap();
        for (row, t) in lines[1..].iter().zip(grid.thresholds()) {
            assert!(row.contains(&format!(",{t},")));
        }
    }

    #[test]
    fn grid_info_uniform_matches_grid_module() {
        let cli = parse(&[
            "ordpose", "grid-info", "--axis", "x", "--extent", "16", "--k", "4",
        ])
        .unwrap();
        let Command::GridInfo(args) = cli.cmd else { panic!() };
        let csv = grid_info_csv(&args).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("0,0,4"));
        assert!(csv.contains("3,12,4"));
    }

    #[test]
    fn decode_demo_reports_zero_violations() {
        let cli = parse(&[
            "ordpose",
            "decode-demo",
            "--count",
            "40",
            "--joints",
            "5",
            "--width",
            "64",
            "--height",
            "64",
            "--depth",
            "64",
            "--z-levels",
            "2",
        ])
        .unwrap();
        let Command::DecodeDemo(args) = cli.cmd else { panic!() };
        let csv = decode_demo_csv(&args).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        for line in &lines[1..] {
            assert!(line.ends_with(",0"), "violations in {line}");
        }
    }

    #[test]
    fn synth_subcommand_writes_a_readable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let cli = parse(&[
            "ordpose",
            "synth",
            "--count",
            "3",
            "--seed",
            "5",
            "--joints",
            "4",
            "--width",
            "48",
            "--height",
            "48",
            "--depth",
            "48",
            "--corrupt",
            "plane_noise=0.1",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(dispatch(cli), 0);
        let (geom, frames) = read_dataset(&out).unwrap();
        assert_eq!(geom.width, 48);
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].joints_gt.len(), 4);
        assert_eq!(frames[0].meta.seed, 5);
        assert_eq!(frames[0].meta.corruptions.len(), 1);
    }

    #[test]
    fn train_then_eval_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.toml");
        fs::write(
            &cfg_path,
            r#"
width = 32
height = 32
depth = 32.0
joints = 3
widths = [4, 8, 8]
kernels = [3, 3, 3]
feature_channels = 8
z_levels = 2
batch_size = 3
epochs = 2
"#,
        )
        .unwrap();
        let out = dir.path().join("run");
        let cli = parse(&[
            "ordpose",
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--frames",
            "3",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(dispatch(cli), 0);
        assert!(out.join("loss.csv").is_file());

        let report_path = dir.path().join("report.csv");
        let cli = parse(&[
            "ordpose",
            "eval",
            "--checkpoint",
            out.join("checkpoint").to_str().unwrap(),
            "--frames",
            "2",
            "--thresholds",
            "8,16,32",
            "--out",
            report_path.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(dispatch(cli), 0);
        let report = fs::read_to_string(&report_path).unwrap();
        assert!(report.starts_with("metric,value\n"));
        assert!(report.contains("mean_3d_error,"));
        assert!(report.contains("success@32,"));
    }

    #[test]
    fn missing_checkpoint_is_a_runtime_failure() {
        let cli = parse(&["ordpose", "eval", "--checkpoint", "/nonexistent/ckpt"]).unwrap();
        assert_eq!(dispatch(cli), 1);
    }
}
