//! Command-line entry point wiring datasets, training, evaluation, and the
//! numeric self-checks into reproducible batch workflows. Every command is a
//! pure function of (config files, flags, seed): re-running an invocation
//! rewrites byte-identical artifacts.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use poseforge::coco::parse_detections;
use poseforge::config::{load_global, ConfigError, LoadedConfig};
use poseforge::geometry::udp_resize_transform;
use poseforge::heatmap::{decode_heatmap_coords, encode, Heatmap, HeatmapConfig};
use poseforge::image::ImageBuf;
use poseforge::micronet::{FeatureTap, MicroUNet};
use poseforge::oks::{evaluate, pr_curves_svg};
use poseforge::oks_reference::selftest;
use poseforge::pipeline::{
    encode_gt_crop, gt_roundtrip_results, load_manifest_split, predict_detections, predict_split,
    LoadedSplit, TrainPipeline,
};
use poseforge::rng::{rng_for_item, stream};
use poseforge::skeleton::{Keypoint, PersonInstance, Visibility};
use poseforge::synthdata::{build_dataset, load_manifest, FigureParams, StyleParams};
use poseforge::trainer::{gradcheck, gradcheck_fixture, train_with_log, TrainError};

/// Gradient bound the checker enforces on the shipped fixture.
const GRADCHECK_BOUND: f64 = 1e-4;
/// Sub-pixel bound on the encode-decode roundtrip, in heatmap pixels.
const ROUNDTRIP_BOUND: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "poseforge",
    version,
    about = "Deterministic keypoint-estimation workbench: synthetic datasets, \
             multi-task training, COCO-protocol evaluation, and numeric self-checks.",
    after_help = "Exit codes: 0 success, 1 verification failure, 2 config/usage error, \
                  3 numeric failure. The POSEFORGE_SEED environment variable overrides \
                  the config seed."
)]
struct Cli {
    /// Path to the global config file.
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: clean train/val splits plus a
    /// stylized copy of the val images sharing the val annotations.
    DatasetGen {
        /// Training scenes to render.
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        /// Validation scenes to render.
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        /// Overrides the config seed for this run.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (default: <out_dir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the network on the generated train split and write a
    /// checkpoint plus a JSON-lines loss log.
    Train {
        /// Overrides the step count from the train config.
        #[arg(long)]
        steps: Option<usize>,
        /// Disable the reconstruction task: pose-only training.
        #[arg(long)]
        no_recon: bool,
        /// Decoder stage feeding the pose head.
        #[arg(long, value_enum)]
        tap: Option<TapArg>,
        /// Overrides the config seed for this run.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory (defaults to <out_dir>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run output directory (defaults to <out_dir>/run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference over a split, write results, PR curves, and the
    /// evaluation report, and print the AP/AR table.
    Eval {
        /// Checkpoint to evaluate (defaults to <out_dir>/run/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (defaults to <out_dir>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split to evaluate: train, val, or val_stylized.
        #[arg(long, default_value = "val")]
        split: String,
        /// Crop from ground-truth boxes.
        #[arg(long, group = "boxes")]
        gt_boxes: bool,
        /// Crop from a detection file (JSON array of box records).
        #[arg(long, group = "boxes")]
        detections: Option<PathBuf>,
        /// Skip the network: encode ground truth, decode it back, and
        /// evaluate that. A perfect score checks the whole coordinate chain.
        #[arg(long, group = "boxes")]
        gt_roundtrip: bool,
        /// Average each prediction with the prediction on the mirrored crop.
        #[arg(long)]
        flip_test: bool,
        /// Report output directory (defaults to <out_dir>/eval/<split>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmap codec utilities.
    Codec {
        #[command(subcommand)]
        action: CodecAction,
    },
    /// Check every analytic gradient against central finite differences on
    /// a small fixture and print the per-block report.
    Gradcheck {
        /// Damage the first gradient block first; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        /// Overrides the config seed for the fixture.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the evaluator against the brute-force reference on random
    /// scenes and the hand-derived half-matched case.
    OksSelftest {
        /// Number of random scenes to compare.
        #[arg(long, default_value_t = 50)]
        scenes: usize,
    },
    /// Apply the parametric appearance shift to one PPM image.
    Stylize {
        /// Input image (binary PPM).
        input: PathBuf,
        /// Output image (binary PPM).
        output: PathBuf,
        /// Hue rotation about the gray axis, degrees.
        #[arg(long, default_value_t = 120.0)]
        hue_deg: f64,
        /// Saturation multiplier.
        #[arg(long, default_value_t = 0.7)]
        saturation: f64,
        /// Gaussian blur standard deviation, pixels; 0 disables.
        #[arg(long, default_value_t = 1.2)]
        blur_sigma: f64,
        /// Multiplicative noise amplitude in [0, 1).
        #[arg(long, default_value_t = 0.35)]
        noise: f64,
        /// Seed for the noise field.
        #[arg(long, default_value_t = 77)]
        style_seed: u64,
    },
}

#[derive(Subcommand)]
enum CodecAction {
    /// Encode random keypoints, decode them back, and print the worst
    /// sub-pixel error per Gaussian width.
    Roundtrip {
        /// Keypoints per Gaussian width (positions stay one cell inside the
        /// border, where the sub-pixel refinement is defined).
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Encode one annotated instance into a heatmap blob.
    Encode {
        /// Annotation file in COCO keypoint format.
        #[arg(long)]
        annotations: PathBuf,
        /// Annotation index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Blob output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the decoded coordinates of a heatmap blob.
    Decode {
        /// Blob produced by `codec encode`.
        #[arg(long)]
        blob: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    Last,
    SecondToLast,
}

impl From<TapArg> for FeatureTap {
    fn from(t: TapArg) -> Self {
        match t {
            TapArg::Last => FeatureTap::Last,
            TapArg::SecondToLast => FeatureTap::SecondToLast,
        }
    }
}

enum CliError {
    /// Bad configuration, paths, or flag combinations: exit 2.
    Usage(String),
    /// A verification bound was violated: exit 1.
    Check(String),
    /// Training produced a non-finite value: exit 3.
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Maps module errors that reach the command layer; at that point they are
/// environment or input problems, not violated bounds.
fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn usage_at(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_global(&cli.config)?;
    match cli.command {
        Command::DatasetGen { n_train, n_val, seed, out } => {
            cmd_dataset_gen(&cfg, n_train, n_val, seed, out)
        }
        Command::Train { steps, no_recon, tap, seed, dataset, out } => {
            cmd_train(&cfg, steps, no_recon, tap, seed, dataset, out)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            gt_boxes,
            detections,
            gt_roundtrip,
            flip_test,
            out,
        } => cmd_eval(
            &cfg,
            checkpoint,
            dataset,
            &split,
            gt_boxes,
            detections,
            gt_roundtrip,
            flip_test,
            out,
        ),
        Command::Codec { action } => match action {
            CodecAction::Roundtrip { n } => cmd_codec_roundtrip(&cfg, n),
            CodecAction::Encode { annotations, index, out } => {
                cmd_codec_encode(&cfg, &annotations, index, &out)
            }
            CodecAction::Decode { blob } => cmd_codec_decode(&blob),
        },
        Command::Gradcheck { corrupt, seed } => cmd_gradcheck(&cfg, corrupt, seed),
        Command::OksSelftest { scenes } => cmd_oks_selftest(scenes),
        Command::Stylize {
            input,
            output,
            hue_deg,
            saturation,
            blur_sigma,
            noise,
            style_seed,
        } => cmd_stylize(&input, &output, hue_deg, saturation, blur_sigma, noise, style_seed),
    }
}

fn cmd_dataset_gen(
    cfg: &LoadedConfig,
    n_train: usize,
    n_val: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let seed = seed.unwrap_or(cfg.seed);
    let dir = out.unwrap_or_else(|| cfg.out_dir.join("dataset"));
    let manifest = build_dataset(
        &cfg.skeleton,
        &FigureParams::default(),
        &StyleParams::monet(),
        n_train,
        n_val,
        seed,
        &dir,
    )
    .map_err(usage)?;
    for split in &manifest.splits {
        println!(
            "split {:<13} {:>4} images  {}",
            split.name, split.n_images, split.annotation_file
        );
    }
    println!("{}", dir.join("manifest.json").display());
    Ok(())
}

fn load_split_for(
    cfg: &LoadedConfig,
    dataset: Option<PathBuf>,
    split: &str,
) -> Result<(PathBuf, LoadedSplit), CliError> {
    let dir = dataset.unwrap_or_else(|| cfg.out_dir.join("dataset"));
    let manifest_path = dir.join("manifest.json");
    let manifest = load_manifest(&manifest_path).map_err(|e| usage_at(&manifest_path, e))?;
    let split = load_manifest_split(&dir, &manifest, split, &cfg.skeleton)
        .map_err(|e| usage_at(&dir, e))?;
    Ok((dir, split))
}

fn cmd_train(
    cfg: &LoadedConfig,
    steps: Option<usize>,
    no_recon: bool,
    tap: Option<TapArg>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let seed = seed.unwrap_or(cfg.seed);
    let (_, split) = load_split_for(cfg, dataset, "train")?;

    let mut net_cfg = cfg.net.clone();
    if let Some(t) = tap {
        net_cfg.feature_tap = t.into();
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    if no_recon {
        train_cfg.recon_enabled = false;
    }

    let run_dir = out.unwrap_or_else(|| cfg.out_dir.join("run"));
    fs::create_dir_all(&run_dir).map_err(|e| usage_at(&run_dir, e))?;

    let mut net = MicroUNet::new(net_cfg, seed).map_err(usage)?;
    let pipeline = TrainPipeline {
        split: &split,
        spec: &cfg.skeleton,
        aug: &cfg.aug,
        heatmap: &cfg.heatmap,
    };

    let log_path = run_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| usage_at(&log_path, e))?;
    let records = train_with_log(&mut net, &pipeline, &train_cfg, Some(&mut log))?;
    log.flush().map_err(|e| usage_at(&log_path, e))?;

    let ckpt_path = run_dir.join("checkpoint.bin");
    net.save(&ckpt_path).map_err(|e| usage_at(&ckpt_path, e))?;

    let snapshot_path = run_dir.join("run_config.json");
    let snapshot = serde_json::json!({
        "net": net.config,
        "train": train_cfg,
        "samples": split.entries.len(),
    });
    let mut text = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    text.push('\n');
    fs::write(&snapshot_path, text).map_err(|e| usage_at(&snapshot_path, e))?;

    match records.last() {
        Some(last) => println!(
            "step {:>6}  loss_total {:.6}  loss_rgb {:.6}  loss_pose {:.6}",
            last.step, last.loss_total, last.loss_rgb, last.loss_pose
        ),
        None => println!("0 steps: checkpoint equals initialization"),
    }
    println!("{}", ckpt_path.display());
    println!("{}", log_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &LoadedConfig,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    split_name: &str,
    gt_boxes: bool,
    detections: Option<PathBuf>,
    gt_roundtrip: bool,
    flip_test: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if !gt_boxes && detections.is_none() && !gt_roundtrip {
        return Err(CliError::Usage(
            "eval needs a box source: --gt-boxes, --detections <file>, or --gt-roundtrip".into(),
        ));
    }
    let (_, split) = load_split_for(cfg, dataset, split_name)?;

    let result_file = if gt_roundtrip {
        gt_roundtrip_results(&split, &cfg.skeleton, &cfg.heatmap).map_err(usage)?
    } else {
        let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("run/checkpoint.bin"));
        let net = MicroUNet::load(&ckpt).map_err(|e| usage_at(&ckpt, e))?;
        if net.config.k != cfg.skeleton.k || net.config.input_size != cfg.heatmap.input_size {
            return Err(CliError::Usage(format!(
                "checkpoint {} was trained for k={} input {:?}, config wants k={} input {:?}",
                ckpt.display(),
                net.config.k,
                net.config.input_size,
                cfg.skeleton.k,
                cfg.heatmap.input_size,
            )));
        }
        let predictions = match &detections {
            Some(det_path) => {
                let bytes = fs::read(det_path).map_err(|e| usage_at(det_path, e))?;
                let dets = parse_detections(&bytes).map_err(|e| usage_at(det_path, e))?;
                predict_detections(&net, &split, &dets, &cfg.skeleton, &cfg.heatmap, flip_test)
                    .map_err(usage)?
            }
            None => {
                predict_split(&net, &split, &cfg.skeleton, &cfg.heatmap, flip_test).map_err(usage)?
            }
        };
        poseforge::coco::ResultFile {
            results: predictions.into_iter().map(|p| p.result).collect(),
        }
    };

    let report = evaluate(&split.annotation, &result_file, &cfg.oks).map_err(usage)?;

    let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("eval").join(split_name));
    fs::create_dir_all(&out_dir).map_err(|e| usage_at(&out_dir, e))?;
    let results_path = out_dir.join("results.json");
    fs::write(&results_path, poseforge::coco::write_results(&result_file))
        .map_err(|e| usage_at(&results_path, e))?;
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, report.to_json()).map_err(|e| usage_at(&report_path, e))?;
    let svg_path = out_dir.join("pr_curves.svg");
    fs::write(&svg_path, pr_curves_svg(&report)).map_err(|e| usage_at(&svg_path, e))?;

    print!("{}", report.text_table());
    println!();
    println!("{}", results_path.display());
    println!("{}", report_path.display());
    println!("{}", svg_path.display());
    Ok(())
}

fn cmd_codec_roundtrip(cfg: &LoadedConfig, n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let k = cfg.skeleton.k;
    let (hw, hh) = cfg.heatmap.heatmap_size;
    let to_input = udp_resize_transform(cfg.heatmap.heatmap_size, cfg.heatmap.input_size)
        .map_err(usage)?;
    let (iw, ih) = cfg.heatmap.input_size;

    let mut worst = 0.0f64;
    for (si, &sigma) in [1.5, 2.0, 3.0].iter().enumerate() {
        let hm_cfg = HeatmapConfig { sigma, ..cfg.heatmap };
        let mut rng = rng_for_item(cfg.seed, stream::SELFTEST, si as u64);
        let mut sigma_worst = 0.0f64;
        let mut done = 0usize;
        while done < n {
            let grid: Vec<(f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.gen_range(1.0..(hw - 2) as f64),
                        rng.gen_range(1.0..(hh - 2) as f64),
                    )
                })
                .collect();
            let keypoints: Vec<Keypoint> = grid
                .iter()
                .map(|&(u, v)| {
                    let (x, y) = to_input.apply(u, v);
                    Keypoint { x, y, v: Visibility::Visible }
                })
                .collect();
            let inst = PersonInstance {
                image_id: 0,
                keypoints,
                bbox: poseforge::skeleton::BBox::new(0.0, 0.0, iw as f64, ih as f64),
                area: (iw * ih) as f64,
                score: None,
                iscrowd: false,
            };
            let hm = encode(&inst, &hm_cfg, &cfg.skeleton).map_err(usage)?;
            for (d, &(u, v)) in decode_heatmap_coords(&hm).iter().zip(&grid) {
                let err = ((d.x - u).powi(2) + (d.y - v).powi(2)).sqrt();
                sigma_worst = sigma_worst.max(err);
            }
            done += k;
        }
        println!("sigma {sigma:>3.1}  {done} keypoints  max error {sigma_worst:.3e} heatmap px");
        worst = worst.max(sigma_worst);
    }
    println!("max error {worst:.3e} heatmap px (bound {ROUNDTRIP_BOUND})");
    if worst < ROUNDTRIP_BOUND {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "roundtrip error {worst:.6} exceeds {ROUNDTRIP_BOUND} heatmap px"
        )))
    }
}

fn cmd_codec_encode(
    cfg: &LoadedConfig,
    annotations: &Path,
    index: usize,
    out: &Path,
) -> Result<(), CliError> {
    let bytes = fs::read(annotations).map_err(|e| usage_at(annotations, e))?;
    let file = poseforge::coco::parse_annotations(&bytes, &cfg.skeleton)
        .map_err(|e| usage_at(annotations, e))?;
    let inst = file.annotations.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "annotation index {index} out of range ({} annotations)",
            file.annotations.len()
        ))
    })?;

    let (hm, _) = encode_gt_crop(inst, &cfg.skeleton, &cfg.heatmap).map_err(usage)?;
    fs::write(out, hm.to_blob()).map_err(|e| usage_at(out, e))?;
    let (w, h) = cfg.heatmap.heatmap_size;
    println!(
        "encoded annotation {index} (image {}) as {}x{}x{} sigma {}",
        inst.image_id,
        cfg.skeleton.k,
        w,
        h,
        cfg.heatmap.sigma
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_codec_decode(blob: &Path) -> Result<(), CliError> {
    let bytes = fs::read(blob).map_err(|e| usage_at(blob, e))?;
    let hm = Heatmap::from_blob(&bytes).map_err(|e| usage_at(blob, e))?;
    let (w, h) = hm.config.heatmap_size;
    println!(
        "blob: {} channels, {w}x{h} grid, sigma {}",
        hm.num_channels(),
        hm.config.sigma
    );
    println!("channel  u         v         confidence");
    for (k, d) in decode_heatmap_coords(&hm).iter().enumerate() {
        println!("{k:<7}  {:<8.4}  {:<8.4}  {:.4}", d.x, d.y, d.confidence);
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &LoadedConfig, corrupt: bool, seed: Option<u64>) -> Result<(), CliError> {
    let seed = seed.unwrap_or(cfg.seed);
    let (net_cfg, img, gt) = gradcheck_fixture(seed);
    let mut net = MicroUNet::new(net_cfg, seed).map_err(usage)?;
    let train_cfg = poseforge::trainer::TrainConfig {
        steps: 1,
        seed,
        ..Default::default()
    };
    let report = gradcheck(&mut net, &img, &gt, &train_cfg, corrupt)?;
    println!("block                                    rel err");
    for b in &report.blocks {
        println!("{:<40} {:.3e}", b.name, b.rel_err);
    }
    println!(
        "max relative error {:.3e} (bound {GRADCHECK_BOUND:.0e}{})",
        report.max_rel_err,
        if corrupt { ", corrupted on purpose" } else { "" }
    );
    if report.max_rel_err < GRADCHECK_BOUND {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient error {:.3e} exceeds {GRADCHECK_BOUND:.0e} in block {}",
            report.max_rel_err,
            report.blocks.first().map(|b| b.name.as_str()).unwrap_or("?")
        )))
    }
}

fn cmd_oks_selftest(scenes: usize) -> Result<(), CliError> {
    let cases = selftest(scenes, 0);
    let mut first_failure: Option<String> = None;
    for c in &cases {
        println!("{} {} ({})", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        if !c.passed && first_failure.is_none() {
            first_failure = Some(format!("{}: {}", c.name, c.detail));
        }
    }
    println!("{} of {} cases agree", cases.iter().filter(|c| c.passed).count(), cases.len());
    match first_failure {
        None => Ok(()),
        Some(msg) => Err(CliError::Check(msg)),
    }
}

fn cmd_stylize(
    input: &Path,
    output: &Path,
    hue_deg: f64,
    saturation: f64,
    blur_sigma: f64,
    noise: f64,
    style_seed: u64,
) -> Result<(), CliError> {
    let style = StyleParams {
        hue_rotation_deg: hue_deg,
        saturation_scale: saturation,
        blur_sigma,
        noise_amplitude: noise,
        seed: style_seed,
    };
    style.validate().map_err(usage)?;
    let img = ImageBuf::load_ppm(input).map_err(|e| usage_at(input, e))?;
    let out = poseforge::synthdata::stylize(&img, &style);
    out.save_ppm(output).map_err(|e| usage_at(output, e))?;
    println!("{}", output.display());
    Ok(())
}
