use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sdnn_core::masking::{aggregate_regions, build_heatmap, static_topk, Rect, REGION_SIZE};
use sdnn_core::metrics::{calibrate, CalibrationPoint, CostCoefficients};
use sdnn_core::network::NetworkConfig;
use sdnn_pipeline::artifact::{load_static_mask, save_static_mask};
use sdnn_pipeline::eval::{evaluate_map, evaluate_miou};
use sdnn_pipeline::manifest::{filter_split, ingest, Sequence, Split};
use sdnn_pipeline::ppm::{read_dimensions, write_image};
use sdnn_pipeline::report::{
    read_layers_csv, write_detections, write_layers_csv, write_summary,
};
use sdnn_pipeline::run::{dump_delta, execute, resolve_weights, MaskMode, RunOptions, RunSetup};

/// Event-driven sigma-delta detector simulator with input region masking.
#[derive(Parser)]
#[command(name = "sdnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate training-set boxes into a heatmap and keep the top regions.
    BuildStaticMask(BuildStaticMaskArgs),
    /// Run the masked event-driven detector over a manifest.
    Run(RunArgs),
    /// Write the input/masked/delta panels for one frame.
    DumpDelta(DumpDeltaArgs),
    /// Mask quality against ground-truth region labels.
    EvalMiou(EvalMiouArgs),
    /// Detection quality of a finished run.
    EvalMap(EvalMapArgs),
    /// Fit cost coefficients to observed energy/latency targets.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct CommonNetArgs {
    /// Network config JSON; the built-in single-head detector when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SDNNW1 weights container; deterministic seeded weights when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for generated weights and any seeded behavior.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct MaskArgs {
    /// Mask mode: none | static | dynamic | combined.
    #[arg(long, default_value = "none")]
    mask: String,
    /// Static mask artifact (PGM plus sidecar) for static/combined modes.
    #[arg(long)]
    static_mask: Option<PathBuf>,
    /// Region threshold t_reg for the dynamic mask.
    #[arg(long, default_value_t = 0.1)]
    treg: f64,
    /// Override every layer's delta threshold.
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args)]
struct BuildStaticMaskArgs {
    /// JSONL dataset manifest; the train split feeds the heatmap.
    #[arg(long)]
    manifest: PathBuf,
    /// Static keep rate k_s in (0, 1].
    #[arg(long, default_value_t = 0.2)]
    ks: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for static_mask.pgm and its sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    net: CommonNetArgs,
    #[command(flatten)]
    mask: MaskArgs,
    /// Cost coefficients JSON; calibrated defaults when omitted.
    #[arg(long)]
    coeff: Option<PathBuf>,
    /// Which manifest split to run: train | val | all.
    #[arg(long, default_value = "val")]
    split: String,
    /// Detection confidence threshold.
    #[arg(long, default_value_t = 0.25)]
    conf: f32,
    /// Worker threads across sequences (within a sequence stays serial).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for summary.json, layers.csv and detections.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpDeltaArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    net: CommonNetArgs,
    #[command(flatten)]
    mask: MaskArgs,
    /// Sequence id to replay.
    #[arg(long)]
    seq: String,
    /// Frame index to dump.
    #[arg(long)]
    frame: u64,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalMiouArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    net: CommonNetArgs,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct EvalMapArgs {
    /// detections.jsonl produced by `run`.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Observations JSON: a list of {layers_csv, frames, energy_mj, latency_ms}.
    #[arg(long)]
    observations: PathBuf,
    /// Output path for the fitted coefficients JSON.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<NetworkConfig> {
    match path {
        Some(p) => NetworkConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(NetworkConfig::yolo_kp(9)),
    }
}

fn load_coefficients(path: &Option<PathBuf>) -> anyhow::Result<CostCoefficients> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let coeff: CostCoefficients =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            coeff.validate()?;
            Ok(coeff)
        }
        None => Ok(CostCoefficients::default()),
    }
}

fn load_split(manifest: &Path, split: &str) -> anyhow::Result<Vec<Sequence>> {
    let sequences = ingest(manifest)?;
    Ok(match split {
        "train" => filter_split(sequences, Split::Train),
        "val" => filter_split(sequences, Split::Val),
        "all" => sequences,
        other => bail!("unknown split {other} (train|val|all)"),
    })
}

fn build_setup(
    net: &CommonNetArgs,
    mask: &MaskArgs,
    coeff: &Option<PathBuf>,
    conf: f32,
    jobs: usize,
) -> anyhow::Result<RunSetup> {
    let config = load_config(&net.config)?;
    let (weights, mgnet) = resolve_weights(net.weights.as_deref(), &config, net.seed)?;
    let static_mask = match &mask.static_mask {
        Some(path) => Some(load_static_mask(path)?.0),
        None => None,
    };
    let setup = RunSetup {
        config,
        weights,
        mgnet,
        static_mask,
        coefficients: load_coefficients(coeff)?,
        options: RunOptions {
            mask_mode: MaskMode::parse(&mask.mask)?,
            region_threshold: mask.treg,
            threshold_override: mask.theta,
            confidence_threshold: conf,
            nms_iou: 0.5,
            jobs,
        },
    };
    setup.validate()?;
    Ok(setup)
}

fn cmd_build_static_mask(args: &BuildStaticMaskArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let canvas = config.input_size;
    let train = load_split(&args.manifest, "train")?;
    let mut per_image: Vec<Vec<Rect>> = Vec::new();
    for sequence in &train {
        for frame in &sequence.frames {
            let (w, h) = read_dimensions(&frame.image_path)?;
            let (tf, _, _) = sdnn_core::tensor::letterbox_transform(h, w, canvas)?;
            per_image.push(frame.boxes.iter().map(|b| b.rect.transformed(&tf)).collect());
        }
    }
    if per_image.is_empty() {
        bail!("the train split of {} is empty", args.manifest.display());
    }
    let heatmap = build_heatmap(&per_image, canvas, canvas);
    let scores = aggregate_regions(&heatmap, REGION_SIZE)?;
    let mask = static_topk(&scores, args.ks, REGION_SIZE)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("static_mask.pgm");
    save_static_mask(&path, &mask, args.ks, &args.manifest.display().to_string())?;
    println!(
        "static mask: kept {}/{} regions ({} images) -> {}",
        mask.kept_count(),
        mask.total(),
        per_image.len(),
        path.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let setup = build_setup(&args.net, &args.mask, &args.coeff, args.conf, args.jobs)?;
    let sequences = load_split(&args.manifest, &args.split)?;
    if sequences.is_empty() {
        bail!("split {} of {} is empty", args.split, args.manifest.display());
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let output = match execute(&setup, &sequences) {
        Ok(output) => output,
        Err(e) => {
            // Leave a marker so a partially written output directory is
            // never mistaken for a finished run.
            let _ = fs::write(args.out.join("FAILED"), format!("{e}\n"));
            return Err(e.into());
        }
    };
    write_summary(&args.out.join("summary.json"), &output.summary)?;
    write_layers_csv(&args.out.join("layers.csv"), &output.activity)?;
    write_detections(&args.out.join("detections.jsonl"), &output.detections)?;
    println!(
        "{} frames, mask {}: energy {:.3} mJ, latency {:.3} ms, {:.1} fps, edp {:.3} uJs, {:.1} GOPS/W",
        output.activity.frames,
        output.summary.mask_mode,
        output.summary.energy_mj,
        output.summary.latency_ms,
        output.summary.throughput_fps,
        output.summary.edp_ujs,
        output.summary.gops_per_watt,
    );
    for (seq, sparsity) in &output.sequence_sparsity {
        println!("  sequence {seq}: mean frame sparsity {sparsity:.4}");
    }
    if let Some(miou) = output.miou {
        println!("  miou {miou:.4}");
    }
    if let Some(map) = output.map50 {
        println!("  map50 {map:.4}");
    }
    println!("reports in {}", args.out.display());
    Ok(())
}

fn cmd_dump_delta(args: &DumpDeltaArgs) -> anyhow::Result<()> {
    let setup = build_setup(&args.net, &args.mask, &None, 0.25, 1)?;
    let sequences = load_split(&args.manifest, &args.split)?;
    let sequence = sequences
        .iter()
        .find(|s| s.id == args.seq)
        .with_context(|| format!("sequence {} not found in the {} split", args.seq, args.split))?;
    let dump = dump_delta(&setup, sequence, args.frame)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let stem = format!("{}_{:06}", args.seq, args.frame);
    let input = args.out.join(format!("{stem}_input.ppm"));
    let masked = args.out.join(format!("{stem}_masked.ppm"));
    let delta = args.out.join(format!("{stem}_delta.pgm"));
    write_image(&input, &dump.input)?;
    write_image(&masked, &dump.masked)?;
    write_image(&delta, &dump.delta)?;
    println!("wrote {}, {}, {}", input.display(), masked.display(), delta.display());
    Ok(())
}

fn cmd_eval_miou(args: &EvalMiouArgs) -> anyhow::Result<()> {
    let setup = build_setup(&args.net, &args.mask, &None, 0.25, 1)?;
    let sequences = load_split(&args.manifest, &args.split)?;
    match evaluate_miou(&setup, &sequences)? {
        Some(miou) => println!("miou {miou:.6}"),
        None => println!("miou undefined: no frame carries ground-truth boxes"),
    }
    Ok(())
}

fn cmd_eval_map(args: &EvalMapArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let sequences = load_split(&args.manifest, &args.split)?;
    match evaluate_map(&args.detections, &sequences, config.input_size)? {
        Some(map) => println!("map50 {map:.6}"),
        None => println!("map50 undefined: no ground truth in the manifest"),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct Observation {
    layers_csv: PathBuf,
    frames: u64,
    energy_mj: f64,
    latency_ms: f64,
}

fn cmd_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.observations)
        .with_context(|| format!("reading {}", args.observations.display()))?;
    let observations: Vec<Observation> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.observations.display()))?;
    let base = args.observations.parent().unwrap_or_else(|| Path::new("."));
    let mut points = Vec::new();
    for obs in &observations {
        let csv_path = if obs.layers_csv.is_absolute() {
            obs.layers_csv.clone()
        } else {
            base.join(&obs.layers_csv)
        };
        points.push(CalibrationPoint {
            activity: read_layers_csv(&csv_path, obs.frames)?,
            energy_mj: obs.energy_mj,
            latency_ms: obs.latency_ms,
        });
    }
    let fit = calibrate(&points)?;
    if fit.energy_rank_deficient {
        println!("warning: energy system is rank-deficient; unresolved terms pinned to zero");
    }
    if fit.latency_rank_deficient {
        println!("warning: latency system is rank-deficient; unresolved terms pinned to zero");
    }
    for (i, (er, lr)) in fit
        .energy_residuals
        .iter()
        .zip(&fit.latency_residuals)
        .enumerate()
    {
        println!("observation {i}: energy residual {er:+.6} mJ, latency residual {lr:+.6} ms");
    }
    let text = serde_json::to_string_pretty(&fit.coefficients)? + "\n";
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    println!("coefficients -> {}", args.out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::BuildStaticMask(args) => cmd_build_static_mask(args),
        Command::Run(args) => cmd_run(args),
        Command::DumpDelta(args) => cmd_dump_delta(args),
        Command::EvalMiou(args) => cmd_eval_miou(args),
        Command::EvalMap(args) => cmd_eval_map(args),
        Command::Calibrate(args) => cmd_calibrate(args),
    }
}
