//! End-to-end run orchestration: letterbox, mask, event-driven detector
//! step, detection decode, metric aggregation and dump capture.
//!
//! Sequences may fan out to worker threads; each sequence is processed
//! strictly in frame order on one thread (the sigma-delta state is temporal)
//! and results reduce in manifest order, so outputs are byte-identical for
//! any worker count.

use std::path::Path;
use std::thread;

use sdnn_core::masking::{
    apply_mask, combine, dynamic_mask, mgnet_forward, region_labels, MGNetParams, RegionMask,
    Rect, REGION_SIZE,
};
use sdnn_core::metrics::{
    self, cost_report, CostCoefficients, CostReport, GtBox, RunActivity,
};
use sdnn_core::network::{
    convert_to_sdnn, decode_detections, BoundingBox, Detection, FrameStats, NetworkConfig,
    NetworkWeights, Sdnn,
};
use sdnn_core::sigma_delta::DeltaState;
use sdnn_core::tensor::{avg_downsample2x, letterbox, quantize, LetterboxTransform, Tensor};

use crate::error::{PipelineError, Result};
use crate::manifest::Sequence;
use crate::ppm::{image_to_tensor, read_image, tensor_to_image, Image};
use crate::report::{DetectionRecord, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Static,
    Dynamic,
    Combined,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::None => "none",
            MaskMode::Static => "static",
            MaskMode::Dynamic => "dynamic",
            MaskMode::Combined => "combined",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "none" => Ok(MaskMode::None),
            "static" => Ok(MaskMode::Static),
            "dynamic" => Ok(MaskMode::Dynamic),
            "combined" => Ok(MaskMode::Combined),
            other => Err(PipelineError::Invalid(format!(
                "unknown mask mode {other} (none|static|dynamic|combined)"
            ))),
        }
    }

    fn needs_static(&self) -> bool {
        matches!(self, MaskMode::Static | MaskMode::Combined)
    }

    fn needs_dynamic(&self) -> bool {
        matches!(self, MaskMode::Dynamic | MaskMode::Combined)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mask_mode: MaskMode,
    /// Dynamic-mask region threshold (t_reg).
    pub region_threshold: f64,
    /// Overrides every layer's delta threshold when set.
    pub threshold_override: Option<f64>,
    pub confidence_threshold: f32,
    pub nms_iou: f32,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mask_mode: MaskMode::None,
            region_threshold: 0.1,
            threshold_override: None,
            confidence_threshold: 0.25,
            nms_iou: 0.5,
            jobs: 1,
        }
    }
}

/// Everything a run needs, resolved and validated.
pub struct RunSetup {
    pub config: NetworkConfig,
    pub weights: NetworkWeights,
    pub mgnet: Option<MGNetParams>,
    pub static_mask: Option<RegionMask>,
    pub coefficients: CostCoefficients,
    pub options: RunOptions,
}

impl RunSetup {
    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(PipelineError::Core)?;
        self.weights.validate(&self.config).map_err(PipelineError::Core)?;
        self.coefficients.validate().map_err(PipelineError::Core)?;
        if !(self.options.region_threshold > 0.0 && self.options.region_threshold < 1.0) {
            return Err(PipelineError::Invalid(format!(
                "region threshold must lie in (0,1), got {}",
                self.options.region_threshold
            )));
        }
        if !self.config.input_size.is_multiple_of(REGION_SIZE) {
            return Err(PipelineError::Invalid(format!(
                "input size {} is not a multiple of the region size {REGION_SIZE}",
                self.config.input_size
            )));
        }
        let grid = self.mask_grid();
        if self.options.mask_mode.needs_static() {
            let Some(mask) = &self.static_mask else {
                return Err(PipelineError::Invalid(
                    "mask mode needs a static mask artifact (run build-static-mask first)".into(),
                ));
            };
            if mask.rows() != grid || mask.cols() != grid || mask.region_size() != REGION_SIZE {
                return Err(PipelineError::Invalid(format!(
                    "static mask is {}x{} (p={}), run needs {grid}x{grid} (p={REGION_SIZE})",
                    mask.rows(),
                    mask.cols(),
                    mask.region_size()
                )));
            }
        }
        if self.options.mask_mode.needs_dynamic() {
            let Some(mgnet) = &self.mgnet else {
                return Err(PipelineError::Invalid(
                    "mask mode needs scorer weights (mgnet.*) in the container".into(),
                ));
            };
            if mgnet.patch_size != REGION_SIZE {
                return Err(PipelineError::Invalid(format!(
                    "scorer patch size {} must equal the region size {REGION_SIZE}",
                    mgnet.patch_size
                )));
            }
            let half = self.config.input_size / 2;
            let expect = (half / mgnet.patch_size) * (half / mgnet.patch_size);
            if mgnet.patch_tokens() != expect {
                return Err(PipelineError::Invalid(format!(
                    "scorer sized for {} patches, the {half}x{half} downsample yields {expect}",
                    mgnet.patch_tokens()
                )));
            }
        }
        Ok(())
    }

    /// Region grid edge on the full-resolution canvas.
    pub fn mask_grid(&self) -> usize {
        self.config.input_size / REGION_SIZE
    }
}

/// Per-sequence outcome, kept separate so reduction can run in a fixed order.
struct SequenceOutcome {
    frame_stats: Vec<FrameStats>,
    detections: Vec<DetectionRecord>,
    sparsities: Vec<f64>,
    /// (applied mask, ground-truth labels) for frames that carry boxes.
    miou_pairs: Vec<(RegionMask, RegionMask)>,
    /// Ground truth per frame, mapped onto the canvas.
    ground_truth: Vec<Vec<GtBox>>,
    decoded: Vec<Vec<Detection>>,
}

/// The aggregate result of a run.
#[derive(Debug)]
pub struct RunOutput {
    pub activity: RunActivity,
    pub cost: CostReport,
    pub summary: Summary,
    pub detections: Vec<DetectionRecord>,
    pub miou: Option<f64>,
    pub map50: Option<f64>,
    /// Mean sparsity of the applied masks, per sequence.
    pub sequence_sparsity: Vec<(String, f64)>,
}

fn gt_boxes_on_canvas(boxes: &[crate::manifest::AnnotatedBox], tf: &LetterboxTransform) -> Vec<GtBox> {
    boxes
        .iter()
        .map(|b| {
            let r = b.rect.transformed(tf);
            GtBox {
                bbox: BoundingBox {
                    x1: r.x1 as f32,
                    y1: r.y1 as f32,
                    x2: r.x2 as f32,
                    y2: r.y2 as f32,
                },
                class_id: b.class_id,
            }
        })
        .collect()
}

/// Compute the mask for one frame.
pub fn frame_mask_for(
    setup: &RunSetup,
    frame448: &Tensor<f32>,
) -> Result<RegionMask> {
    let grid = setup.mask_grid();
    let mode = setup.options.mask_mode;
    let dynamic = if mode.needs_dynamic() {
        let mgnet = setup.mgnet.as_ref().expect("validated");
        let half = avg_downsample2x(frame448).map_err(PipelineError::Core)?;
        let logits = mgnet_forward(&half, mgnet).map_err(PipelineError::Core)?;
        let mask = dynamic_mask(&logits, setup.options.region_threshold, REGION_SIZE)
            .map_err(PipelineError::Core)?;
        Some(mask.upsample2x())
    } else {
        None
    };
    Ok(match mode {
        MaskMode::None => RegionMask::all(grid, grid, REGION_SIZE, true),
        MaskMode::Static => setup.static_mask.clone().expect("validated"),
        MaskMode::Dynamic => dynamic.expect("computed above"),
        MaskMode::Combined => combine(
            setup.static_mask.as_ref().expect("validated"),
            &dynamic.expect("computed above"),
        )
        .map_err(PipelineError::Core)?,
    })
}

fn process_sequence(setup: &RunSetup, sequence: &Sequence) -> Result<SequenceOutcome> {
    let mut sdnn: Sdnn = convert_to_sdnn(
        &setup.config,
        &setup.weights,
        setup.options.threshold_override,
    )
    .map_err(PipelineError::Core)?;
    sdnn.reset();
    let grid = setup.mask_grid();
    let mut outcome = SequenceOutcome {
        frame_stats: Vec::with_capacity(sequence.frames.len()),
        detections: Vec::with_capacity(sequence.frames.len()),
        sparsities: Vec::with_capacity(sequence.frames.len()),
        miou_pairs: Vec::new(),
        ground_truth: Vec::with_capacity(sequence.frames.len()),
        decoded: Vec::with_capacity(sequence.frames.len()),
    };
    for frame in &sequence.frames {
        let image = read_image(&frame.image_path)?;
        if image.channels != 3 {
            return Err(PipelineError::Invalid(format!(
                "{} is not an RGB frame",
                frame.image_path.display()
            )));
        }
        let raw = image_to_tensor(&image);
        let (frame448, tf) =
            letterbox(&raw, setup.config.input_size, 0.0).map_err(PipelineError::Core)?;
        let mask = frame_mask_for(setup, &frame448)?;
        let masked = apply_mask(&frame448, &mask).map_err(PipelineError::Core)?;
        let (head, stats) = sdnn.step(&masked).map_err(PipelineError::Core)?;
        let detections = decode_detections(
            &head.logits(),
            &setup.config,
            setup.options.confidence_threshold,
            setup.options.nms_iou,
        )
        .map_err(PipelineError::Core)?;

        outcome.sparsities.push(metrics::frame_sparsity(&mask));
        if !frame.boxes.is_empty() {
            let rects: Vec<Rect> = frame.boxes.iter().map(|b| b.rect).collect();
            let labels = region_labels(&rects, grid, grid, REGION_SIZE, &tf);
            outcome.miou_pairs.push((mask.clone(), labels));
        }
        outcome.ground_truth.push(gt_boxes_on_canvas(&frame.boxes, &tf));
        outcome.detections.push(DetectionRecord::from_detections(
            &sequence.id,
            frame.frame_index,
            &detections,
        ));
        outcome.decoded.push(detections);
        outcome.frame_stats.push(stats);
    }
    Ok(outcome)
}

/// Run every sequence and aggregate. Sequences fan out to `jobs` workers;
/// aggregation always folds in manifest order.
pub fn execute(setup: &RunSetup, sequences: &[Sequence]) -> Result<RunOutput> {
    setup.validate()?;
    let jobs = setup.options.jobs.max(1);
    let outcomes: Vec<Result<SequenceOutcome>> = if jobs == 1 || sequences.len() <= 1 {
        sequences.iter().map(|s| process_sequence(setup, s)).collect()
    } else {
        let mut slots: Vec<Option<Result<SequenceOutcome>>> =
            (0..sequences.len()).map(|_| None).collect();
        thread::scope(|scope| {
            let mut handles = Vec::new();
            for (worker, chunk) in sequences.chunks(sequences.len().div_ceil(jobs)).enumerate() {
                let offset = worker * sequences.len().div_ceil(jobs);
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (offset + i, process_sequence(setup, s)))
                        .collect::<Vec<_>>()
                }));
            }
            for handle in handles {
                for (idx, outcome) in handle.join().expect("worker panicked") {
                    slots[idx] = Some(outcome);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };

    let mut activity = RunActivity::default();
    let mut detections = Vec::new();
    let mut decoded: Vec<Vec<Detection>> = Vec::new();
    let mut ground_truth: Vec<Vec<GtBox>> = Vec::new();
    let mut miou_pairs = Vec::new();
    let mut sparsity_sum = 0f64;
    let mut sparsity_frames = 0u64;
    let mut sequence_sparsity = Vec::new();
    for (sequence, outcome) in sequences.iter().zip(outcomes) {
        let outcome = outcome?;
        for stats in &outcome.frame_stats {
            activity.accumulate(stats).map_err(PipelineError::Core)?;
        }
        let seq_mean = if outcome.sparsities.is_empty() {
            0.0
        } else {
            outcome.sparsities.iter().sum::<f64>() / outcome.sparsities.len() as f64
        };
        sequence_sparsity.push((sequence.id.clone(), seq_mean));
        sparsity_sum += outcome.sparsities.iter().sum::<f64>();
        sparsity_frames += outcome.sparsities.len() as u64;
        detections.extend(outcome.detections);
        decoded.extend(outcome.decoded);
        ground_truth.extend(outcome.ground_truth);
        miou_pairs.extend(outcome.miou_pairs);
    }
    if activity.frames == 0 {
        return Err(PipelineError::Invalid("the manifest contains no frames".into()));
    }
    let mean_sparsity = sparsity_sum / sparsity_frames.max(1) as f64;
    let cost = cost_report(&activity, &setup.coefficients, mean_sparsity)
        .map_err(PipelineError::Core)?;
    let miou = metrics::miou(&miou_pairs).map_err(PipelineError::Core)?;
    let map50 = metrics::map50(&decoded, &ground_truth).map_err(PipelineError::Core)?;
    let summary = Summary::from_cost(setup.options.mask_mode.as_str(), &cost, map50, miou);
    Ok(RunOutput {
        activity,
        cost,
        summary,
        detections,
        miou,
        map50,
        sequence_sparsity,
    })
}

// ---------------------------------------------------------------------------
// Delta dumps
// ---------------------------------------------------------------------------

/// The three panels of a delta dump: the letterboxed input, the masked frame
/// and the input-encoder event magnitudes scaled to 0..255.
pub struct DumpSet {
    pub input: Image,
    pub masked: Image,
    pub delta: Image,
}

/// Replay one sequence up to `frame_index` and capture the dump panels for
/// that frame. The event mirror repeats the network's input encoding
/// (quantized when the weights are quantized), so the panel shows exactly
/// what the first layer receives.
pub fn dump_delta(setup: &RunSetup, sequence: &Sequence, frame_index: u64) -> Result<DumpSet> {
    setup.validate()?;
    if !sequence.frames.iter().any(|f| f.frame_index == frame_index) {
        return Err(PipelineError::Invalid(format!(
            "sequence {} has no frame {frame_index}",
            sequence.id
        )));
    }
    let size = setup.config.input_size;
    let mut encoder_f32 = DeltaState::<f32>::new(&[3, size, size], 0.0).map_err(PipelineError::Core)?;
    let mut encoder_i32 = DeltaState::<i32>::new(&[3, size, size], 0).map_err(PipelineError::Core)?;
    let quant_input = match &setup.weights {
        NetworkWeights::Quant { input, .. } => Some(*input),
        NetworkWeights::F32(_) => None,
    };
    for frame in &sequence.frames {
        let image = read_image(&frame.image_path)?;
        let raw = image_to_tensor(&image);
        let (frame448, _) = letterbox(&raw, size, 0.0).map_err(PipelineError::Core)?;
        let mask = frame_mask_for(setup, &frame448)?;
        let masked = apply_mask(&frame448, &mask).map_err(PipelineError::Core)?;
        let magnitudes: Tensor<f32> = match quant_input {
            Some(q) => {
                let quantized: Tensor<i32> = quantize(&masked, q).map(|v| v as i32);
                let events = encoder_i32.encode(&quantized).map_err(PipelineError::Core)?;
                events.values().map(|v| v.abs() as f32)
            }
            None => {
                let events = encoder_f32.encode(&masked).map_err(PipelineError::Core)?;
                events.values().map(|v| v.abs())
            }
        };
        if frame.frame_index != frame_index {
            continue;
        }
        // Collapse channels and scale to the display range.
        let mut gray = vec![0f32; size * size];
        for c in 0..3 {
            for (g, v) in gray
                .iter_mut()
                .zip(&magnitudes.data()[c * size * size..(c + 1) * size * size])
            {
                *g += v;
            }
        }
        let peak = gray.iter().cloned().fold(0f32, f32::max);
        let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
        let delta_tensor =
            Tensor::from_vec(&[1, size, size], gray.iter().map(|v| v * scale).collect())
                .map_err(PipelineError::Core)?;
        return Ok(DumpSet {
            input: tensor_to_image(&frame448)?,
            masked: tensor_to_image(&masked)?,
            delta: tensor_to_image(&delta_tensor)?,
        });
    }
    unreachable!("target frame existence checked above");
}

/// Build the run setup's weights: load a container when a path is given,
/// otherwise generate seeded weights (quantized detector plus scorer).
pub fn resolve_weights(
    weights_path: Option<&Path>,
    config: &NetworkConfig,
    seed: u64,
) -> Result<(NetworkWeights, Option<MGNetParams>)> {
    match weights_path {
        Some(path) => {
            let container = crate::weights::Container::load(path)?;
            let detector = crate::weights::unpack_detector(&container, config)?;
            let mgnet = if container.names().any(|n| n.starts_with("mgnet.")) {
                Some(crate::weights::unpack_mgnet(&container)?)
            } else {
                None
            };
            Ok((detector, mgnet))
        }
        None => {
            let detector =
                NetworkWeights::seeded_quant(config, seed).map_err(PipelineError::Core)?;
            let mgnet = MGNetParams::seeded(
                seed.wrapping_add(1),
                config.input_size / 2,
                REGION_SIZE,
                192,
                3,
            );
            Ok((detector, Some(mgnet)))
        }
    }
}
