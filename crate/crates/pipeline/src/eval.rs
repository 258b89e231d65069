//! Standalone evaluators: mask quality (mIoU) without running the detector,
//! and detection quality (mAP@0.5) from a detections file.

use std::collections::HashMap;
use std::path::Path;

use sdnn_core::masking::{apply_mask, region_labels, Rect, REGION_SIZE};
use sdnn_core::metrics::{self, GtBox};
use sdnn_core::network::{BoundingBox, Detection};
use sdnn_core::tensor::letterbox;

use crate::error::{PipelineError, Result};
use crate::manifest::Sequence;
use crate::ppm::{image_to_tensor, read_dimensions, read_image};
use crate::report::read_detections;
use crate::run::{frame_mask_for, RunSetup};

/// Mean IoU of the applied mask against ground-truth region labels, over all
/// frames that carry at least one box. `None` when no frame has boxes.
pub fn evaluate_miou(setup: &RunSetup, sequences: &[Sequence]) -> Result<Option<f64>> {
    setup.validate()?;
    let grid = setup.mask_grid();
    let mut pairs = Vec::new();
    for sequence in sequences {
        for frame in &sequence.frames {
            if frame.boxes.is_empty() {
                continue;
            }
            let image = read_image(&frame.image_path)?;
            let raw = image_to_tensor(&image);
            let (frame448, tf) =
                letterbox(&raw, setup.config.input_size, 0.0).map_err(PipelineError::Core)?;
            let mask = frame_mask_for(setup, &frame448)?;
            // The mask is what reaches the detector; sanity-apply it so shape
            // mismatches surface here rather than mid-run.
            apply_mask(&frame448, &mask).map_err(PipelineError::Core)?;
            let rects: Vec<Rect> = frame.boxes.iter().map(|b| b.rect).collect();
            let labels = region_labels(&rects, grid, grid, REGION_SIZE, &tf);
            pairs.push((mask, labels));
        }
    }
    metrics::miou(&pairs).map_err(PipelineError::Core)
}

/// mAP@0.5 of a detections file against manifest ground truth. Ground-truth
/// boxes map onto the canvas through each frame's letterbox transform, which
/// needs the stored image headers.
pub fn evaluate_map(
    detections_path: &Path,
    sequences: &[Sequence],
    input_size: usize,
) -> Result<Option<f64>> {
    let records = read_detections(detections_path)?;
    let mut by_key: HashMap<(String, u64), Vec<Detection>> = HashMap::new();
    for record in records {
        let detections = record
            .boxes
            .iter()
            .map(|b| Detection {
                bbox: BoundingBox {
                    x1: b[0] as f32,
                    y1: b[1] as f32,
                    x2: b[2] as f32,
                    y2: b[3] as f32,
                },
                class_id: b[4] as usize,
                confidence: b[5] as f32,
            })
            .collect();
        by_key.insert((record.seq_id.clone(), record.frame_index), detections);
    }
    let mut det_frames = Vec::new();
    let mut gt_frames = Vec::new();
    for sequence in sequences {
        for frame in &sequence.frames {
            let (w, h) = read_dimensions(&frame.image_path)?;
            let (tf, _, _) = sdnn_core::tensor::letterbox_transform(h, w, input_size)
                .map_err(PipelineError::Core)?;
            gt_frames.push(
                frame
                    .boxes
                    .iter()
                    .map(|b| {
                        let r = b.rect.transformed(&tf);
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
                    .collect(),
            );
            det_frames.push(
                by_key
                    .remove(&(sequence.id.clone(), frame.frame_index))
                    .unwrap_or_default(),
            );
        }
    }
    metrics::map50(&det_frames, &gt_frames).map_err(PipelineError::Core)
}
