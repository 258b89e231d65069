//! Run outputs: `summary.json`, `layers.csv` and `detections.jsonl`.
//!
//! All numeric fields serialize at full precision so downstream checks (for
//! example EDP = energy x latency) reproduce bit-exactly from the files.

use std::fs;
use std::path::Path;

use sdnn_core::metrics::{CostReport, RunActivity};
use sdnn_core::network::Detection;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// The headline numbers of one run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub mask_mode: String,
    pub frame_sparsity: f64,
    pub energy_mj: f64,
    pub latency_ms: f64,
    pub throughput_fps: f64,
    pub edp_ujs: f64,
    pub gops_per_watt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

impl Summary {
    pub fn from_cost(
        mask_mode: &str,
        cost: &CostReport,
        map50: Option<f64>,
        miou: Option<f64>,
    ) -> Self {
        Summary {
            mask_mode: mask_mode.to_string(),
            frame_sparsity: cost.frame_sparsity,
            energy_mj: cost.energy_mj,
            latency_ms: cost.latency_ms,
            throughput_fps: cost.throughput_fps,
            edp_ujs: cost.edp_ujs,
            gops_per_watt: cost.gops_per_watt,
            map50,
            miou,
        }
    }
}

pub fn summary_json(summary: &Summary) -> String {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    text
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    fs::write(path, summary_json(summary)).map_err(|e| PipelineError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        what: "summary",
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// CSV with header `layer,neurons,events,synops,event_rate,dense_macs`.
/// `events` and `synops` are totals over the run; `event_rate` is the mean
/// events per neuron per frame; `dense_macs` counts one frame.
pub fn layers_csv(activity: &RunActivity) -> String {
    let mut out = String::from("layer,neurons,events,synops,event_rate,dense_macs\n");
    for layer in &activity.layers {
        let rate = if activity.frames == 0 || layer.neurons == 0 {
            String::from("")
        } else {
            format!(
                "{:.6}",
                layer.events as f64 / (layer.neurons as f64 * activity.frames as f64)
            )
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            layer.name, layer.neurons, layer.events, layer.synops, rate, layer.dense_macs
        ));
    }
    out
}

pub fn write_layers_csv(path: &Path, activity: &RunActivity) -> Result<()> {
    fs::write(path, layers_csv(activity)).map_err(|e| PipelineError::io(path, e))
}

/// Rebuild run activity from a layers.csv plus the frame count (which the
/// CSV does not carry). Used by the calibration workflow.
pub fn read_layers_csv(path: &Path, frames: u64) -> Result<RunActivity> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "layer,neurons,events,synops,event_rate,dense_macs" {
        return Err(PipelineError::Format {
            what: "layers csv",
            path: path.to_path_buf(),
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut layers = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(PipelineError::Manifest {
                path: path.to_path_buf(),
                line: idx + 2,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse = |field: &str, what: &str| -> Result<u64> {
            field.parse().map_err(|_| PipelineError::Manifest {
                path: path.to_path_buf(),
                line: idx + 2,
                message: format!("invalid {what}: {field:?}"),
            })
        };
        layers.push(sdnn_core::metrics::LayerActivity {
            name: fields[0].to_string(),
            neurons: parse(fields[1], "neuron count")?,
            events: parse(fields[2], "event count")?,
            synops: parse(fields[3], "synop count")?,
            dense_macs: parse(fields[5], "mac count")?,
        });
    }
    Ok(RunActivity { layers, frames })
}

/// One detections record per frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub seq_id: String,
    pub frame_index: u64,
    /// [x1, y1, x2, y2, class_id, confidence] on the 448 canvas.
    pub boxes: Vec<[f64; 6]>,
}

impl DetectionRecord {
    pub fn from_detections(seq_id: &str, frame_index: u64, detections: &[Detection]) -> Self {
        DetectionRecord {
            seq_id: seq_id.to_string(),
            frame_index,
            boxes: detections
                .iter()
                .map(|d| {
                    [
                        d.bbox.x1 as f64,
                        d.bbox.y1 as f64,
                        d.bbox.x2 as f64,
                        d.bbox.y2 as f64,
                        d.class_id as f64,
                        d.confidence as f64,
                    ]
                })
                .collect(),
        }
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| PipelineError::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| PipelineError::Manifest {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
