//! JSON-Lines dataset manifest.
//!
//! One record per frame: `{"seq_id": "...", "frame_index": 0, "image_path":
//! "frames/000.ppm", "split": "train", "boxes": [[x1,y1,x2,y2,class_id],...]}`.
//! Boxes use original pixel coordinates. Frames group by sequence in order of
//! first appearance; frame indices must strictly increase within a sequence.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sdnn_core::masking::Rect;
use serde::Deserialize;

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, Deserialize)]
struct RawRecord {
    seq_id: String,
    frame_index: u64,
    image_path: String,
    split: Split,
    #[serde(default)]
    boxes: Vec<[f64; 5]>,
}

/// An annotated box in original image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnotatedBox {
    pub rect: Rect,
    pub class_id: usize,
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub image_path: PathBuf,
    pub split: Split,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

/// Parse and group a manifest. Image paths resolve relative to the manifest's
/// directory. Malformed lines and frame-order violations fail with the line
/// number.
pub fn ingest(path: &Path) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<FrameRecord>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let boxes = raw
            .boxes
            .iter()
            .map(|b| {
                let class = b[4];
                if class < 0.0 || class.fract() != 0.0 {
                    return Err(PipelineError::Manifest {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("class id {class} is not a nonnegative integer"),
                    });
                }
                Ok(AnnotatedBox {
                    rect: Rect::new(b[0], b[1], b[2], b[3]),
                    class_id: class as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = FrameRecord {
            frame_index: raw.frame_index,
            image_path: base.join(&raw.image_path),
            split: raw.split,
            boxes,
        };
        let frames = groups.entry(raw.seq_id.clone()).or_insert_with(|| {
            order.push(raw.seq_id.clone());
            Vec::new()
        });
        if let Some(last) = frames.last() {
            if record.frame_index <= last.frame_index {
                return Err(PipelineError::Manifest {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!(
                        "sequence {}: frame_index {} does not increase past {}",
                        raw.seq_id, record.frame_index, last.frame_index
                    ),
                });
            }
        }
        frames.push(record);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let frames = groups.remove(&id).unwrap();
            Sequence { id, frames }
        })
        .collect())
}

/// Keep only frames of the given split; sequences left empty are dropped.
pub fn filter_split(sequences: Vec<Sequence>, split: Split) -> Vec<Sequence> {
    sequences
        .into_iter()
        .filter_map(|seq| {
            let frames: Vec<FrameRecord> =
                seq.frames.into_iter().filter(|f| f.split == split).collect();
            if frames.is_empty() {
                None
            } else {
                Some(Sequence { id: seq.id, frames })
            }
        })
        .collect()
}
