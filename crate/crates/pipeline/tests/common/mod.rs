//! Shared fixtures: deterministic synthetic video sequences written as PPM
//! frames plus a JSONL manifest, and a small detector config.

#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sdnn_core::network::NetworkConfig;
use sdnn_core::rng::Rng;
use sdnn_pipeline::ppm::{write_image, Image};

/// Fresh directory under the cargo tmp root.
pub fn fresh_dir(tag: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(tag);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A 64-input three-layer detector: mask grid 4x4, head grid 16.
pub fn toy_config() -> NetworkConfig {
    NetworkConfig::from_json(
        r#"{
            "input": 64,
            "layers": [
                {"kind":"conv","cin":3,"cout":8,"k":3,"stride":2,"pad":1,"act":"relu","theta":0},
                {"kind":"conv","cin":8,"cout":8,"k":3,"stride":2,"pad":1,"act":"relu","theta":0},
                {"kind":"conv","cin":8,"cout":18,"k":1,"stride":1,"pad":0,"act":"none","theta":0}
            ],
            "head": {"anchors":[[10,10],[20,20],[36,36]], "classes":1}
        }"#,
    )
    .unwrap()
}

/// One frame of the synthetic scene: a drifting bright square over a slowly
/// shifting gradient, so every frame changes everywhere but with structure.
pub fn synthetic_frame(width: usize, height: usize, seq_seed: u64, t: usize) -> Image {
    let mut data = vec![0u8; width * height * 3];
    let mut rng = Rng::new(seq_seed);
    let speed = 1 + rng.below(3);
    let square = 8 + rng.below(8);
    let sx = (rng.below(width.saturating_sub(square).max(1)) + t * speed) % (width - square);
    let sy = (rng.below(height.saturating_sub(square).max(1)) + t) % (height - square);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            let drift = (x + y + 3 * t) % 97;
            data[base] = (40 + drift) as u8;
            data[base + 1] = (30 + (x + 2 * t) % 83) as u8;
            data[base + 2] = (20 + (y + t) % 71) as u8;
            if x >= sx && x < sx + square && y >= sy && y < sy + square {
                data[base] = 230;
                data[base + 1] = 220;
                data[base + 2] = 90;
            }
        }
    }
    Image::new(width, height, 3, data).unwrap()
}

/// Box roughly around the synthetic square at time t (original coordinates).
pub fn synthetic_box(width: usize, height: usize, seq_seed: u64, t: usize) -> [f64; 5] {
    let mut rng = Rng::new(seq_seed);
    let speed = 1 + rng.below(3);
    let square = 8 + rng.below(8);
    let sx = (rng.below(width.saturating_sub(square).max(1)) + t * speed) % (width - square);
    let sy = (rng.below(height.saturating_sub(square).max(1)) + t) % (height - square);
    [sx as f64, sy as f64, (sx + square) as f64, (sy + square) as f64, 0.0]
}

pub struct FixtureSpec {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub width: usize,
    pub height: usize,
    pub train_frames: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            sequences: 2,
            frames_per_sequence: 5,
            width: 72,
            height: 48,
            train_frames: 4,
        }
    }
}

/// Write frames and a manifest; returns the manifest path. The first
/// `train_frames` of sequence zero are labeled train, the rest val.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> PathBuf {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).unwrap();
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).unwrap();
    for seq in 0..spec.sequences {
        let seq_seed = 1000 + seq as u64;
        for t in 0..spec.frames_per_sequence {
            let image = synthetic_frame(spec.width, spec.height, seq_seed, t);
            let name = format!("seq{seq}_{t:03}.ppm");
            write_image(&frames_dir.join(&name), &image).unwrap();
            let b = synthetic_box(spec.width, spec.height, seq_seed, t);
            let split = if seq == 0 && t < spec.train_frames {
                "train"
            } else {
                "val"
            };
            writeln!(
                manifest,
                r#"{{"seq_id":"seq{seq}","frame_index":{t},"image_path":"frames/{name}","split":"{split}","boxes":[[{},{},{},{},{}]]}}"#,
                b[0], b[1], b[2], b[3], b[4] as usize
            )
            .unwrap();
        }
    }
    manifest_path
}
