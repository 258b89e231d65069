//! Static-mask artifact: a P5 grid image (0 = skip, 255 = keep) with a JSON
//! sidecar recording the region size, keep rate and source manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sdnn_core::masking::RegionMask;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::ppm::{read_image, write_image, Image};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskSidecar {
    pub p: usize,
    pub k_s: f64,
    pub source_manifest: String,
}

fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("json")
}

pub fn save_static_mask(
    path: &Path,
    mask: &RegionMask,
    keep_rate: f64,
    source_manifest: &str,
) -> Result<()> {
    let data: Vec<u8> = mask.grid().iter().map(|&k| if k { 255 } else { 0 }).collect();
    let image = Image::new(mask.cols(), mask.rows(), 1, data)?;
    write_image(path, &image)?;
    let sidecar = MaskSidecar {
        p: mask.region_size(),
        k_s: keep_rate,
        source_manifest: source_manifest.to_string(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(sidecar_path(path), text + "\n").map_err(|e| PipelineError::io(sidecar_path(path), e))
}

pub fn load_static_mask(path: &Path) -> Result<(RegionMask, MaskSidecar)> {
    let image = read_image(path)?;
    if image.channels != 1 {
        return Err(PipelineError::Format {
            what: "static mask",
            path: path.to_path_buf(),
            message: "mask artifacts are single-channel P5".into(),
        });
    }
    let sidecar_file = sidecar_path(path);
    let text =
        fs::read_to_string(&sidecar_file).map_err(|e| PipelineError::io(&sidecar_file, e))?;
    let sidecar: MaskSidecar = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        what: "mask sidecar",
        path: sidecar_file.clone(),
        message: e.to_string(),
    })?;
    let grid = image
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(PipelineError::Format {
                what: "static mask",
                path: path.to_path_buf(),
                message: format!("mask pixels must be 0 or 255, found {other}"),
            }),
        })
        .collect::<Result<Vec<bool>>>()?;
    let mask = RegionMask::new(image.height, image.width, sidecar.p, grid)
        .map_err(PipelineError::Core)?;
    Ok((mask, sidecar))
}
