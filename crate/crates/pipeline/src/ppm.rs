//! Binary PPM (P6) and PGM (P5) images with maxval 255. The only pixel
//! formats the pipeline reads or writes; they are codec-free and bit-exact.

use std::fs;
use std::path::Path;

use sdnn_core::Tensor;

use crate::error::{PipelineError, Result};

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(PipelineError::Invalid(format!(
                "images carry 1 or 3 channels, not {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(PipelineError::Invalid(format!(
                "{}x{}x{channels} image needs {} bytes, got {}",
                width,
                height,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }
}

fn parse(bytes: &[u8], path: &Path) -> Result<Image> {
    let fail = |message: String| PipelineError::Format {
        what: "netpbm image",
        path: path.to_path_buf(),
        message,
    };
    let mut header = HeaderParser::new(bytes);
    let magic = header.token().ok_or_else(|| fail("missing magic".into()))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(fail(format!(
                "unsupported magic {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut number = |what: &str| -> Result<usize> {
        let tok = header.token().ok_or_else(|| fail(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(format!("invalid {what}: {:?}", String::from_utf8_lossy(tok))))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(fail(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(fail(format!("degenerate dimensions {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = header.pos + 1;
    let need = width * height * channels;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| fail(format!("raster truncated: need {need} bytes")))?;
    Image::new(width, height, channels, raster.to_vec())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    parse(&bytes, path)
}

/// Width and height from the header without decoding the raster.
pub fn read_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let image = parse(&bytes, path)?;
    Ok((image.width, image.height))
}

pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode(image)).map_err(|e| PipelineError::io(path, e))
}

/// Planar [C,H,W] f32 tensor with values in 0..255.
pub fn image_to_tensor(image: &Image) -> Tensor<f32> {
    let (c, h, w) = (image.channels, image.height, image.width);
    let mut data = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = image.data[(y * w + x) * c + ch] as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("sized by construction")
}

/// Back to interleaved bytes; values round half-to-even and clamp to 0..255.
pub fn tensor_to_image(tensor: &Tensor<f32>) -> Result<Image> {
    let [c, h, w] = match *tensor.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(PipelineError::Invalid(format!(
                "image tensors are [C,H,W], got {:?}",
                tensor.shape()
            )))
        }
    };
    let mut data = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = tensor.data()[(ch * h + y) * w + x];
                data[(y * w + x) * c + ch] = v.round_ties_even().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(w, h, c, data)
}
