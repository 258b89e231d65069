//! SDNNW1 weights container.
//!
//! Layout: magic bytes `SDNNW1\0`, then per tensor: name length (u32 LE),
//! UTF-8 name, dtype byte (0 = f32, 1 = i8, 2 = i32), ndim (u32 LE), dims
//! (u32 LE each), then the raw little-endian payload. One container holds
//! the detector, MGNet and quantization scales, separated by name prefix
//! (`det.` / `mgnet.`).

use std::fs;
use std::path::Path;

use sdnn_core::masking::{
    AttentionParams, LayerNormParams, LinearParams, MGNetParams, TransformerBlockParams,
};
use sdnn_core::network::{
    LayerWeightsF32, LayerWeightsQuant, NetworkConfig, NetworkWeights,
};
use sdnn_core::tensor::QuantParams;
use sdnn_core::Tensor;

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 7] = b"SDNNW1\0";

/// A named tensor of any supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::I8(t) => t.shape(),
            TensorData::I32(t) => t.shape(),
        }
    }

    fn dtype_byte(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I8(_) => 1,
            TensorData::I32(_) => 2,
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, TensorData)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: TensorData) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype_byte());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            match tensor {
                TensorData::F32(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::I8(t) => {
                    for v in t.data() {
                        out.push(*v as u8);
                    }
                }
                TensorData::I32(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| PipelineError::Format {
            what: "weights container",
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("bad magic; expected SDNNW1".into()));
        }
        let mut pos = MAGIC.len();
        let mut entries = Vec::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| fail(format!("truncated at byte {pos:?}", pos = *pos)))?;
            *pos += n;
            Ok(slice)
        };
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not UTF-8".into()))?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let tensor = match dtype {
                0 => {
                    let raw = take(&mut pos, count * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorData::F32(Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))?)
                }
                1 => {
                    let raw = take(&mut pos, count)?;
                    let data = raw.iter().map(|&b| b as i8).collect();
                    TensorData::I8(Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))?)
                }
                2 => {
                    let raw = take(&mut pos, count * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorData::I32(Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))?)
                }
                other => return Err(fail(format!("unknown dtype byte {other} for {name}"))),
            };
            entries.push((name, tensor));
        }
        Ok(Container { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| PipelineError::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Detector weights <-> container
// ---------------------------------------------------------------------------

fn require<'a>(container: &'a Container, name: &str) -> Result<&'a TensorData> {
    container
        .get(name)
        .ok_or_else(|| PipelineError::Invalid(format!("weights container is missing {name}")))
}

fn require_f32(container: &Container, name: &str) -> Result<Tensor<f32>> {
    match require(container, name)? {
        TensorData::F32(t) => Ok(t.clone()),
        other => Err(PipelineError::Invalid(format!(
            "{name} must be f32, found dtype {:?}",
            other.dtype_byte()
        ))),
    }
}

fn require_scalar(container: &Container, name: &str) -> Result<f32> {
    let t = require_f32(container, name)?;
    if t.len() != 1 {
        return Err(PipelineError::Invalid(format!("{name} must hold one value")));
    }
    Ok(t.data()[0])
}

/// Store quantized detector weights under the `det.` prefix.
pub fn pack_detector(container: &mut Container, weights: &NetworkWeights) {
    match weights {
        NetworkWeights::Quant {
            layers,
            input,
            head_dequant,
        } => {
            container.push(
                "det.input_scale",
                TensorData::F32(Tensor::from_vec(&[1], vec![input.scale]).unwrap()),
            );
            container.push(
                "det.head_dequant",
                TensorData::F32(Tensor::from_vec(&[1], vec![*head_dequant]).unwrap()),
            );
            for (i, lw) in layers.iter().enumerate() {
                container.push(format!("det.layer{i}.weight"), TensorData::I8(lw.weight.clone()));
                container.push(format!("det.layer{i}.bias"), TensorData::I32(lw.bias.clone()));
                container.push(
                    format!("det.layer{i}.out_scale"),
                    TensorData::F32(Tensor::from_vec(&[1], vec![lw.requant as f32]).unwrap()),
                );
            }
        }
        NetworkWeights::F32(layers) => {
            for (i, lw) in layers.iter().enumerate() {
                container.push(format!("det.layer{i}.weight"), TensorData::F32(lw.weight.clone()));
                container.push(format!("det.layer{i}.bias"), TensorData::F32(lw.bias.clone()));
            }
        }
    }
}

/// Load detector weights matching the config. The container decides the
/// execution path: i8 layer weights mean the quantized path.
pub fn unpack_detector(container: &Container, config: &NetworkConfig) -> Result<NetworkWeights> {
    let quantized = matches!(require(container, "det.layer0.weight")?, TensorData::I8(_));
    let weights = if quantized {
        let mut layers = Vec::with_capacity(config.layers.len());
        for i in 0..config.layers.len() {
            let weight = match require(container, &format!("det.layer{i}.weight"))? {
                TensorData::I8(t) => t.clone(),
                _ => {
                    return Err(PipelineError::Invalid(format!(
                        "det.layer{i}.weight must be i8 on the quantized path"
                    )))
                }
            };
            let bias = match require(container, &format!("det.layer{i}.bias"))? {
                TensorData::I32(t) => t.clone(),
                _ => {
                    return Err(PipelineError::Invalid(format!(
                        "det.layer{i}.bias must be i32 on the quantized path"
                    )))
                }
            };
            let requant = require_scalar(container, &format!("det.layer{i}.out_scale"))? as f64;
            layers.push(LayerWeightsQuant {
                weight,
                bias,
                requant,
            });
        }
        NetworkWeights::Quant {
            layers,
            input: QuantParams::new(require_scalar(container, "det.input_scale")?)
                .map_err(PipelineError::Core)?,
            head_dequant: require_scalar(container, "det.head_dequant")?,
        }
    } else {
        let mut layers = Vec::with_capacity(config.layers.len());
        for i in 0..config.layers.len() {
            layers.push(LayerWeightsF32 {
                weight: require_f32(container, &format!("det.layer{i}.weight"))?,
                bias: require_f32(container, &format!("det.layer{i}.bias"))?,
            });
        }
        NetworkWeights::F32(layers)
    };
    weights.validate(config).map_err(PipelineError::Core)?;
    Ok(weights)
}

// ---------------------------------------------------------------------------
// MGNet weights <-> container
// ---------------------------------------------------------------------------

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn pack_linear(container: &mut Container, prefix: &str, lin: &LinearParams) {
    let (w, b) = linear_names(prefix);
    container.push(w, TensorData::F32(lin.weight.clone()));
    container.push(b, TensorData::F32(lin.bias.clone()));
}

fn unpack_linear(container: &Container, prefix: &str) -> Result<LinearParams> {
    let (w, b) = linear_names(prefix);
    Ok(LinearParams {
        weight: require_f32(container, &w)?,
        bias: require_f32(container, &b)?,
    })
}

fn pack_norm(container: &mut Container, prefix: &str, norm: &LayerNormParams) {
    container.push(format!("{prefix}.gamma"), TensorData::F32(norm.gamma.clone()));
    container.push(format!("{prefix}.beta"), TensorData::F32(norm.beta.clone()));
}

fn unpack_norm(container: &Container, prefix: &str) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gamma: require_f32(container, &format!("{prefix}.gamma"))?,
        beta: require_f32(container, &format!("{prefix}.beta"))?,
    })
}

/// Store MGNet parameters under the `mgnet.` prefix.
pub fn pack_mgnet(container: &mut Container, params: &MGNetParams) {
    let meta = vec![
        params.patch_size as f32,
        params.embed_dim as f32,
        params.block.attn.heads as f32,
    ];
    container.push(
        "mgnet.meta",
        TensorData::F32(Tensor::from_vec(&[3], meta).unwrap()),
    );
    pack_linear(container, "mgnet.patch_embed", &params.patch_embed);
    container.push("mgnet.cls_token", TensorData::F32(params.cls_token.clone()));
    container.push("mgnet.pos_embed", TensorData::F32(params.pos_embed.clone()));
    pack_norm(container, "mgnet.block.norm1", &params.block.norm1);
    pack_linear(container, "mgnet.block.attn.query", &params.block.attn.query);
    pack_linear(container, "mgnet.block.attn.key", &params.block.attn.key);
    pack_linear(container, "mgnet.block.attn.value", &params.block.attn.value);
    pack_linear(container, "mgnet.block.attn.proj", &params.block.attn.proj);
    pack_norm(container, "mgnet.block.norm2", &params.block.norm2);
    pack_linear(container, "mgnet.block.mlp_fc1", &params.block.mlp_fc1);
    pack_linear(container, "mgnet.block.mlp_fc2", &params.block.mlp_fc2);
    pack_norm(container, "mgnet.final_norm", &params.final_norm);
    pack_linear(container, "mgnet.scorer_query", &params.scorer_query);
    pack_linear(container, "mgnet.scorer_key", &params.scorer_key);
    pack_linear(container, "mgnet.head", &params.head);
}

pub fn unpack_mgnet(container: &Container) -> Result<MGNetParams> {
    let meta = require_f32(container, "mgnet.meta")?;
    if meta.len() != 3 {
        return Err(PipelineError::Invalid("mgnet.meta must hold 3 values".into()));
    }
    Ok(MGNetParams {
        patch_size: meta.data()[0] as usize,
        embed_dim: meta.data()[1] as usize,
        patch_embed: unpack_linear(container, "mgnet.patch_embed")?,
        cls_token: require_f32(container, "mgnet.cls_token")?,
        pos_embed: require_f32(container, "mgnet.pos_embed")?,
        block: TransformerBlockParams {
            norm1: unpack_norm(container, "mgnet.block.norm1")?,
            attn: AttentionParams {
                query: unpack_linear(container, "mgnet.block.attn.query")?,
                key: unpack_linear(container, "mgnet.block.attn.key")?,
                value: unpack_linear(container, "mgnet.block.attn.value")?,
                proj: unpack_linear(container, "mgnet.block.attn.proj")?,
                heads: meta.data()[2] as usize,
            },
            norm2: unpack_norm(container, "mgnet.block.norm2")?,
            mlp_fc1: unpack_linear(container, "mgnet.block.mlp_fc1")?,
            mlp_fc2: unpack_linear(container, "mgnet.block.mlp_fc2")?,
        },
        final_norm: unpack_norm(container, "mgnet.final_norm")?,
        scorer_query: unpack_linear(container, "mgnet.scorer_query")?,
        scorer_key: unpack_linear(container, "mgnet.scorer_key")?,
        head: unpack_linear(container, "mgnet.head")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_container_bytes() {
        // One i8 tensor "w" with shape [2, 1] and values [3, -2].
        let mut container = Container::new();
        container.push(
            "w",
            TensorData::I8(Tensor::from_vec(&[2, 1], vec![3i8, -2]).unwrap()),
        );
        let bytes = container.encode();
        let want: Vec<u8> = vec![
            b'S', b'D', b'N', b'N', b'W', b'1', 0, // magic
            1, 0, 0, 0, // name length
            b'w', // name
            1,    // dtype i8
            2, 0, 0, 0, // ndim
            2, 0, 0, 0, // dim 0
            1, 0, 0, 0, // dim 1
            3, 0xFE, // payload: 3, -2
        ];
        assert_eq!(bytes, want);
        let back = Container::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, container);
    }

    #[test]
    fn rejects_corrupt_containers() {
        assert!(Container::decode(b"NOPE", Path::new("mem")).is_err());
        let mut container = Container::new();
        container.push(
            "x",
            TensorData::F32(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()),
        );
        let mut bytes = container.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(Container::decode(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn detector_round_trip() {
        let config = NetworkConfig::from_json(
            r#"{
                "input": 32,
                "layers": [
                    {"kind":"conv","cin":3,"cout":21,"k":3,"stride":2,"pad":1,"act":"relu","theta":0}
                ],
                "head": {"anchors":[[8,8],[16,16],[24,24]], "classes":2}
            }"#,
        )
        .unwrap();
        let weights = NetworkWeights::seeded_quant(&config, 5).unwrap();
        let mut container = Container::new();
        pack_detector(&mut container, &weights);
        let bytes = container.encode();
        let back = Container::decode(&bytes, Path::new("mem")).unwrap();
        let restored = unpack_detector(&back, &config).unwrap();
        match (&weights, &restored) {
            (
                NetworkWeights::Quant { layers: a, .. },
                NetworkWeights::Quant { layers: b, .. },
            ) => {
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.weight, y.weight);
                    assert_eq!(x.bias, y.bias);
                    assert!((x.requant - y.requant).abs() < 1e-9);
                }
            }
            _ => panic!("expected quantized weights"),
        }
    }

    #[test]
    fn mgnet_round_trip() {
        let params = MGNetParams::seeded(11, 32, 8, 8, 2);
        let mut container = Container::new();
        pack_mgnet(&mut container, &params);
        let back = Container::decode(&container.encode(), Path::new("mem")).unwrap();
        let restored = unpack_mgnet(&back).unwrap();
        assert_eq!(restored, params);
    }
}
