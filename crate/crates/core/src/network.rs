//! Detector graph: layer specs, dense forward passes (f32 and quantized
//! integer), conversion to an event-driven sigma-delta network, YOLO-style
//! detection decoding and MAC accounting.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sigma_delta::{
    DeltaState, DenseTransform, EventFrame, LayerFrameStats, SigmaDeltaLayer, SigmaState, Signal,
};
use crate::tensor::{conv2d_f32, conv2d_i32, quantize, requantize, QuantParams, Tensor};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

/// One layer of the detector.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(rename = "cin")]
    pub in_channels: usize,
    #[serde(rename = "cout")]
    pub out_channels: usize,
    #[serde(rename = "k")]
    pub kernel: usize,
    pub stride: usize,
    #[serde(rename = "pad")]
    pub padding: usize,
    #[serde(rename = "act")]
    pub activation: Activation,
    #[serde(rename = "theta", default)]
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct HeadSpec {
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
}

impl HeadSpec {
    pub fn channels(&self) -> usize {
        self.anchors.len() * (5 + self.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct NetworkConfig {
    #[serde(rename = "input")]
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let mut channels = 3usize;
        let mut extent = self.input_size;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != channels {
                return Err(Error::Config(format!(
                    "layer {i} expects {} input channels, previous layer provides {channels}",
                    layer.in_channels
                )));
            }
            if !matches!(layer.stride, 1 | 2) {
                return Err(Error::Config(format!("layer {i}: stride must be 1 or 2")));
            }
            if !matches!(layer.kernel, 1 | 3) {
                return Err(Error::Config(format!("layer {i}: kernel must be 1 or 3")));
            }
            if matches!(layer.kind, LayerKind::Linear) && layer.kernel != 1 {
                return Err(Error::Config(format!("layer {i}: linear layers use kernel 1")));
            }
            if layer.threshold < 0.0 {
                return Err(Error::Config(format!("layer {i}: threshold must be nonnegative")));
            }
            match layer.kind {
                LayerKind::Conv => {
                    let padded = extent + 2 * layer.padding;
                    if padded < layer.kernel {
                        return Err(Error::Config(format!("layer {i}: kernel does not fit input")));
                    }
                    extent = (padded - layer.kernel) / layer.stride + 1;
                }
                LayerKind::Linear => {
                    if extent != 1 {
                        return Err(Error::Config(format!(
                            "layer {i}: linear layers require 1x1 spatial input, have {extent}x{extent}"
                        )));
                    }
                }
            }
            channels = layer.out_channels;
        }
        if self.head.anchors.is_empty() || self.head.classes == 0 {
            return Err(Error::Config("head needs at least one anchor and one class".into()));
        }
        if channels != self.head.channels() {
            return Err(Error::Config(format!(
                "final layer provides {channels} channels but the head needs anchors*(5+classes) = {}",
                self.head.channels()
            )));
        }
        let strides: usize = self.layers.iter().map(|l| l.stride).product();
        if !self.input_size.is_multiple_of(strides) || self.input_size / strides != extent {
            return Err(Error::Config(format!(
                "stride product {strides} does not divide input {} into grid {extent}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Output grid edge: input size divided by the stride product.
    pub fn grid_size(&self) -> usize {
        let strides: usize = self.layers.iter().map(|l| l.stride).product();
        self.input_size / strides
    }

    /// Per-layer output spatial extents.
    pub fn layer_extents(&self) -> Vec<usize> {
        let mut extent = self.input_size;
        self.layers
            .iter()
            .map(|l| {
                if matches!(l.kind, LayerKind::Conv) {
                    extent = (extent + 2 * l.padding - l.kernel) / l.stride + 1;
                }
                extent
            })
            .collect()
    }

    /// Dense multiply-accumulates per layer: k^2 * C_in * C_out * H_out * W_out.
    pub fn layer_dense_macs(&self) -> Vec<u64> {
        let extents = self.layer_extents();
        self.layers
            .iter()
            .zip(&extents)
            .map(|(l, &e)| {
                let spatial = match l.kind {
                    LayerKind::Conv => (e * e) as u64,
                    LayerKind::Linear => 1,
                };
                (l.kernel * l.kernel) as u64 * l.in_channels as u64 * l.out_channels as u64 * spatial
            })
            .collect()
    }

    pub fn total_dense_macs(&self) -> u64 {
        self.layer_dense_macs().iter().sum()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("network config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Default single-head detector: ten 3x3/1x1 convolutions, the first five
    /// at stride 2, on a 448 canvas (grid 14). Anchor priors follow the
    /// Tiny-YOLOv3 coarse head rescaled from 416 to 448.
    pub fn yolo_kp(classes: usize) -> Self {
        let conv = |cin, cout, k, stride, pad| LayerSpec {
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
            activation: Activation::Relu,
            threshold: 0.0,
        };
        let head_channels = 3 * (5 + classes);
        let mut layers = vec![
            conv(3, 16, 3, 2, 1),
            conv(16, 32, 3, 2, 1),
            conv(32, 64, 3, 2, 1),
            conv(64, 128, 3, 2, 1),
            conv(128, 256, 3, 2, 1),
            conv(256, 512, 3, 1, 1),
            conv(512, 512, 3, 1, 1),
            conv(512, 256, 1, 1, 0),
            conv(256, 512, 3, 1, 1),
            conv(512, head_channels, 1, 1, 0),
        ];
        let last = layers.last_mut().unwrap();
        last.activation = Activation::None;
        NetworkConfig {
            input_size: 448,
            layers,
            head: HeadSpec {
                anchors: vec![(87.0, 88.0), (145.0, 182.0), (370.0, 344.0)],
                classes,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// f32 weights for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeightsF32 {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

/// Quantized weights for one layer. `requant` maps the i32 accumulator back
/// onto the i8 activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeightsQuant {
    pub weight: Tensor<i8>,
    pub bias: Tensor<i32>,
    pub requant: f64,
}

#[derive(Clone, Debug)]
pub enum NetworkWeights {
    F32(Vec<LayerWeightsF32>),
    Quant {
        layers: Vec<LayerWeightsQuant>,
        /// Scale that quantizes the f32 input frame.
        input: QuantParams,
        /// Scale that maps head integers back to real-valued logits.
        head_dequant: f32,
    },
}

fn weight_shape(layer: &LayerSpec) -> Vec<usize> {
    match layer.kind {
        LayerKind::Conv => vec![layer.out_channels, layer.in_channels, layer.kernel, layer.kernel],
        LayerKind::Linear => vec![layer.out_channels, layer.in_channels, 1, 1],
    }
}

impl NetworkWeights {
    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        let check = |i: usize, got: &[usize], bias_len: usize| -> Result<()> {
            let want = weight_shape(&config.layers[i]);
            if got != want.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} weights {got:?}, config wants {want:?}"
                )));
            }
            if bias_len != config.layers[i].out_channels {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} bias has {bias_len} entries, config wants {}",
                    config.layers[i].out_channels
                )));
            }
            Ok(())
        };
        match self {
            NetworkWeights::F32(layers) => {
                if layers.len() != config.layers.len() {
                    return Err(Error::Config(format!(
                        "{} weight sets for {} layers",
                        layers.len(),
                        config.layers.len()
                    )));
                }
                for (i, lw) in layers.iter().enumerate() {
                    check(i, lw.weight.shape(), lw.bias.len())?;
                }
            }
            NetworkWeights::Quant { layers, .. } => {
                if layers.len() != config.layers.len() {
                    return Err(Error::Config(format!(
                        "{} weight sets for {} layers",
                        layers.len(),
                        config.layers.len()
                    )));
                }
                for (i, lw) in layers.iter().enumerate() {
                    check(i, lw.weight.shape(), lw.bias.len())?;
                    if !lw.requant.is_finite() || lw.requant <= 0.0 {
                        return Err(Error::Config(format!(
                            "layer {i}: requant multiplier must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Deterministic random integer weights. Requant multipliers are
    /// calibrated on a seeded probe frame so activations span the i8 range
    /// without saturating.
    pub fn seeded_quant(config: &NetworkConfig, seed: u64) -> Result<NetworkWeights> {
        let mut rng = Rng::new(seed);
        let input = QuantParams::new(2.0)?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let shape = weight_shape(spec);
            let n: usize = shape.iter().product();
            let weight = Tensor::from_vec(
                &shape,
                (0..n).map(|_| rng.int_in(-24, 24) as i8).collect(),
            )?;
            let bias = Tensor::from_vec(
                &[spec.out_channels],
                (0..spec.out_channels).map(|_| rng.int_in(-64, 64) as i32).collect(),
            )?;
            layers.push(LayerWeightsQuant {
                weight,
                bias,
                requant: 1.0, // calibrated below
            });
        }

        // Probe with a seeded random frame, layer by layer, choosing each
        // requant multiplier so the largest accumulator maps near 96.
        let mut probe_rng = Rng::new(seed ^ 0x5eed_cafe);
        let frame = Tensor::from_vec(
            &[3, config.input_size, config.input_size],
            (0..3 * config.input_size * config.input_size)
                .map(|_| probe_rng.uniform_in(0.0, 255.0) as f32)
                .collect(),
        )?;
        let mut acts: Tensor<i32> = quantize(&frame, input).map(|v| v as i32);
        for (spec, lw) in config.layers.iter().zip(layers.iter_mut()) {
            let acc = conv2d_i32(&acts, &lw.weight, Some(&lw.bias), spec.stride, spec.padding)?;
            let peak = acc.data().iter().map(|v| v.unsigned_abs()).max().unwrap_or(1).max(1);
            // Round through f32 so the multiplier survives container storage.
            lw.requant = (96.0 / peak as f64) as f32 as f64;
            let scaled = requantize(&acc, lw.requant);
            acts = match spec.activation {
                Activation::Relu => scaled.relu(),
                Activation::None => scaled,
            };
        }
        let head_dequant = 0.125f32;
        Ok(NetworkWeights::Quant {
            layers,
            input,
            head_dequant,
        })
    }

    /// Deterministic random f32 weights scaled by fan-in.
    pub fn seeded_f32(config: &NetworkConfig, seed: u64) -> Result<NetworkWeights> {
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let shape = weight_shape(spec);
            let n: usize = shape.iter().product();
            let fan_in = (spec.kernel * spec.kernel * spec.in_channels) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weight = Tensor::from_vec(
                &shape,
                (0..n).map(|_| (rng.normal() * std) as f32).collect(),
            )?;
            let bias = Tensor::from_vec(
                &[spec.out_channels],
                (0..spec.out_channels).map(|_| rng.uniform_in(-0.1, 0.1) as f32).collect(),
            )?;
            layers.push(LayerWeightsF32 { weight, bias });
        }
        Ok(NetworkWeights::F32(layers))
    }
}

// ---------------------------------------------------------------------------
// Dense forward passes
// ---------------------------------------------------------------------------

/// Head output of a forward pass or an event-driven step.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    F32(Tensor<f32>),
    /// Integer head values plus the scale recovering real logits.
    Quant(Tensor<i32>, f32),
}

impl HeadOutput {
    /// Real-valued logits regardless of the execution path.
    pub fn logits(&self) -> Tensor<f32> {
        match self {
            HeadOutput::F32(t) => t.clone(),
            HeadOutput::Quant(t, scale) => t.map(|v| v as f32 * scale),
        }
    }
}

/// Dense reference forward pass.
pub fn ann_forward(
    config: &NetworkConfig,
    weights: &NetworkWeights,
    frame: &Tensor<f32>,
) -> Result<HeadOutput> {
    weights.validate(config)?;
    let expect = [3, config.input_size, config.input_size];
    if frame.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "frame {:?} does not match configured input {expect:?}",
            frame.shape()
        )));
    }
    match weights {
        NetworkWeights::F32(layers) => {
            let mut x = frame.clone();
            for (spec, lw) in config.layers.iter().zip(layers) {
                let acc = conv2d_f32(&x, &lw.weight, Some(&lw.bias), spec.stride, spec.padding)?;
                x = match spec.activation {
                    Activation::Relu => acc.relu(),
                    Activation::None => acc,
                };
            }
            Ok(HeadOutput::F32(x))
        }
        NetworkWeights::Quant {
            layers,
            input,
            head_dequant,
        } => {
            let mut x: Tensor<i32> = quantize(frame, *input).map(|v| v as i32);
            for (spec, lw) in config.layers.iter().zip(layers) {
                let acc = conv2d_i32(&x, &lw.weight, Some(&lw.bias), spec.stride, spec.padding)?;
                let scaled = requantize(&acc, lw.requant);
                x = match spec.activation {
                    Activation::Relu => scaled.relu(),
                    Activation::None => scaled,
                };
            }
            Ok(HeadOutput::Quant(x, *head_dequant))
        }
    }
}

// ---------------------------------------------------------------------------
// Event-driven network
// ---------------------------------------------------------------------------

/// Count, for every spatial position of a conv input, how many output
/// positions its value feeds (times the output channel count). Sparse events
/// incur exactly this many synaptic operations.
fn conv_fanout_table(
    in_extent: usize,
    out_extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_channels: usize,
) -> Vec<u64> {
    let mut per_axis = vec![0u64; in_extent];
    for (pos, count) in per_axis.iter_mut().enumerate() {
        let lo_num = pos as i64 + padding as i64 + 1 - kernel as i64;
        let lo = if lo_num <= 0 {
            0
        } else {
            (lo_num + stride as i64 - 1) / stride as i64
        };
        let hi = ((pos as i64 + padding as i64) / stride as i64).min(out_extent as i64 - 1);
        *count = (hi - lo.max(0) + 1).max(0) as u64;
    }
    let mut table = vec![0u64; in_extent * in_extent];
    for y in 0..in_extent {
        for x in 0..in_extent {
            table[y * in_extent + x] = per_axis[y] * per_axis[x] * out_channels as u64;
        }
    }
    table
}

/// Conv layer wrapped for event-driven execution on the integer path.
pub struct QuantConvTransform {
    weight: Tensor<i8>,
    bias: Tensor<i32>,
    requant: f64,
    activation: Activation,
    stride: usize,
    padding: usize,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    fanout: Vec<u64>,
}

impl DenseTransform<i32> for QuantConvTransform {
    fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn linear(&self, input: &Tensor<i32>) -> Result<Tensor<i32>> {
        conv2d_i32(input, &self.weight, None, self.stride, self.padding)
    }
    fn bias_activation(&self, pre: &Tensor<i32>) -> Result<Tensor<i32>> {
        let spatial = self.out_shape[1] * self.out_shape[2];
        let mut with_bias = pre.clone();
        for (i, v) in with_bias.data_mut().iter_mut().enumerate() {
            let b = self.bias.data()[i / spatial];
            *v = v.checked_add(b).ok_or_else(|| {
                Error::Overflow("bias addition left the i32 range".into())
            })?;
        }
        let scaled = requantize(&with_bias, self.requant);
        Ok(match self.activation {
            Activation::Relu => scaled.relu(),
            Activation::None => scaled,
        })
    }
    fn synops(&self, events: &EventFrame<i32>) -> u64 {
        let spatial = self.in_shape[1] * self.in_shape[2];
        let mut total = 0u64;
        for (i, &v) in events.values().data().iter().enumerate() {
            if v != 0 {
                total += self.fanout[i % spatial];
            }
        }
        total
    }
}

/// Conv layer wrapped for event-driven execution on the f32 path.
pub struct F32ConvTransform {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    activation: Activation,
    stride: usize,
    padding: usize,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    fanout: Vec<u64>,
}

impl DenseTransform<f32> for F32ConvTransform {
    fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }
    fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }
    fn linear(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        conv2d_f32(input, &self.weight, None, self.stride, self.padding)
    }
    fn bias_activation(&self, pre: &Tensor<f32>) -> Result<Tensor<f32>> {
        let spatial = self.out_shape[1] * self.out_shape[2];
        let mut with_bias = pre.clone();
        for (i, v) in with_bias.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i / spatial];
        }
        Ok(match self.activation {
            Activation::Relu => with_bias.relu(),
            Activation::None => with_bias,
        })
    }
    fn synops(&self, events: &EventFrame<f32>) -> u64 {
        let spatial = self.in_shape[1] * self.in_shape[2];
        let mut total = 0u64;
        for (i, &v) in events.values().data().iter().enumerate() {
            if v != 0.0 {
                total += self.fanout[i % spatial];
            }
        }
        total
    }
}

/// Per-layer event accounting for one frame, input encoder included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerStats {
    pub name: String,
    pub neurons: u64,
    pub events_in: u64,
    pub events_out: u64,
    pub synops: u64,
    pub dense_macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub layers: Vec<LayerStats>,
}

struct SdnnPath<T: Signal, D: DenseTransform<T>> {
    encoder: DeltaState<T>,
    layers: Vec<(String, SigmaDeltaLayer<T, D>)>,
    head_sigma: SigmaState<T>,
    layer_dense_macs: Vec<u64>,
    input_neurons: u64,
}

impl<T: Signal, D: DenseTransform<T>> SdnnPath<T, D> {
    fn reset(&mut self) {
        self.encoder.reset();
        for (_, layer) in &mut self.layers {
            layer.reset();
        }
        self.head_sigma.reset();
    }

    fn step_events(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, FrameStats)> {
        let mut stats = FrameStats::default();
        let events = self.encoder.encode(input)?;
        stats.layers.push(LayerStats {
            name: "input".into(),
            neurons: self.input_neurons,
            events_in: 0,
            events_out: events.nonzero_count() as u64,
            synops: 0,
            dense_macs: 0,
        });
        let mut events = events;
        for (i, (name, layer)) in self.layers.iter_mut().enumerate() {
            let neurons = layer.transform().output_shape().iter().product::<usize>() as u64;
            let (next, frame_stats) = layer.step(&events)?;
            let LayerFrameStats {
                events_in,
                events_out,
                synops,
            } = frame_stats;
            stats.layers.push(LayerStats {
                name: name.clone(),
                neurons,
                events_in,
                events_out,
                synops,
                dense_macs: self.layer_dense_macs[i],
            });
            events = next;
        }
        let estimate = self.head_sigma.decode(&events)?.clone();
        Ok((estimate, stats))
    }
}

/// Event-driven form of the detector. Integer instances mirror the quantized
/// dense pass bit-exactly when every threshold is zero.
pub struct Sdnn {
    inner: SdnnInner,
}

enum SdnnInner {
    F32(SdnnPath<f32, F32ConvTransform>),
    Quant {
        path: SdnnPath<i32, QuantConvTransform>,
        input: QuantParams,
        head_dequant: f32,
    },
}

fn layer_shapes(config: &NetworkConfig) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut extent = config.input_size;
    let mut channels = 3usize;
    config
        .layers
        .iter()
        .map(|l| {
            let in_shape = vec![channels, extent, extent];
            if matches!(l.kind, LayerKind::Conv) {
                extent = (extent + 2 * l.padding - l.kernel) / l.stride + 1;
            }
            channels = l.out_channels;
            (in_shape, vec![channels, extent, extent])
        })
        .collect()
}

/// Wrap every layer of the detector in a sigma-delta pair. Thresholds come
/// from the config (optionally overridden), integer paths round them to the
/// nearest integer step.
pub fn convert_to_sdnn(
    config: &NetworkConfig,
    weights: &NetworkWeights,
    threshold_override: Option<f64>,
) -> Result<Sdnn> {
    weights.validate(config)?;
    let shapes = layer_shapes(config);
    let macs = config.layer_dense_macs();
    let input_shape = vec![3, config.input_size, config.input_size];
    let input_neurons = input_shape.iter().product::<usize>() as u64;
    let threshold_of = |spec: &LayerSpec| threshold_override.unwrap_or(spec.threshold);

    match weights {
        NetworkWeights::F32(layer_weights) => {
            let mut layers = Vec::new();
            for (i, ((spec, lw), (in_shape, out_shape))) in config
                .layers
                .iter()
                .zip(layer_weights)
                .zip(&shapes)
                .enumerate()
            {
                let fanout = conv_fanout_table(
                    in_shape[1],
                    out_shape[1],
                    spec.kernel,
                    spec.stride,
                    spec.padding,
                    spec.out_channels,
                );
                let transform = F32ConvTransform {
                    weight: lw.weight.clone(),
                    bias: lw.bias.clone(),
                    activation: spec.activation,
                    stride: spec.stride,
                    padding: spec.padding,
                    in_shape: in_shape.clone(),
                    out_shape: out_shape.clone(),
                    fanout,
                };
                layers.push((
                    format!("conv{}", i + 1),
                    SigmaDeltaLayer::new(transform, threshold_of(spec) as f32)?,
                ));
            }
            let head_shape = shapes.last().unwrap().1.clone();
            Ok(Sdnn {
                inner: SdnnInner::F32(SdnnPath {
                    encoder: DeltaState::new(&input_shape, 0.0)?,
                    layers,
                    head_sigma: SigmaState::new(&head_shape),
                    layer_dense_macs: macs,
                    input_neurons,
                }),
            })
        }
        NetworkWeights::Quant {
            layers: layer_weights,
            input,
            head_dequant,
        } => {
            let mut layers = Vec::new();
            for (i, ((spec, lw), (in_shape, out_shape))) in config
                .layers
                .iter()
                .zip(layer_weights)
                .zip(&shapes)
                .enumerate()
            {
                let fanout = conv_fanout_table(
                    in_shape[1],
                    out_shape[1],
                    spec.kernel,
                    spec.stride,
                    spec.padding,
                    spec.out_channels,
                );
                let transform = QuantConvTransform {
                    weight: lw.weight.clone(),
                    bias: lw.bias.clone(),
                    requant: lw.requant,
                    activation: spec.activation,
                    stride: spec.stride,
                    padding: spec.padding,
                    in_shape: in_shape.clone(),
                    out_shape: out_shape.clone(),
                    fanout,
                };
                let threshold = threshold_of(spec).round() as i32;
                layers.push((
                    format!("conv{}", i + 1),
                    SigmaDeltaLayer::new(transform, threshold)?,
                ));
            }
            let head_shape = shapes.last().unwrap().1.clone();
            Ok(Sdnn {
                inner: SdnnInner::Quant {
                    path: SdnnPath {
                        encoder: DeltaState::new(&input_shape, 0)?,
                        layers,
                        head_sigma: SigmaState::new(&head_shape),
                        layer_dense_macs: macs,
                        input_neurons,
                    },
                    input: *input,
                    head_dequant: *head_dequant,
                },
            })
        }
    }
}

impl Sdnn {
    /// Reset all reference and estimate memories; the next frame of a new
    /// sequence is transmitted in full.
    pub fn reset(&mut self) {
        match &mut self.inner {
            SdnnInner::F32(path) => path.reset(),
            SdnnInner::Quant { path, .. } => path.reset(),
        }
    }

    /// Delta-encode the frame, propagate events layer by layer, and return
    /// the sigma-decoded head estimate with per-layer event statistics.
    pub fn step(&mut self, frame: &Tensor<f32>) -> Result<(HeadOutput, FrameStats)> {
        match &mut self.inner {
            SdnnInner::F32(path) => {
                let (estimate, stats) = path.step_events(frame)?;
                Ok((HeadOutput::F32(estimate), stats))
            }
            SdnnInner::Quant {
                path,
                input,
                head_dequant,
            } => {
                let quantized: Tensor<i32> = quantize(frame, *input).map(|v| v as i32);
                let (estimate, stats) = path.step_events(&quantized)?;
                Ok((HeadOutput::Quant(estimate, *head_dequant), stats))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Detection decoding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f32,
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode a YOLO-style head: box center (cell + sigmoid(tx, ty)) * stride,
/// size anchor * exp(tw, th), confidence sigmoid(obj) * sigmoid(class).
/// Greedy per-class NMS drops boxes at IoU >= `nms_iou` against a kept box.
pub fn decode_detections(
    head: &Tensor<f32>,
    config: &NetworkConfig,
    conf_thresh: f32,
    nms_iou: f32,
) -> Result<Vec<Detection>> {
    let grid = config.grid_size();
    let anchors = &config.head.anchors;
    let classes = config.head.classes;
    let per_anchor = 5 + classes;
    let expect = [anchors.len() * per_anchor, grid, grid];
    if head.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "head tensor {:?} does not match decode layout {expect:?}",
            head.shape()
        )));
    }
    let stride = (config.input_size / grid) as f32;
    let cells = grid * grid;
    let at = |ch: usize, gy: usize, gx: usize| head.data()[ch * cells + gy * grid + gx];

    let mut raw: Vec<Detection> = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let base = a * per_anchor;
        for gy in 0..grid {
            for gx in 0..grid {
                let tx = at(base, gy, gx);
                let ty = at(base + 1, gy, gx);
                let tw = at(base + 2, gy, gx).clamp(-16.0, 16.0);
                let th = at(base + 3, gy, gx).clamp(-16.0, 16.0);
                let obj = sigmoid32(at(base + 4, gy, gx));
                if obj < conf_thresh {
                    // even a perfect class score cannot pass the threshold
                    continue;
                }
                let cx = (gx as f32 + sigmoid32(tx)) * stride;
                let cy = (gy as f32 + sigmoid32(ty)) * stride;
                let w = aw as f32 * tw.exp();
                let h = ah as f32 * th.exp();
                let bbox = BoundingBox {
                    x1: cx - w / 2.0,
                    y1: cy - h / 2.0,
                    x2: cx + w / 2.0,
                    y2: cy + h / 2.0,
                };
                for c in 0..classes {
                    let confidence = obj * sigmoid32(at(base + 5 + c, gy, gx));
                    if confidence >= conf_thresh {
                        raw.push(Detection {
                            bbox,
                            class_id: c,
                            confidence,
                        });
                    }
                }
            }
        }
    }

    // Greedy per-class NMS; stable sort keeps insertion order on ties.
    let mut kept: Vec<Detection> = Vec::new();
    for c in 0..classes {
        let mut class_dets: Vec<Detection> =
            raw.iter().filter(|d| d.class_id == c).copied().collect();
        class_dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let mut chosen: Vec<Detection> = Vec::new();
        'candidates: for det in class_dets {
            for kept_det in &chosen {
                if det.bbox.iou(&kept_det.bbox) >= nms_iou {
                    continue 'candidates;
                }
            }
            chosen.push(det);
        }
        kept.extend(chosen);
    }
    Ok(kept)
}
