//! The descriptor network.
//!
//! Three stages map a range image to a 1-D global descriptor:
//!
//! 1. a stack of convolutions with circular horizontal padding that
//!    collapses the image height to 1 while preserving the width, keeping
//!    every layer output exactly column-shift equivariant;
//! 2. cascaded channel and spatial attention that re-weights the feature
//!    map, damping content (such as movable objects) that would otherwise
//!    dominate;
//! 3. soft-assignment aggregation over the width columns followed by a
//!    linear map, which is invariant to any column permutation and
//!    therefore to sensor yaw.
//!
//! Swapping the circular padding for zero padding breaks the equivariance
//! and serves as the negative control throughout the tests.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rangeimage::{circular_pad_widths, RangeImage};
use crate::tensor::{
    read_checkpoint_file, write_checkpoint_file, Graph, HorizontalPad, Pad1d, PadMode, PoolKind,
    Real, Tensor, TensorError, Var,
};

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    Schedule { layer: usize, detail: String },
    Input { expected: String, actual: String },
    Tensor(TensorError),
    Checkpoint(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "model config: {msg}"),
            ModelError::Schedule { layer, detail } => {
                write!(f, "layer {layer} does not fit the input: {detail}")
            }
            ModelError::Input { expected, actual } => {
                write!(f, "input mismatch: expected {expected}, got {actual}")
            }
            ModelError::Tensor(e) => write!(f, "tensor op failed: {e}"),
            ModelError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Horizontal padding flavor for every convolution in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadKind {
    Circular,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub stride_h: usize,
    pub vertical_pad: usize,
}

/// Convolution-stack schedule. The product of vertical strides must equal
/// the input height so the output height is exactly 1; horizontal strides
/// are all 1 so the width is preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct CcmConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub pad_kind: PadKind,
}

impl CcmConfig {
    /// Output heights after each layer; errors name the offending layer.
    pub fn height_trace(&self) -> Result<Vec<usize>, ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Config("schedule has no layers".to_string()));
        }
        let mut h = self.input_height;
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.stride_h == 0 || layer.out_channels == 0 || layer.kernel_h == 0 || layer.kernel_w == 0 {
                return Err(ModelError::Schedule {
                    layer: i,
                    detail: "kernel, stride, and channels must be positive".to_string(),
                });
            }
            let padded = h + 2 * layer.vertical_pad;
            if layer.kernel_h > padded {
                return Err(ModelError::Schedule {
                    layer: i,
                    detail: format!("kernel height {} exceeds padded height {padded}", layer.kernel_h),
                });
            }
            h = (padded - layer.kernel_h) / layer.stride_h + 1;
            trace.push(h);
        }
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let stride_product: usize = self.layers.iter().map(|l| l.stride_h).product();
        if stride_product != self.input_height {
            return Err(ModelError::Config(format!(
                "vertical stride product {stride_product} must equal input height {}",
                self.input_height
            )));
        }
        let trace = self.height_trace()?;
        if *trace.last().expect("non-empty trace") != 1 {
            return Err(ModelError::Config(format!(
                "schedule must collapse height to 1, trace ends at {}",
                trace.last().expect("non-empty trace")
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RtmConfig {
    /// Channel-attention 1-D kernel size, odd.
    pub channel_kernel: usize,
    /// Spatial-attention 1 x k kernel size, odd.
    pub spatial_kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Soft-assignment cluster count.
    pub clusters: usize,
    pub descriptor_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub ccm: CcmConfig,
    pub rtm: RtmConfig,
    pub head: HeadConfig,
    /// Multiplier applied to range pixels before the first convolution,
    /// keeping activations near unit scale regardless of sensor range.
    pub input_scale: f64,
    pub seed: u64,
}

fn stride2(kernel: usize, channels: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        kernel_h: kernel,
        kernel_w: kernel,
        out_channels: channels,
        stride_h: 2,
        vertical_pad: kernel / 2,
    }
}

fn wide(channels: usize) -> ConvLayerSpec {
    ConvLayerSpec { kernel_h: 1, kernel_w: 3, out_channels: channels, stride_h: 1, vertical_pad: 0 }
}

impl ModelConfig {
    /// Smallest test profile: 16 x 90 images, narrow channels.
    pub fn tiny(seed: u64) -> Self {
        Self {
            ccm: CcmConfig {
                input_height: 16,
                input_width: 90,
                layers: vec![
                    stride2(5, 4),
                    stride2(3, 4),
                    stride2(3, 8),
                    stride2(3, 8),
                    wide(16),
                    wide(16),
                ],
                pad_kind: PadKind::Circular,
            },
            rtm: RtmConfig { channel_kernel: 3, spatial_kernel: 7 },
            head: HeadConfig { clusters: 8, descriptor_dim: 64 },
            input_scale: 0.05,
            seed,
        }
    }

    /// Desk profile used for the synthetic-world training runs.
    pub fn desk(seed: u64) -> Self {
        Self {
            ccm: CcmConfig {
                input_height: 16,
                input_width: 90,
                layers: vec![
                    stride2(5, 16),
                    stride2(3, 16),
                    stride2(3, 32),
                    stride2(3, 32),
                    wide(64),
                    wide(64),
                ],
                pad_kind: PadKind::Circular,
            },
            rtm: RtmConfig { channel_kernel: 3, spatial_kernel: 7 },
            head: HeadConfig { clusters: 32, descriptor_dim: 128 },
            input_scale: 0.02,
            seed,
        }
    }

    /// Full-size profile: 64 x 900 images, one 5x5 stride-2 layer, five 3x3
    /// stride-2 layers, three 1x3 layers, 64 clusters, 256-d descriptor.
    pub fn full(seed: u64) -> Self {
        Self {
            ccm: CcmConfig {
                input_height: 64,
                input_width: 900,
                layers: vec![
                    stride2(5, 16),
                    stride2(3, 16),
                    stride2(3, 32),
                    stride2(3, 32),
                    stride2(3, 64),
                    stride2(3, 64),
                    wide(128),
                    wide(128),
                    wide(128),
                ],
                pad_kind: PadKind::Circular,
            },
            rtm: RtmConfig { channel_kernel: 3, spatial_kernel: 7 },
            head: HeadConfig { clusters: 64, descriptor_dim: 256 },
            input_scale: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.ccm.validate()?;
        if self.rtm.channel_kernel % 2 == 0 || self.rtm.spatial_kernel % 2 == 0 {
            return Err(ModelError::Config("attention kernel sizes must be odd".to_string()));
        }
        if self.head.clusters < 2 {
            return Err(ModelError::Config("cluster count must be at least 2".to_string()));
        }
        if self.head.descriptor_dim < 1 {
            return Err(ModelError::Config("descriptor dimension must be positive".to_string()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(ModelError::Config("input scale must be positive".to_string()));
        }
        if self.ccm.output_channels() < self.rtm.channel_kernel {
            return Err(ModelError::Config(format!(
                "channel attention kernel {} exceeds channel count {}",
                self.rtm.channel_kernel,
                self.ccm.output_channels()
            )));
        }
        Ok(())
    }

    pub fn vlad_dim(&self) -> usize {
        self.head.clusters * self.ccm.output_channels()
    }
}

// ── Weights ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerWeights<E> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<E> {
    pub ccm: Vec<ConvLayerWeights<E>>,
    pub channel_kernel: Tensor<E>,
    pub channel_bias: Tensor<E>,
    pub spatial_kernel: Tensor<E>,
    pub spatial_bias: Tensor<E>,
    pub vlad_centers: Tensor<E>,
    pub vlad_assign: Tensor<E>,
    pub head_weight: Tensor<E>,
    pub head_bias: Tensor<E>,
}

struct InitRng(ChaCha8Rng);

impl InitRng {
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Symmetric uniform in [-limit, limit].
    fn glorot(&mut self, limit: f64) -> f64 {
        (self.uniform() * 2.0 - 1.0) * limit
    }

    fn normal(&mut self) -> f64 {
        // Box-Muller; u1 kept away from 0.
        let u1 = self.uniform().max(1e-12);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl<E: Real> ModelWeights<E> {
    /// Deterministic initialization from the config seed: uniform
    /// Glorot-style bounds for convolutions and the linear head, zero
    /// biases, and unit Gaussians scaled by 1/sqrt(C) for the cluster
    /// centers and assignment weights.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = InitRng(ChaCha8Rng::seed_from_u64(config.seed));
        let mut ccm = Vec::with_capacity(config.ccm.layers.len());
        let mut c_in = 1usize;
        for layer in &config.ccm.layers {
            let fan_in = c_in * layer.kernel_h * layer.kernel_w;
            let fan_out = layer.out_channels * layer.kernel_h * layer.kernel_w;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let count = layer.out_channels * fan_in;
            let data: Vec<f64> = (0..count).map(|_| rng.glorot(limit)).collect();
            ccm.push(ConvLayerWeights {
                kernel: Tensor::from_f64(
                    vec![layer.out_channels, c_in, layer.kernel_h, layer.kernel_w],
                    &data,
                )?,
                bias: Tensor::zeros(vec![layer.out_channels])?,
            });
            c_in = layer.out_channels;
        }
        let channels = config.ccm.output_channels();

        let kc = config.rtm.channel_kernel;
        let limit = (6.0 / (kc + kc) as f64).sqrt();
        let ca: Vec<f64> = (0..kc).map(|_| rng.glorot(limit)).collect();

        let ks = config.rtm.spatial_kernel;
        let limit = (6.0 / (2 * ks + ks) as f64).sqrt();
        let sa: Vec<f64> = (0..2 * ks).map(|_| rng.glorot(limit)).collect();

        let scale = 1.0 / (channels as f64).sqrt();
        let k = config.head.clusters;
        let centers: Vec<f64> = (0..k * channels).map(|_| rng.normal() * scale).collect();
        let assign: Vec<f64> = (0..k * channels).map(|_| rng.normal() * scale).collect();

        let vlad_dim = config.vlad_dim();
        let d = config.head.descriptor_dim;
        let limit = (6.0 / (vlad_dim + d) as f64).sqrt();
        let head: Vec<f64> = (0..d * vlad_dim).map(|_| rng.glorot(limit)).collect();

        Ok(Self {
            ccm,
            channel_kernel: Tensor::from_f64(vec![1, 1, kc], &ca)?,
            channel_bias: Tensor::zeros(vec![1])?,
            spatial_kernel: Tensor::from_f64(vec![1, 2, 1, ks], &sa)?,
            spatial_bias: Tensor::zeros(vec![1])?,
            vlad_centers: Tensor::from_f64(vec![k, channels], &centers)?,
            vlad_assign: Tensor::from_f64(vec![k, channels], &assign)?,
            head_weight: Tensor::from_f64(vec![d, vlad_dim], &head)?,
            head_bias: Tensor::zeros(vec![d])?,
        })
    }

    /// Parameters in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, layer) in self.ccm.iter().enumerate() {
            out.push((format!("ccm.{i}.kernel"), &layer.kernel));
            out.push((format!("ccm.{i}.bias"), &layer.bias));
        }
        out.push(("rtm.channel.kernel".to_string(), &self.channel_kernel));
        out.push(("rtm.channel.bias".to_string(), &self.channel_bias));
        out.push(("rtm.spatial.kernel".to_string(), &self.spatial_kernel));
        out.push(("rtm.spatial.bias".to_string(), &self.spatial_bias));
        out.push(("vlad.centers".to_string(), &self.vlad_centers));
        out.push(("vlad.assign".to_string(), &self.vlad_assign));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (i, layer) in self.ccm.iter_mut().enumerate() {
            out.push((format!("ccm.{i}.kernel"), &mut layer.kernel));
            out.push((format!("ccm.{i}.bias"), &mut layer.bias));
        }
        out.push(("rtm.channel.kernel".to_string(), &mut self.channel_kernel));
        out.push(("rtm.channel.bias".to_string(), &mut self.channel_bias));
        out.push(("rtm.spatial.kernel".to_string(), &mut self.spatial_kernel));
        out.push(("rtm.spatial.bias".to_string(), &mut self.spatial_bias));
        out.push(("vlad.centers".to_string(), &mut self.vlad_centers));
        out.push(("vlad.assign".to_string(), &mut self.vlad_assign));
        out.push(("head.weight".to_string(), &mut self.head_weight));
        out.push(("head.bias".to_string(), &mut self.head_bias));
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        write_checkpoint_file(path, &self.named())
    }

    /// Loads a checkpoint into the shape dictated by `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        let params = read_checkpoint_file::<E>(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut weights = Self::init(config)?;
        let mut expected: Vec<(String, &mut Tensor<E>)> = weights.named_mut();
        if params.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, file has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, tensor), (want_name, slot)) in params.into_iter().zip(expected.iter_mut()) {
            if &name != want_name {
                return Err(ModelError::Checkpoint(format!(
                    "parameter order mismatch: expected {want_name}, found {name}"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?} does not match config shape {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            **slot = tensor;
        }
        Ok(weights)
    }
}

/// Graph handles for one registration of the weights.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub ccm: Vec<(Var, Var)>,
    pub channel: (Var, Var),
    pub spatial: (Var, Var),
    pub vlad_centers: Var,
    pub vlad_assign: Var,
    pub head: (Var, Var),
}

impl ModelVars {
    pub fn register<E: Real>(g: &mut Graph<E>, weights: &ModelWeights<E>, trainable: bool) -> Self {
        let ccm = weights
            .ccm
            .iter()
            .map(|l| (g.leaf(l.kernel.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
            .collect();
        Self {
            ccm,
            channel: (
                g.leaf(weights.channel_kernel.clone(), trainable),
                g.leaf(weights.channel_bias.clone(), trainable),
            ),
            spatial: (
                g.leaf(weights.spatial_kernel.clone(), trainable),
                g.leaf(weights.spatial_bias.clone(), trainable),
            ),
            vlad_centers: g.leaf(weights.vlad_centers.clone(), trainable),
            vlad_assign: g.leaf(weights.vlad_assign.clone(), trainable),
            head: (
                g.leaf(weights.head_weight.clone(), trainable),
                g.leaf(weights.head_bias.clone(), trainable),
            ),
        }
    }

    /// Vars in the same order as [`ModelWeights::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(k, b) in &self.ccm {
            out.push(k);
            out.push(b);
        }
        out.extend([
            self.channel.0,
            self.channel.1,
            self.spatial.0,
            self.spatial.1,
            self.vlad_centers,
            self.vlad_assign,
            self.head.0,
            self.head.1,
        ]);
        out
    }
}

fn horizontal_pad(kind: PadKind, kernel_w: usize, width: usize) -> HorizontalPad {
    let (left, right) = circular_pad_widths(kernel_w, 1, width);
    match kind {
        PadKind::Circular => HorizontalPad::Circular { left, right },
        // The control mode pads the same amounts with zeros.
        PadKind::Zero => HorizontalPad::Zero(left.max(right)),
    }
}

/// Converts a range image to a `[1, h, w]` network input, applying the
/// configured input scale.
pub fn image_to_tensor<E: Real>(image: &RangeImage, scale: f64) -> Tensor<E> {
    let data: Vec<E> =
        image.pixels().iter().map(|&p| E::from_f64(p as f64 * scale)).collect();
    Tensor::new(vec![1, image.height(), image.width()], data).expect("pixel buffer matches shape")
}

/// Runs the convolution stack, returning every layer output. Each layer is
/// convolution, per-channel bias, ReLU.
pub fn ccm_forward_layers<E: Real>(
    g: &mut Graph<E>,
    input: Var,
    config: &CcmConfig,
    vars: &ModelVars,
) -> Result<Vec<Var>, ModelError> {
    config.validate()?;
    let shape = g.value(input).shape().to_vec();
    if shape != [1, config.input_height, config.input_width] {
        return Err(ModelError::Input {
            expected: format!("[1x{}x{}]", config.input_height, config.input_width),
            actual: format!("{shape:?}"),
        });
    }
    let mut x = input;
    let mut outputs = Vec::with_capacity(config.layers.len());
    for (i, (layer, &(kernel, bias))) in config.layers.iter().zip(&vars.ccm).enumerate() {
        let pad = PadMode::new(layer.vertical_pad, horizontal_pad(config.pad_kind, layer.kernel_w, config.input_width));
        let conv = g
            .conv2d(x, kernel, (layer.stride_h, 1), pad)
            .map_err(|e| ModelError::Schedule { layer: i, detail: e.to_string() })?;
        let (c, h, w) = {
            let s = g.value(conv).shape();
            (s[0], s[1], s[2])
        };
        let flat = g.reshape(conv, vec![c, h * w])?;
        let biased = g.add_rows(flat, bias)?;
        let activated = g.relu(biased);
        x = g.reshape(activated, vec![c, h, w])?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Feature map of the full convolution stack, shaped `[C, 1, W]`.
pub fn ccm_forward<E: Real>(
    g: &mut Graph<E>,
    input: Var,
    config: &CcmConfig,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let outputs = ccm_forward_layers(g, input, config, vars)?;
    Ok(*outputs.last().expect("validated schedule is non-empty"))
}

/// Per-channel attention weights in (0, 1): spatial average pooling, a 1-D
/// convolution across channels with circular padding, and a sigmoid.
/// Pooling removes position, so the result is invariant to column shifts.
pub fn channel_attention<E: Real>(
    g: &mut Graph<E>,
    feature: Var,
    config: &RtmConfig,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let channels = g.value(feature).shape()[0];
    if channels < config.channel_kernel {
        return Err(ModelError::Input {
            expected: format!("at least {} channels", config.channel_kernel),
            actual: format!("{channels}"),
        });
    }
    let pooled = g.pool(feature, PoolKind::Mean, &[1, 2])?;
    let row = g.reshape(pooled, vec![1, channels])?;
    let conv = g.conv1d(row, vars.channel.0, Pad1d::Circular)?;
    let biased = g.add_rows(conv, vars.channel.1)?;
    let weights = g.sigmoid(biased);
    Ok(g.reshape(weights, vec![channels])?)
}

/// Per-position attention weights in (0, 1): channel mean and max stacked
/// into two rows, a 1 x k convolution with circular horizontal padding,
/// and a sigmoid.
pub fn spatial_attention<E: Real>(
    g: &mut Graph<E>,
    feature: Var,
    config: &RtmConfig,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let (channels, width) = {
        let s = g.value(feature).shape();
        (s[0], s[2])
    };
    let flat = g.reshape(feature, vec![channels, width])?;
    let mean = g.pool(flat, PoolKind::Mean, &[0])?;
    let max = g.pool(flat, PoolKind::Max, &[0])?;
    let mean_row = g.reshape(mean, vec![1, width])?;
    let max_row = g.reshape(max, vec![1, width])?;
    let stacked = g.concat(&[mean_row, max_row], 0)?;
    let as_map = g.reshape(stacked, vec![2, 1, width])?;
    let pad = PadMode::new(0, horizontal_pad(PadKind::Circular, config.spatial_kernel, width));
    let conv = g.conv2d(as_map, vars.spatial.0, (1, 1), pad)?;
    let row = g.reshape(conv, vec![1, width])?;
    let biased = g.add_rows(row, vars.spatial.1)?;
    let weights = g.sigmoid(biased);
    Ok(g.reshape(weights, vec![width])?)
}

/// Cascaded re-weighting: channel attention first, spatial attention on the
/// intermediate result. Output shape equals input shape.
pub fn rtm_forward<E: Real>(
    g: &mut Graph<E>,
    feature: Var,
    config: &RtmConfig,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let (channels, width) = {
        let s = g.value(feature).shape();
        (s[0], s[2])
    };
    let channel_weights = channel_attention(g, feature, config, vars)?;
    let flat = g.reshape(feature, vec![channels, width])?;
    let after_channel = g.scale_rows(flat, channel_weights)?;
    let intermediate = g.reshape(after_channel, vec![channels, 1, width])?;
    let spatial_weights = spatial_attention(g, intermediate, config, vars)?;
    let after_both = {
        let flat = g.reshape(intermediate, vec![channels, width])?;
        g.scale_cols(flat, spatial_weights)?
    };
    Ok(g.reshape(after_both, vec![channels, 1, width])?)
}

/// Soft-assignment aggregation over the W columns: each column is a local
/// feature, softmax-assigned to learned clusters; residuals against the
/// cluster centers are accumulated, normalized per cluster, then globally.
/// Any permutation of columns leaves the result unchanged up to summation
/// order.
pub fn netvlad<E: Real>(
    g: &mut Graph<E>,
    feature: Var,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let (channels, width) = {
        let s = g.value(feature).shape();
        (s[0], s[2])
    };
    let clusters = g.value(vars.vlad_centers).shape()[0];
    let x = g.reshape(feature, vec![channels, width])?;
    let logits = g.matmul(vars.vlad_assign, x)?;
    let assignment = g.softmax(logits, 0)?;
    let xt = g.transpose(x)?;
    let weighted = g.matmul(assignment, xt)?;
    let mass = g.sum_axis(assignment, 1)?;
    let scaled_centers = g.scale_rows(vars.vlad_centers, mass)?;
    let residuals = g.sub(weighted, scaled_centers)?;
    // A cluster that received no assignment mass contributes a zero row;
    // only the all-zero aggregate is an error, caught by the strict global
    // normalization below.
    let intra = g.l2norm_lenient(residuals, 1)?;
    let flat = g.reshape(intra, vec![clusters * channels])?;
    Ok(g.l2norm(flat, 0)?)
}

/// Full pipeline from a registered image leaf to the descriptor vector.
/// The final linear map is not re-normalized; the similarity in the loss
/// handles scale.
pub fn descriptor_var<E: Real>(
    g: &mut Graph<E>,
    input: Var,
    config: &ModelConfig,
    vars: &ModelVars,
) -> Result<Var, ModelError> {
    let feature = ccm_forward(g, input, &config.ccm, vars)?;
    let attended = rtm_forward(g, feature, &config.rtm, vars)?;
    let vlad = netvlad(g, attended, vars)?;
    let column = g.reshape(vlad, vec![config.vlad_dim(), 1])?;
    let mapped = g.matmul(vars.head.0, column)?;
    let biased = g.add_rows(mapped, vars.head.1)?;
    Ok(g.reshape(biased, vec![config.head.descriptor_dim])?)
}

/// Evaluates the descriptor for one image without tracking gradients.
pub fn descriptor<E: Real>(
    image: &RangeImage,
    config: &ModelConfig,
    weights: &ModelWeights<E>,
) -> Result<Vec<E>, ModelError> {
    let mut g = Graph::new();
    let vars = ModelVars::register(&mut g, weights, false);
    let input = g.constant(image_to_tensor::<E>(image, config.input_scale));
    let out = descriptor_var(&mut g, input, config, &vars)?;
    Ok(g.value(out).data().to_vec())
}

// ── Config file ──────────────────────────────────────────────────────────

pub fn write_model_config<W: Write>(mut out: W, config: &ModelConfig) -> io::Result<()> {
    writeln!(out, "height = {}", config.ccm.input_height)?;
    writeln!(out, "width = {}", config.ccm.input_width)?;
    let pad = match config.ccm.pad_kind {
        PadKind::Circular => "circular",
        PadKind::Zero => "zero",
    };
    writeln!(out, "pad_mode = {pad}")?;
    for (i, layer) in config.ccm.layers.iter().enumerate() {
        writeln!(
            out,
            "layer{i} = {}x{} stride {} vpad {} channels {}",
            layer.kernel_h, layer.kernel_w, layer.stride_h, layer.vertical_pad, layer.out_channels
        )?;
    }
    writeln!(out, "channel_kernel = {}", config.rtm.channel_kernel)?;
    writeln!(out, "spatial_kernel = {}", config.rtm.spatial_kernel)?;
    writeln!(out, "clusters = {}", config.head.clusters)?;
    writeln!(out, "descriptor_dim = {}", config.head.descriptor_dim)?;
    writeln!(out, "input_scale = {}", config.input_scale)?;
    writeln!(out, "seed = {}", config.seed)?;
    Ok(())
}

pub fn read_model_config<R: BufRead>(input: R) -> Result<ModelConfig, ModelError> {
    let mut config = ModelConfig::tiny(0);
    config.ccm.layers.clear();
    let mut layers: Vec<(usize, ConvLayerSpec)> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| ModelError::Config(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| ModelError::Config(format!("line {lineno}: expected key = value")))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| ModelError::Config(format!("line {lineno}: bad {what}: {value}"));
        match key {
            "height" => config.ccm.input_height = value.parse().map_err(|_| bad("height"))?,
            "width" => config.ccm.input_width = value.parse().map_err(|_| bad("width"))?,
            "pad_mode" => {
                config.ccm.pad_kind = match value {
                    "circular" => PadKind::Circular,
                    "zero" => PadKind::Zero,
                    _ => return Err(bad("pad_mode")),
                }
            }
            "channel_kernel" => config.rtm.channel_kernel = value.parse().map_err(|_| bad("channel_kernel"))?,
            "spatial_kernel" => config.rtm.spatial_kernel = value.parse().map_err(|_| bad("spatial_kernel"))?,
            "clusters" => config.head.clusters = value.parse().map_err(|_| bad("clusters"))?,
            "descriptor_dim" => config.head.descriptor_dim = value.parse().map_err(|_| bad("descriptor_dim"))?,
            "input_scale" => config.input_scale = value.parse().map_err(|_| bad("input_scale"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            _ if key.starts_with("layer") => {
                let index: usize = key[5..].parse().map_err(|_| bad("layer index"))?;
                layers.push((index, parse_layer(value).ok_or_else(|| bad("layer"))?));
            }
            other => return Err(ModelError::Config(format!("line {lineno}: unknown key {other}"))),
        }
    }
    layers.sort_by_key(|(i, _)| *i);
    for (expect, (i, layer)) in layers.into_iter().enumerate() {
        if i != expect {
            return Err(ModelError::Config(format!("layer indices must be contiguous, missing layer{expect}")));
        }
        config.ccm.layers.push(layer);
    }
    config.validate()?;
    Ok(config)
}

fn parse_layer(value: &str) -> Option<ConvLayerSpec> {
    // "KhxKw stride S vpad P channels C"
    let fields: Vec<&str> = value.split_whitespace().collect();
    if fields.len() != 7 || fields[1] != "stride" || fields[3] != "vpad" || fields[5] != "channels" {
        return None;
    }
    let (kh, kw) = fields[0].split_once('x')?;
    Some(ConvLayerSpec {
        kernel_h: kh.parse().ok()?,
        kernel_w: kw.parse().ok()?,
        stride_h: fields[2].parse().ok()?,
        vertical_pad: fields[4].parse().ok()?,
        out_channels: fields[6].parse().ok()?,
    })
}

pub fn write_model_config_file(path: &Path, config: &ModelConfig) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model_config(&mut out, config)?;
    out.flush()
}

pub fn read_model_config_file(path: &Path) -> Result<ModelConfig, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
    read_model_config(BufReader::new(file))
}
