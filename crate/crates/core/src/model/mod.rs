//! Quantized tensors, filter sets, layer descriptors and model graphs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::engines::AddParams;
use crate::quant::{BiasWidth, RequantParams};
use crate::{Error, Result};

mod prepare;
mod topology;

pub use prepare::{add_params, pad_channels, prepare, prepare_layer, PreparedModel};
pub use topology::{
    build_mobilenet_v2, build_model, random_image, random_layer, random_tensor, BlockSpec, Topology,
    ACTIVATION_SCALE_RANGE, ENTRY_CHANNELS, IMAGE_QUANT,
};

/// Height, width and channel count of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Dims { height, width, channels }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Dims { channels, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Affine quantization of an activation edge: `real = scale · (q − zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub const fn new(scale: f64, zero_point: u8) -> Self {
        QuantParams { scale, zero_point }
    }
}

/// 8-bit unsigned activation tensor in row-major (row, column, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub zero_point: u8,
    pub scale: f64,
}

impl QTensor {
    pub fn new(dims: Dims, data: Vec<u8>, quant: QuantParams) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.channels == 0 {
            return Err(Error::Shape(format!("tensor dims {dims} must be positive")));
        }
        if data.len() != dims.len() {
            return Err(Error::Shape(format!("tensor {dims} needs {} values, got {}", dims.len(), data.len())));
        }
        if !(quant.scale.is_finite() && quant.scale > 0.0) {
            return Err(Error::Domain(format!("tensor scale {} must be positive", quant.scale)));
        }
        Ok(QTensor {
            height: dims.height,
            width: dims.width,
            channels: dims.channels,
            data,
            zero_point: quant.zero_point,
            scale: quant.scale,
        })
    }

    /// A tensor with every element at the zero point (real zero).
    pub fn zeros(dims: Dims, quant: QuantParams) -> Self {
        QTensor {
            height: dims.height,
            width: dims.width,
            channels: dims.channels,
            data: vec![quant.zero_point; dims.len()],
            zero_point: quant.zero_point,
            scale: quant.scale,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width, self.channels)
    }

    pub fn quant(&self) -> QuantParams {
        QuantParams::new(self.scale, self.zero_point)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// All channels of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    /// Zero-point-extends the channel dimension to `channels`.
    pub fn pad_channels_to(&self, channels: usize) -> QTensor {
        if channels <= self.channels {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width * channels);
        for px in self.data.chunks(self.channels) {
            data.extend_from_slice(px);
            data.resize(data.len() + channels - self.channels, self.zero_point);
        }
        QTensor { channels, data, ..self.clone() }
    }

    /// Keeps only the first `channels` channels.
    pub fn truncate_channels(&self, channels: usize) -> QTensor {
        if channels >= self.channels {
            return self.clone();
        }
        let data = self.data.chunks(self.channels).flat_map(|px| px[..channels].iter().copied()).collect();
        QTensor { channels, data, ..self.clone() }
    }
}

/// 8-bit unsigned weights with per-output-channel quantization.
///
/// Weights are stored output-channel major, `(filter, row, col, channel)`.
/// Depthwise filter sets use `in_channels = 1` with one filter per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QFilterSet {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<u8>,
    pub weight_zero_points: Vec<u8>,
    pub weight_scales: Vec<f64>,
    pub biases: Vec<i32>,
}

impl QFilterSet {
    pub fn validate(&self) -> Result<()> {
        let expected = self.kernel_h * self.kernel_w * self.in_channels * self.out_channels;
        if expected == 0 {
            return Err(Error::Shape("filter set has an empty dimension".into()));
        }
        if self.weights.len() != expected {
            return Err(Error::Shape(format!(
                "filter set {}x{}x{}x{} needs {expected} weights, got {}",
                self.kernel_h,
                self.kernel_w,
                self.in_channels,
                self.out_channels,
                self.weights.len()
            )));
        }
        let n = self.out_channels;
        if self.weight_zero_points.len() != n || self.weight_scales.len() != n || self.biases.len() != n {
            return Err(Error::Shape(format!(
                "per-channel vectors must have {n} entries (zero points {}, scales {}, biases {})",
                self.weight_zero_points.len(),
                self.weight_scales.len(),
                self.biases.len()
            )));
        }
        if let Some(s) = self.weight_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("weight scale {s} must be positive")));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, filter: usize, ky: usize, kx: usize, ch: usize) -> usize {
        ((filter * self.kernel_h + ky) * self.kernel_w + kx) * self.in_channels + ch
    }

    #[inline]
    pub fn weight(&self, filter: usize, ky: usize, kx: usize, ch: usize) -> u8 {
        self.weights[self.index(filter, ky, kx, ch)]
    }

    /// Number of weights feeding one output element.
    pub fn kernel_volume(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
}

/// The layer kinds the engines understand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    C2d,
    Dwc,
    Exp,
    Pro,
    Add,
    AvgPool,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::C2d => "C2D",
            LayerKind::Dwc => "DWC",
            LayerKind::Exp => "EXP",
            LayerKind::Pro => "PRO",
            LayerKind::Add => "ADD",
            LayerKind::AvgPool => "AVGPOOL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "C2D" => LayerKind::C2d,
            "DWC" => LayerKind::Dwc,
            "EXP" => LayerKind::Exp,
            "PRO" => LayerKind::Pro,
            "ADD" => LayerKind::Add,
            "AVGPOOL" => LayerKind::AvgPool,
            other => return Err(Error::Domain(format!("unknown layer kind `{other}`"))),
        })
    }

    pub fn has_filters(self) -> bool {
        matches!(self, LayerKind::C2d | LayerKind::Dwc | LayerKind::Exp | LayerKind::Pro)
    }

    /// Bias storage width after narrowing.
    pub fn bias_width(self) -> BiasWidth {
        match self {
            LayerKind::Pro => BiasWidth::Bits18,
            _ => BiasWidth::Bits16,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One layer: geometry, parameters and (after preparation) integer constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input: Dims,
    pub output: Dims,
    pub stride: usize,
    pub filters: Option<QFilterSet>,
    pub input_quant: QuantParams,
    pub output_quant: QuantParams,
    /// Quantization of the residual operand of an ADD.
    pub shortcut_quant: Option<QuantParams>,
    /// Whether an ADD actually adds a shortcut; otherwise it passes through.
    pub residual: bool,
    /// Per output channel for convolutions, a single entry for AVGPOOL.
    pub requant: Vec<RequantParams>,
    pub add: Option<AddParams>,
    pub apass: usize,
    pub fpass: usize,
}

impl LayerDesc {
    /// A convolution-like layer awaiting preparation.
    pub fn conv(
        name: impl Into<String>,
        kind: LayerKind,
        input: Dims,
        stride: usize,
        filters: QFilterSet,
        input_quant: QuantParams,
        output_quant: QuantParams,
    ) -> Self {
        let out_c = filters.out_channels;
        let output = Dims::new(input.height.div_ceil(stride), input.width.div_ceil(stride), out_c);
        LayerDesc {
            name: name.into(),
            kind,
            input,
            output,
            stride,
            filters: Some(filters),
            input_quant,
            output_quant,
            shortcut_quant: None,
            residual: false,
            requant: Vec::new(),
            add: None,
            apass: input.channels.div_ceil(16),
            fpass: out_c.div_ceil(16),
        }
    }

    /// A global average pool over the whole frame.
    pub fn avgpool(name: impl Into<String>, input: Dims, input_quant: QuantParams, output_quant: QuantParams) -> Self {
        LayerDesc {
            name: name.into(),
            kind: LayerKind::AvgPool,
            input,
            output: Dims::new(1, 1, input.channels),
            stride: 1,
            filters: None,
            input_quant,
            output_quant,
            shortcut_quant: None,
            residual: false,
            requant: Vec::new(),
            add: None,
            apass: input.channels.div_ceil(16),
            fpass: input.channels.div_ceil(16),
        }
    }

    /// An ADD slot. `shortcut` is the residual operand's quantization, or
    /// `None` for a pass-through slot (whose output quantization is its input's).
    pub fn add(
        name: impl Into<String>,
        dims: Dims,
        input_quant: QuantParams,
        shortcut: Option<QuantParams>,
        output_quant: QuantParams,
    ) -> Self {
        let residual = shortcut.is_some();
        LayerDesc {
            name: name.into(),
            kind: LayerKind::Add,
            input: dims,
            output: dims,
            stride: 1,
            filters: None,
            input_quant,
            output_quant: if residual { output_quant } else { input_quant },
            shortcut_quant: shortcut,
            residual,
            requant: Vec::new(),
            add: None,
            apass: dims.channels.div_ceil(16),
            fpass: dims.channels.div_ceil(16),
        }
    }

    pub fn filters(&self) -> Result<&QFilterSet> {
        self.filters.as_ref().ok_or_else(|| Error::Shape(format!("layer {} has no filters", self.name)))
    }

    pub fn is_prepared(&self) -> bool {
        match self.kind {
            LayerKind::Add => !self.residual || self.add.is_some(),
            _ => !self.requant.is_empty(),
        }
    }
}

/// A residual shortcut: the output of `source` is added by the ADD layer `add`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shortcut {
    pub add: usize,
    pub source: usize,
}

/// An ordered layer list with its residual shortcut table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: Dims,
    pub input_quant: QuantParams,
    pub layers: Vec<LayerDesc>,
    pub shortcuts: Vec<Shortcut>,
    /// Meaningful channels of the final output (the rest is padding).
    pub num_classes: usize,
}

impl ModelGraph {
    /// Checks that adjacent layers agree on dims and quantization and that
    /// every shortcut joins identically shaped tensors.
    pub fn validate(&self) -> Result<()> {
        let mut dims = self.input;
        let mut quant = self.input_quant;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input != dims {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) expects input {} but receives {dims}",
                    layer.name, layer.input
                )));
            }
            if layer.input_quant != quant {
                return Err(Error::Domain(format!(
                    "layer {i} ({}) input quantization does not match its producer",
                    layer.name
                )));
            }
            if layer.stride != 1 && layer.stride != 2 {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) has unsupported stride {}",
                    layer.name, layer.stride
                )));
            }
            if let Some(f) = &layer.filters {
                f.validate()?;
            } else if layer.kind.has_filters() {
                return Err(Error::Shape(format!("layer {i} ({}) is missing filters", layer.name)));
            }
            dims = layer.output;
            quant = layer.output_quant;
        }
        if self.num_classes == 0 || self.num_classes > dims.channels {
            return Err(Error::Shape(format!(
                "{} classes do not fit the {} output channels",
                self.num_classes, dims.channels
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let shortcut = self.shortcuts.iter().find(|s| s.add == i);
            match (layer.kind, layer.residual, shortcut) {
                (LayerKind::Add, true, Some(s)) => {
                    let src = self.layers.get(s.source).filter(|_| s.source < i).ok_or_else(|| {
                        Error::Shape(format!("shortcut into layer {i} has invalid source {}", s.source))
                    })?;
                    if src.output != layer.output {
                        return Err(Error::Shape(format!(
                            "shortcut {} -> {i} joins {} with {}",
                            s.source, src.output, layer.output
                        )));
                    }
                    if layer.shortcut_quant != Some(src.output_quant) {
                        return Err(Error::Domain(format!("shortcut {} -> {i} quantization mismatch", s.source)));
                    }
                }
                (LayerKind::Add, false, None) => {}
                (_, false, None) if layer.kind != LayerKind::Add => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}) residual flag disagrees with the shortcut table",
                        layer.name
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn output_dims(&self) -> Dims {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn shortcut_into(&self, add: usize) -> Option<Shortcut> {
        self.shortcuts.iter().copied().find(|s| s.add == add)
    }

    /// Number of bottleneck blocks (one depthwise layer each).
    pub fn block_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Dwc).count()
    }
}
