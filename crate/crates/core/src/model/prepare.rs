use alloc::format;
use alloc::vec::Vec;

use super::{LayerDesc, LayerKind, ModelGraph, QFilterSet, QuantParams};
use crate::engines::{AddParams, ADD_PRE_SHIFT};
use crate::quant::{narrow_bias, quantize_multiplier, RequantParams, Rounding};
use crate::{Error, Result};

/// A graph whose layers carry every run-time integer constant.
///
/// Immutable once built; engines only ever read it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedModel {
    pub graph: ModelGraph,
    pub rounding: Rounding,
}

impl PreparedModel {
    pub fn layers(&self) -> &[LayerDesc] {
        &self.graph.layers
    }

    pub fn layer(&self, index: usize) -> &LayerDesc {
        &self.graph.layers[index]
    }
}

fn round16(n: usize) -> usize {
    n.div_ceil(16) * 16
}

fn pad_filter_set(f: &QFilterSet, in_channels: usize, out_channels: usize) -> QFilterSet {
    if f.in_channels == in_channels && f.out_channels == out_channels {
        return f.clone();
    }
    let last = f.out_channels - 1;
    let mut zero_points = f.weight_zero_points.clone();
    let mut scales = f.weight_scales.clone();
    let mut biases = f.biases.clone();
    zero_points.resize(out_channels, f.weight_zero_points[last]);
    scales.resize(out_channels, f.weight_scales[last]);
    biases.resize(out_channels, 0);

    let taps = f.kernel_h * f.kernel_w;
    let mut weights = Vec::with_capacity(taps * in_channels * out_channels);
    for (o, &wz) in zero_points.iter().enumerate() {
        for t in 0..taps {
            if o < f.out_channels {
                let start = (o * taps + t) * f.in_channels;
                weights.extend_from_slice(&f.weights[start..start + f.in_channels]);
                weights.resize(weights.len() + in_channels - f.in_channels, wz);
            } else {
                weights.resize(weights.len() + in_channels, wz);
            }
        }
    }
    QFilterSet {
        kernel_h: f.kernel_h,
        kernel_w: f.kernel_w,
        in_channels,
        out_channels,
        weights,
        weight_zero_points: zero_points,
        weight_scales: scales,
        biases,
    }
}

/// Rounds channel and filter counts up to multiples of 16.
///
/// New weight positions hold the filter's weight zero point and new biases are
/// zero, so padded lanes add exactly nothing to any accumulator and padded
/// output channels settle at the output zero point. The C2D input (3 colour
/// channels) is never padded.
pub fn pad_channels(layer: &LayerDesc) -> LayerDesc {
    let mut out = layer.clone();
    let in_c = match layer.kind {
        LayerKind::C2d => layer.input.channels,
        _ => round16(layer.input.channels),
    };
    let out_c = round16(layer.output.channels);
    out.input.channels = in_c;
    out.output.channels = out_c;
    if let Some(f) = &layer.filters {
        let filter_in = if layer.kind == LayerKind::Dwc { 1 } else { in_c };
        out.filters = Some(pad_filter_set(f, filter_in, out_c));
        if !layer.requant.is_empty() && layer.requant.len() < out_c {
            let last = *layer.requant.last().expect("non-empty");
            out.requant.resize(out_c, last);
        }
    }
    out.apass = in_c.div_ceil(16);
    out.fpass = out_c.div_ceil(16);
    out
}

/// Derives the three-multiplier ADD constants from the two operand scales and the
/// output scale, with a fixed `<< 20` headroom on the operands.
pub fn add_params(in1: QuantParams, in2: QuantParams, out: QuantParams, rounding: Rounding) -> Result<AddParams> {
    let twice_max = 2.0 * in1.scale.max(in2.scale);
    let m1 = in1.scale / twice_max;
    let m2 = in2.scale / twice_max;
    let m3 = twice_max / (libm::ldexp(1.0, ADD_PRE_SHIFT as i32) * out.scale);
    Ok(AddParams {
        mult1: quantize_multiplier(m1, rounding)?,
        mult2: quantize_multiplier(m2, rounding)?,
        mult3: quantize_multiplier(m3, rounding)?,
        in1_zero: in1.zero_point,
        in2_zero: in2.zero_point,
        out_zero: out.zero_point,
        pre_shift: ADD_PRE_SHIFT,
    })
}

/// Pads one layer and computes its multipliers, narrowed-bias checks, ADD
/// constants and pass counts.
pub fn prepare_layer(layer: &LayerDesc, rounding: Rounding) -> Result<LayerDesc> {
    let context = |e: Error| match e {
        Error::Domain(m) => Error::Domain(format!("layer {}: {m}", layer.name)),
        Error::Range(m) => Error::Range(format!("layer {}: {m}", layer.name)),
        other => other,
    };
    let mut out = pad_channels(layer);
    let in_q = out.input_quant;
    let out_q = out.output_quant;
    match out.kind {
        LayerKind::C2d | LayerKind::Dwc | LayerKind::Exp | LayerKind::Pro => {
            let filters = out.filters()?;
            filters.validate()?;
            let width = out.kind.bias_width();
            for &b in &filters.biases {
                narrow_bias(b, width).map_err(context)?;
            }
            let requant = filters
                .weight_scales
                .iter()
                .map(|ws| {
                    let m = in_q.scale * ws / out_q.scale;
                    quantize_multiplier(m, rounding).map(|ms| RequantParams::u8(ms, out_q.zero_point))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(context)?;
            out.requant = requant;
        }
        LayerKind::AvgPool => {
            let m = in_q.scale / (out.input.pixels() as f64 * out_q.scale);
            let ms = quantize_multiplier(m, rounding).map_err(context)?;
            out.requant = alloc::vec![RequantParams::u8(ms, out_q.zero_point)];
        }
        LayerKind::Add => {
            out.add = match (out.residual, out.shortcut_quant) {
                (true, Some(sq)) => Some(add_params(in_q, sq, out_q, rounding).map_err(context)?),
                (false, _) => None,
                (true, None) => {
                    return Err(Error::Domain(format!(
                        "layer {}: residual ADD without shortcut quantization",
                        layer.name
                    )))
                }
            };
        }
    }
    Ok(out)
}

/// Validates the graph and prepares every layer.
///
/// Idempotent: preparing an already prepared graph re-derives the same
/// constants (or new ones, if `rounding` differs).
pub fn prepare(graph: &ModelGraph, rounding: Rounding) -> Result<PreparedModel> {
    graph.validate()?;
    let layers = graph.layers.iter().map(|l| prepare_layer(l, rounding)).collect::<Result<Vec<_>>>()?;
    let prepared = ModelGraph {
        input: graph.input,
        input_quant: graph.input_quant,
        layers,
        shortcuts: graph.shortcuts.clone(),
        num_classes: graph.num_classes,
    };
    prepared.validate()?;
    Ok(PreparedModel { graph: prepared, rounding })
}
