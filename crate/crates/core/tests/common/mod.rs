#![allow(dead_code)]

use semistream_core::model::{prepare_layer, Dims, LayerDesc, LayerKind, QFilterSet, QTensor, QuantParams};
use semistream_core::quant::Rounding;

/// Filters with every weight at its zero point `wz`, unit scale, zero bias.
pub fn flat_filters(kernel: usize, in_channels: usize, out_channels: usize, wz: u8) -> QFilterSet {
    QFilterSet {
        kernel_h: kernel,
        kernel_w: kernel,
        in_channels,
        out_channels,
        weights: vec![wz; kernel * kernel * in_channels * out_channels],
        weight_zero_points: vec![wz; out_channels],
        weight_scales: vec![1.0; out_channels],
        biases: vec![0; out_channels],
    }
}

/// A prepared layer whose multiplier is `in_scale · 1 / out_scale`.
pub fn layer(
    kind: LayerKind,
    input: Dims,
    stride: usize,
    filters: QFilterSet,
    in_q: QuantParams,
    out_q: QuantParams,
    rounding: Rounding,
) -> LayerDesc {
    let raw = LayerDesc::conv("hand", kind, input, stride, filters, in_q, out_q);
    prepare_layer(&raw, rounding).unwrap()
}

pub fn constant(dims: Dims, value: u8, quant: QuantParams) -> QTensor {
    QTensor::new(dims, vec![value; dims.len()], quant).unwrap()
}

pub fn count_where(t: &QTensor, pred: impl Fn(u8) -> bool) -> usize {
    t.data.iter().filter(|&&v| pred(v)).count()
}
