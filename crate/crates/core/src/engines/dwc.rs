use alloc::format;
use alloc::vec::Vec;

use super::layout::layout_weights;
use super::linebuf::stream_3x3;
use super::{check_input, check_multiple_of_16, check_prepared, layer_stats, EngineStats, LANES};
use crate::model::{LayerDesc, LayerKind, QTensor};
use crate::quant::Rounding;
use crate::{Error, Result};

/// Depthwise 3×3 convolution in 16-channel passes.
///
/// Pass `p` streams the 16-channel slice `p` of the whole frame through the
/// line buffer; each cycle reads one 128-bit word from each of the nine
/// per-tap weight memories.
pub fn dwc_forward(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<(QTensor, EngineStats)> {
    check_multiple_of_16(layer, "channel", input.channels)?;
    check_input(input, layer)?;
    let f = layer.filters()?;
    let image = layout_weights(LayerKind::Dwc, f)?;
    if f.out_channels != input.channels {
        return Err(Error::Shape(format!(
            "layer {}: {} depthwise filters for {} channels",
            layer.name, f.out_channels, input.channels
        )));
    }
    check_prepared(layer, input.channels)?;

    let a0 = input.zero_point as i32;
    let channels = input.channels;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    for pass in 0..channels / LANES {
        let lo = pass * LANES;
        // One word per tap memory, offset by each channel's weight zero point.
        let mut taps = [[0i32; LANES]; 9];
        for (t, tap) in taps.iter_mut().enumerate() {
            let word = image.read(t, pass);
            for l in 0..LANES {
                tap[l] = word[l] as i32 - f.weight_zero_points[lo + l] as i32;
            }
        }
        let slices = input.data.chunks(channels).map(|px| &px[lo..lo + LANES]);
        stream_3x3(slices, input.height, input.width, LANES, layer.stride, input.zero_point, |oy, ox, win| {
            let base = out.index(oy, ox, lo);
            for l in 0..LANES {
                let mut acc = f.biases[lo + l];
                for (t, tap) in taps.iter().enumerate() {
                    acc += (win[t * LANES + l] as i32 - a0) * tap[l];
                }
                out.data[base + l] = layer.requant[lo + l].output_u8(acc, rounding);
            }
        })?;
    }
    Ok((out, layer_stats(layer)?))
}

/// Global average pooling on the DWC pipeline with the weight multiply
/// skipped: per channel the frame is accumulated and scaled by a multiplier
/// equivalent to `1 / (H·W)` (1/49 for a 7×7 frame).
pub fn dwc_avgpool(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<(QTensor, EngineStats)> {
    if layer.kind != LayerKind::AvgPool {
        return Err(Error::Shape(format!("layer {} is not an average pool", layer.name)));
    }
    check_multiple_of_16(layer, "channel", input.channels)?;
    check_input(input, layer)?;
    check_prepared(layer, 1)?;
    let a0 = input.zero_point as i32;
    let p = layer.requant[0];
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    for pass in 0..input.channels / LANES {
        let lo = pass * LANES;
        let mut acc = [0i32; LANES];
        for px in input.data.chunks(input.channels) {
            for (a, v) in acc.iter_mut().zip(&px[lo..lo + LANES]) {
                *a += *v as i32 - a0;
            }
        }
        let sums: Vec<u8> = acc.iter().map(|&a| p.output_u8(a, rounding)).collect();
        out.data[lo..lo + LANES].copy_from_slice(&sums);
    }
    Ok((out, layer_stats(layer)?))
}
