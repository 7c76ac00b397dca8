use alloc::format;
use alloc::vec::Vec;

use super::linebuf::stream_3x3;
use super::{check_input, check_prepared, layer_stats, EngineStats};
use crate::model::{LayerDesc, QTensor};
use crate::quant::Rounding;
use crate::{Error, Result};

const IN_CHANNELS: usize = 3;
const FILTERS: usize = 32;
const TAPS: usize = 9 * IN_CHANNELS;

/// Entry-layer 3×3 convolution, 3 input channels to 32 filters.
///
/// The frame is consumed once in raster order through a two-line buffer. All
/// 27 taps of all 32 filters are evaluated per window, accumulators starting
/// at the bias, followed by per-filter requantization and clamping.
pub fn c2d_forward(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<(QTensor, EngineStats)> {
    let f = layer.filters()?;
    if f.kernel_h != 3 || f.kernel_w != 3 || f.in_channels != IN_CHANNELS || f.out_channels != FILTERS {
        return Err(Error::Shape(format!(
            "C2D engine is built for 3x3x3x32 filters, layer {} has {}x{}x{}x{}",
            layer.name, f.kernel_h, f.kernel_w, f.in_channels, f.out_channels
        )));
    }
    check_input(input, layer)?;
    check_prepared(layer, FILTERS)?;

    // Weights live in registers, already offset by their zero points.
    let centred: Vec<i32> = f
        .weights
        .chunks(TAPS)
        .zip(&f.weight_zero_points)
        .flat_map(|(w, &wz)| w.iter().map(move |&x| x as i32 - wz as i32))
        .collect();
    let a0 = input.zero_point as i32;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);

    stream_3x3(
        input.data.chunks(IN_CHANNELS),
        input.height,
        input.width,
        IN_CHANNELS,
        layer.stride,
        input.zero_point,
        |oy, ox, window| {
            let base = out.index(oy, ox, 0);
            for (filter, w) in centred.chunks(TAPS).enumerate() {
                let mut acc = f.biases[filter];
                for (a, wv) in window.iter().zip(w) {
                    acc += (*a as i32 - a0) * wv;
                }
                out.data[base + filter] = layer.requant[filter].output_u8(acc, rounding);
            }
        },
    )?;
    Ok((out, layer_stats(layer)?))
}
