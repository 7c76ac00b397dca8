//! Reference evaluation for testing the engines.
//!
//! Everything here is direct nested-loop evaluation without streaming,
//! passes or memory layouts. Rescaling is re-derived from exact integer
//! division rather than shared with [`crate::quant`]; only [`clamp`] and the
//! [`Rounding`] flag are common.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{Dims, LayerDesc, LayerKind, PreparedModel, QFilterSet, QTensor};
use crate::quant::{clamp, MultShift, Rounding};
use crate::{Error, Result};

pub mod cases;

/// `v · mult / 2^shift` rounded per `rounding`, by exact integer division.
pub fn exact_rescale(v: i128, ms: MultShift, rounding: Rounding) -> i128 {
    let num = v * ms.mult as i128;
    if ms.shift >= 120 {
        // |num| < 2^95, so the quotient is below one half in magnitude.
        return if rounding == Rounding::Truncate && num < 0 { -1 } else { 0 };
    }
    let den = 1i128 << ms.shift;
    match rounding {
        Rounding::Truncate => num.div_euclid(den),
        Rounding::Nearest => {
            let (q, r) = (num.abs() / den, num.abs() % den);
            let m = if 2 * r >= den { q + 1 } else { q };
            if num < 0 {
                -m
            } else {
                m
            }
        }
    }
}

fn out_of_i32(v: i128) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Range(format!("intermediate {v} exceeds 32 bits")))
}

/// Leading padding of a 'same' window along one axis.
fn pad_before(len: usize, out: usize, stride: usize, kernel: usize) -> usize {
    (((out - 1) * stride + kernel).saturating_sub(len)) / 2
}

fn conv(input: &QTensor, layer: &LayerDesc, f: &QFilterSet, rounding: Rounding) -> Result<QTensor> {
    let depthwise = layer.kind == LayerKind::Dwc;
    let out_dims = layer.output;
    let expected_in = if depthwise { 1 } else { input.channels };
    if f.in_channels != expected_in || (depthwise && f.out_channels != input.channels) {
        return Err(Error::Shape(format!(
            "layer {}: filters {}x{}x{}x{} do not fit input {}",
            layer.name,
            f.kernel_h,
            f.kernel_w,
            f.in_channels,
            f.out_channels,
            input.dims()
        )));
    }
    if f.out_channels != out_dims.channels || layer.requant.len() != f.out_channels {
        return Err(Error::Shape(format!("layer {}: malformed outputs", layer.name)));
    }
    let s = layer.stride;
    let top = pad_before(input.height, out_dims.height, s, f.kernel_h);
    let left = pad_before(input.width, out_dims.width, s, f.kernel_w);
    let a0 = input.zero_point as i64;
    let mut out = QTensor::zeros(out_dims, layer.output_quant);
    for oy in 0..out_dims.height {
        for ox in 0..out_dims.width {
            for m in 0..f.out_channels {
                let wz = f.weight_zero_points[m] as i64;
                let mut acc = f.biases[m] as i64;
                for ky in 0..f.kernel_h {
                    for kx in 0..f.kernel_w {
                        let y = (oy * s + ky) as isize - top as isize;
                        let x = (ox * s + kx) as isize - left as isize;
                        if y < 0 || x < 0 || y >= input.height as isize || x >= input.width as isize {
                            // border samples sit at the zero point
                            continue;
                        }
                        let (y, x) = (y as usize, x as usize);
                        for c in 0..f.in_channels {
                            let ch = if depthwise { m } else { c };
                            let a = input.get(y, x, ch) as i64 - a0;
                            let w = f.weight(m, ky, kx, c) as i64 - wz;
                            acc += a * w;
                        }
                    }
                }
                let p = &layer.requant[m];
                let v = exact_rescale(acc as i128, p.ms, rounding) + p.out_zero as i128;
                let v = v.clamp(p.out_min as i128, p.out_max as i128);
                out.set(oy, ox, m, out_of_i32(v)? as u8);
            }
        }
    }
    Ok(out)
}

fn avgpool(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<QTensor> {
    let p = layer
        .requant
        .first()
        .ok_or_else(|| Error::Shape(format!("layer {} has no requantization constant", layer.name)))?;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    for c in 0..input.channels {
        let mut acc = 0i128;
        for y in 0..input.height {
            for x in 0..input.width {
                acc += input.get(y, x, c) as i128 - input.zero_point as i128;
            }
        }
        let v = exact_rescale(acc, p.ms, rounding) + p.out_zero as i128;
        out.set(0, 0, c, clamp(out_of_i32(v)?, p.out_min, p.out_max)? as u8);
    }
    Ok(out)
}

/// Direct evaluation of one layer. Residual additions need their second
/// operand and go through [`naive_add`].
pub fn naive_quant_layer(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<QTensor> {
    if input.dims() != layer.input {
        return Err(Error::Shape(format!("layer {} expects {}, got {}", layer.name, layer.input, input.dims())));
    }
    match layer.kind {
        LayerKind::C2d | LayerKind::Dwc | LayerKind::Pro | LayerKind::Exp => {
            conv(input, layer, layer.filters()?, rounding)
        }
        LayerKind::AvgPool => avgpool(input, layer, rounding),
        LayerKind::Add if !layer.residual => Ok(input.clone()),
        LayerKind::Add => {
            Err(Error::Shape(format!("layer {} adds a shortcut; evaluate it with naive_add", layer.name)))
        }
    }
}

/// Direct evaluation of a residual addition.
pub fn naive_add(in1: &QTensor, in2: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<QTensor> {
    if in1.dims() != in2.dims() || in1.dims() != layer.input {
        return Err(Error::Shape(format!("layer {}: cannot add {} and {}", layer.name, in1.dims(), in2.dims())));
    }
    let p = layer.add.ok_or_else(|| Error::Shape(format!("layer {} has no addition constants", layer.name)))?;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    for (i, o) in out.data.iter_mut().enumerate() {
        let a1 = (in1.data[i] as i128 - p.in1_zero as i128) << p.pre_shift;
        let a2 = (in2.data[i] as i128 - p.in2_zero as i128) << p.pre_shift;
        let s = exact_rescale(a1, p.mult1, rounding) + exact_rescale(a2, p.mult2, rounding);
        let v = exact_rescale(s, p.mult3, rounding) + p.out_zero as i128;
        *o = clamp(out_of_i32(v)?, 0, 255)? as u8;
    }
    Ok(out)
}

/// Layer-by-layer evaluation of a whole model, keeping every intermediate
/// for the shortcuts. Returns the output trimmed to the class count.
pub fn run_sequential(model: &PreparedModel, image: &QTensor) -> Result<QTensor> {
    let graph = &model.graph;
    let mut outputs: Vec<QTensor> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let input = outputs.last().unwrap_or(image);
        let out = if layer.kind == LayerKind::Add && layer.residual {
            let s =
                graph.shortcut_into(i).ok_or_else(|| Error::Shape(format!("layer {} has no shortcut", layer.name)))?;
            naive_add(input, &outputs[s.source], layer, model.rounding)?
        } else {
            naive_quant_layer(input, layer, model.rounding)?
        };
        outputs.push(out);
    }
    let last = outputs.pop().ok_or_else(|| Error::Shape("model has no layers".into()))?;
    Ok(last.truncate_channels(graph.num_classes))
}

/// Real-valued tensor in (row, column, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!("{dims} needs {} values, got {}", dims.len(), data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("float tensor values must be finite".into()));
        }
        Ok(FloatTensor { dims, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.dims.width + col) * self.dims.channels + ch]
    }
}

/// `scale · (q − zero_point)` elementwise.
pub fn dequantize(t: &QTensor) -> FloatTensor {
    let data = t.data.iter().map(|&q| t.scale * (q as f64 - t.zero_point as f64)).collect();
    FloatTensor { dims: t.dims(), data }
}

/// A real-valued layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FloatOp {
    /// 'Same'-padded convolution. Weights are `(filter, row, col, channel)`;
    /// depthwise kernels have one channel and one filter per input channel.
    Conv {
        weights: Vec<f64>,
        bias: Vec<f64>,
        kernel: usize,
        out_channels: usize,
        stride: usize,
        depthwise: bool,
    },
    Add(FloatTensor),
    AvgPool,
}

/// Evaluates a real-valued layer.
pub fn float_layer(input: &FloatTensor, op: &FloatOp) -> Result<FloatTensor> {
    let d = input.dims;
    match op {
        FloatOp::Conv { weights, bias, kernel, out_channels, stride, depthwise } => {
            let (k, m, s) = (*kernel, *out_channels, *stride);
            let in_c = if *depthwise { 1 } else { d.channels };
            if k == 0 || s == 0 || weights.len() != k * k * in_c * m || bias.len() != m {
                return Err(Error::Shape("malformed float convolution".into()));
            }
            if *depthwise && m != d.channels {
                return Err(Error::Shape("depthwise filters must match the channels".into()));
            }
            let out = Dims::new(d.height.div_ceil(s), d.width.div_ceil(s), m);
            let top = pad_before(d.height, out.height, s, k);
            let left = pad_before(d.width, out.width, s, k);
            let mut data = vec![0.0; out.len()];
            for oy in 0..out.height {
                for ox in 0..out.width {
                    for f in 0..m {
                        let mut acc = bias[f];
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * s + ky) as isize - top as isize;
                                let x = (ox * s + kx) as isize - left as isize;
                                if y < 0 || x < 0 || y >= d.height as isize || x >= d.width as isize {
                                    continue;
                                }
                                for c in 0..in_c {
                                    let ch = if *depthwise { f } else { c };
                                    let w = weights[((f * k + ky) * k + kx) * in_c + c];
                                    acc += w * input.get(y as usize, x as usize, ch);
                                }
                            }
                        }
                        data[(oy * out.width + ox) * m + f] = acc;
                    }
                }
            }
            FloatTensor::new(out, data)
        }
        FloatOp::Add(other) => {
            if other.dims != d {
                return Err(Error::Shape(format!("cannot add {} and {}", d, other.dims)));
            }
            FloatTensor::new(d, input.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
        }
        FloatOp::AvgPool => {
            let n = d.pixels() as f64;
            let mut data = vec![0.0; d.channels];
            for px in input.data.chunks(d.channels) {
                for (acc, v) in data.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            data.iter_mut().for_each(|v| *v /= n);
            FloatTensor::new(Dims::new(1, 1, d.channels), data)
        }
    }
}

/// The real-valued equivalent of a quantized convolution layer: dequantized
/// weights and biases (`bias · s_in · s_w`).
pub fn float_op_for(layer: &LayerDesc) -> Result<FloatOp> {
    match layer.kind {
        LayerKind::AvgPool => Ok(FloatOp::AvgPool),
        LayerKind::Add => Err(Error::Shape("an addition needs its second operand".into())),
        _ => {
            let f = layer.filters()?;
            if f.kernel_h != f.kernel_w {
                return Err(Error::Shape("only square kernels".into()));
            }
            let volume = f.kernel_volume();
            let weights = f
                .weights
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let m = i / volume;
                    f.weight_scales[m] * (w as f64 - f.weight_zero_points[m] as f64)
                })
                .collect();
            let bias = f
                .biases
                .iter()
                .zip(&f.weight_scales)
                .map(|(&b, &ws)| b as f64 * ws * layer.input_quant.scale)
                .collect();
            Ok(FloatOp::Conv {
                weights,
                bias,
                kernel: f.kernel_h,
                out_channels: f.out_channels,
                stride: layer.stride,
                depthwise: layer.kind == LayerKind::Dwc,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuantParams;
    use crate::quant::{quantize_multiplier, RequantParams};

    #[test]
    fn exact_rescale_rounding() {
        let half = MultShift { mult: 1 << 31, shift: 32 };
        assert_eq!(exact_rescale(3, half, Rounding::Nearest), 2);
        assert_eq!(exact_rescale(-3, half, Rounding::Nearest), -2);
        assert_eq!(exact_rescale(3, half, Rounding::Truncate), 1);
        assert_eq!(exact_rescale(-3, half, Rounding::Truncate), -2);
        let tiny = MultShift { mult: u32::MAX, shift: 200 };
        assert_eq!(exact_rescale(-5, tiny, Rounding::Truncate), -1);
        assert_eq!(exact_rescale(-5, tiny, Rounding::Nearest), 0);
    }

    fn one_by_one(w: u8, wz: u8, bias: i32, m: f64) -> LayerDesc {
        let f = QFilterSet {
            kernel_h: 1,
            kernel_w: 1,
            in_channels: 1,
            out_channels: 1,
            weights: vec![w],
            weight_zero_points: vec![wz],
            weight_scales: vec![1.0],
            biases: vec![bias],
        };
        let q = QuantParams::new(1.0, 10);
        let mut l = LayerDesc::conv("t", LayerKind::Pro, Dims::new(1, 1, 1), 1, f, q, q);
        l.requant = vec![RequantParams::u8(quantize_multiplier(m, Rounding::Nearest).unwrap(), 10)];
        l
    }

    #[test]
    fn single_element_dot_product() {
        // (13 - 10) · (7 - 4) + 5 = 14, times 0.5 = 7, plus 10
        let l = one_by_one(7, 4, 5, 0.5);
        let x = QTensor::new(Dims::new(1, 1, 1), vec![13], QuantParams::new(1.0, 10)).unwrap();
        assert_eq!(naive_quant_layer(&x, &l, Rounding::Nearest).unwrap().data, [17]);
        // 0.25 · 14 = 3.5 rounds away from zero
        let l = one_by_one(7, 4, 5, 0.25);
        assert_eq!(naive_quant_layer(&x, &l, Rounding::Nearest).unwrap().data, [14]);
        assert_eq!(naive_quant_layer(&x, &l, Rounding::Truncate).unwrap().data, [13]);
    }

    #[test]
    fn two_by_two_pool() {
        let q = QuantParams::new(1.0, 0);
        let mut l = LayerDesc::avgpool("p", Dims::new(2, 2, 1), q, q);
        l.requant = vec![RequantParams::u8(quantize_multiplier(0.25, Rounding::Nearest).unwrap(), 0)];
        let x = QTensor::new(Dims::new(2, 2, 1), vec![1, 2, 3, 5], q).unwrap();
        // 11 / 4 = 2.75
        assert_eq!(naive_quant_layer(&x, &l, Rounding::Nearest).unwrap().data, [3]);
        assert_eq!(naive_quant_layer(&x, &l, Rounding::Truncate).unwrap().data, [2]);
    }

    #[test]
    fn float_identity_and_linearity() {
        let d = Dims::new(3, 3, 2);
        let a = FloatTensor::new(d, (0..18).map(|i| i as f64 * 0.5).collect()).unwrap();
        let b = FloatTensor::new(d, (0..18).map(|i| 1.0 - i as f64).collect()).unwrap();
        let mut weights = vec![0.0; 9 * 2];
        weights[4] = 1.0;
        weights[9 + 4] = 1.0;
        let id = FloatOp::Conv { weights, bias: vec![0.0; 2], kernel: 3, out_channels: 2, stride: 1, depthwise: true };
        assert_eq!(float_layer(&a, &id).unwrap(), a);

        let weights: Vec<f64> = (0..9 * 2 * 3).map(|i| (i % 7) as f64 - 3.0).collect();
        let op = FloatOp::Conv { weights, bias: vec![0.0; 3], kernel: 3, out_channels: 3, stride: 2, depthwise: false };
        let sum = float_layer(&a, &FloatOp::Add(b.clone())).unwrap();
        let lhs = float_layer(&sum, &op).unwrap();
        let rhs = float_layer(&float_layer(&a, &op).unwrap(), &FloatOp::Add(float_layer(&b, &op).unwrap())).unwrap();
        for (x, y) in lhs.data.iter().zip(&rhs.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
