use alloc::format;

use super::{check_input, layer_stats, EngineStats};
use crate::model::{LayerDesc, QTensor};
use crate::quant::{MultShift, Rounding};
use crate::{Error, Result};

/// Left shift applied to both centred operands before rescaling.
pub const ADD_PRE_SHIFT: u32 = 20;

/// Integer constants of a residual addition.
///
/// Each operand is centred, shifted left by `pre_shift` and rescaled to the
/// common scale `2 · max(s1, s2)`; the sum is rescaled to the output scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddParams {
    pub mult1: MultShift,
    pub mult2: MultShift,
    pub mult3: MultShift,
    pub in1_zero: u8,
    pub in2_zero: u8,
    pub out_zero: u8,
    pub pre_shift: u32,
}

impl AddParams {
    /// One output element.
    #[inline]
    pub fn element(&self, x1: u8, x2: u8, rounding: Rounding) -> u8 {
        let a1 = self.mult1.apply((x1 as i32 - self.in1_zero as i32) << self.pre_shift, rounding);
        let a2 = self.mult2.apply((x2 as i32 - self.in2_zero as i32) << self.pre_shift, rounding);
        let r = self.mult3.apply(a1 + a2, rounding) + self.out_zero as i32;
        r.clamp(0, 255) as u8
    }

    /// Element-wise over two equally long slices.
    pub fn add_slices(&self, x1: &[u8], x2: &[u8], out: &mut [u8], rounding: Rounding) {
        for ((o, a), b) in out.iter_mut().zip(x1).zip(x2) {
            *o = self.element(*a, *b, rounding);
        }
    }
}

/// Residual addition of the main path `input` and the `shortcut` operand.
pub fn add_forward(
    input: &QTensor,
    shortcut: &QTensor,
    layer: &LayerDesc,
    rounding: Rounding,
) -> Result<(QTensor, EngineStats)> {
    check_input(input, layer)?;
    if shortcut.dims() != input.dims() {
        return Err(Error::Shape(format!("layer {}: cannot add {} and {}", layer.name, input.dims(), shortcut.dims())));
    }
    let p =
        layer.add.as_ref().ok_or_else(|| Error::Shape(format!("layer {} has no addition constants", layer.name)))?;
    if shortcut.zero_point != p.in2_zero {
        return Err(Error::Shape(format!(
            "layer {}: shortcut zero point {} expected {}",
            layer.name, shortcut.zero_point, p.in2_zero
        )));
    }
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    p.add_slices(&input.data, &shortcut.data, &mut out.data, rounding);
    Ok((out, layer_stats(layer)?))
}

/// An ADD slot without a shortcut forwards its input unchanged.
pub fn add_passthrough(input: &QTensor, layer: &LayerDesc) -> Result<(QTensor, EngineStats)> {
    check_input(input, layer)?;
    Ok((input.clone(), layer_stats(layer)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_multiplier;

    fn params(s1: f64, s2: f64, so: f64) -> AddParams {
        let twice = 2.0 * s1.max(s2);
        let r = Rounding::Nearest;
        AddParams {
            mult1: quantize_multiplier(s1 / twice, r).unwrap(),
            mult2: quantize_multiplier(s2 / twice, r).unwrap(),
            mult3: quantize_multiplier(twice / ((1u64 << ADD_PRE_SHIFT) as f64 * so), r).unwrap(),
            in1_zero: 128,
            in2_zero: 100,
            out_zero: 90,
            pre_shift: ADD_PRE_SHIFT,
        }
    }

    #[test]
    fn zero_operands_give_output_zero_point() {
        let p = params(0.02, 0.05, 0.04);
        assert_eq!(p.element(128, 100, Rounding::Nearest), 90);
    }

    #[test]
    fn matches_real_sum_within_one_step() {
        let (s1, s2, so) = (0.02, 0.05, 0.06);
        let p = params(s1, s2, so);
        for x1 in (0..=255u8).step_by(7) {
            for x2 in (0..=255u8).step_by(11) {
                let real = s1 * (x1 as f64 - 128.0) + s2 * (x2 as f64 - 100.0);
                let q = (real / so + 90.0).round().clamp(0.0, 255.0);
                let got = p.element(x1, x2, Rounding::Nearest) as f64;
                assert!((got - q).abs() <= 1.0, "{x1} {x2}: {got} vs {q}");
            }
        }
    }

    #[test]
    fn saturates() {
        let p = params(0.1, 0.1, 0.01);
        assert_eq!(p.element(255, 255, Rounding::Nearest), 255);
        assert_eq!(p.element(0, 0, Rounding::Nearest), 0);
    }
}
