//! MobileNetV2 topology construction and deterministic parameter generation.
//!
//! Real-valued weights, biases and batch-norm statistics are drawn from a
//! seeded ChaCha stream, folded with [`fold_batch_norm`] and quantized per
//! output channel with an asymmetric min/max rule. Activation scales are
//! drawn log-uniformly from [`ACTIVATION_SCALE_RANGE`]; weight magnitudes are
//! then chosen so that each layer's outputs occupy a few dozen LSBs around
//! their zero point instead of saturating.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dims, LayerDesc, LayerKind, ModelGraph, QFilterSet, QuantParams, Shortcut};
use crate::quant::{fold_batch_norm, BatchNormParams, DEFAULT_BN_EPSILON};
use crate::{Error, Result};

/// Range activation scales are drawn from.
pub const ACTIVATION_SCALE_RANGE: (f64, f64) = (1.0 / 1024.0, 0.25);

/// Quantization of the 8-bit input image.
pub const IMAGE_QUANT: QuantParams = QuantParams::new(1.0 / 128.0, 128);

/// Output channels of the entry convolution; the C2D engine is built for 32.
pub const ENTRY_CHANNELS: usize = 32;

/// One bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    /// Expansion factor `t`; 1 means the block has no expansion layer.
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// The layer-level shape of a MobileNetV2-style network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub resolution: usize,
    pub blocks: Vec<BlockSpec>,
    pub head_channels: usize,
    pub num_classes: usize,
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = ((libm::floor((v + d / 2.0) / d) * d) as usize).max(divisor);
    if (n as f64) < 0.9 * v {
        n += divisor;
    }
    n
}

impl Topology {
    /// The standard MobileNetV2 stage table `(t, c, n, s)` scaled by
    /// `width_multiplier`, at `resolution`×`resolution` input.
    pub fn mobilenet_v2(width_multiplier: f64, resolution: usize) -> Result<Self> {
        if !width_multiplier.is_finite() || width_multiplier <= 0.0 {
            return Err(Error::Domain(format!("width multiplier {width_multiplier} must be positive")));
        }
        if resolution == 0 || !resolution.is_multiple_of(32) {
            return Err(Error::Domain(format!("resolution {resolution} must be a positive multiple of 32")));
        }
        const STAGES: [(usize, usize, usize, usize); 7] =
            [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
        let mut blocks = Vec::new();
        for (t, c, n, s) in STAGES {
            let out_channels = make_divisible(c as f64 * width_multiplier, 8);
            for i in 0..n {
                blocks.push(BlockSpec { expansion: t, out_channels, stride: if i == 0 { s } else { 1 } });
            }
        }
        let head_channels = if width_multiplier > 1.0 { make_divisible(1280.0 * width_multiplier, 8) } else { 1280 };
        Ok(Topology { resolution, blocks, head_channels, num_classes: 1001 })
    }
}

struct Generator {
    rng: ChaCha8Rng,
}

impl Generator {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        libm::exp(self.uniform(libm::log(lo), libm::log(hi)))
    }

    fn activation_quant(&mut self, zp_range: (u8, u8)) -> QuantParams {
        let (lo, hi) = ACTIVATION_SCALE_RANGE;
        let scale = self.log_uniform(lo, hi);
        let zp = self.rng.gen_range(zp_range.0..=zp_range.1);
        QuantParams::new(scale, zp)
    }

    /// Generates float parameters plus batch norm, folds them and quantizes
    /// per output channel.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        kind: LayerKind,
        input: Dims,
        in_q: QuantParams,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<LayerDesc> {
        let filter_in = if kind == LayerKind::Dwc { 1 } else { input.channels };
        let fan_in = kernel * kernel * filter_in;
        let out_q = self.activation_quant((32, 224));

        // Inputs are assumed to spread ~40 LSBs; aim outputs at ~30 LSBs.
        let gain = (30.0 * out_q.scale) / (40.0 * in_q.scale);
        let amp = libm::sqrt(3.0 / fan_in as f64) * gain;
        let per_filter = kernel * kernel * filter_in;
        let real_w: Vec<f64> = (0..per_filter * out_channels).map(|_| self.uniform(-amp, amp)).collect();
        let unit = out_q.scale;
        let real_b: Vec<f64> = (0..out_channels).map(|_| self.uniform(-5.0, 5.0) * unit).collect();
        let bn = BatchNormParams {
            gamma: (0..out_channels).map(|_| self.uniform(0.5, 1.5)).collect(),
            beta: (0..out_channels).map(|_| self.uniform(-15.0, 15.0) * unit).collect(),
            mean: (0..out_channels).map(|_| self.uniform(-5.0, 5.0) * unit).collect(),
            variance: (0..out_channels).map(|_| self.uniform(0.5, 1.5)).collect(),
            epsilon: DEFAULT_BN_EPSILON,
        };
        let (w, b) = fold_batch_norm(&real_w, &real_b, &bn)?;

        let width = kind.bias_width();
        let mut weights = Vec::with_capacity(w.len());
        let mut zero_points = Vec::with_capacity(out_channels);
        let mut scales = Vec::with_capacity(out_channels);
        let mut biases = Vec::with_capacity(out_channels);
        for (o, chunk) in w.chunks(per_filter).enumerate() {
            let lo = chunk.iter().copied().fold(0.0f64, f64::min);
            let hi = chunk.iter().copied().fold(0.0f64, f64::max);
            let span = if hi > lo { hi - lo } else { 1e-6 };
            let ws = span / 255.0;
            let zp = libm::round(-lo / ws).clamp(0.0, 255.0) as u8;
            weights.extend(chunk.iter().map(|x| (libm::round(x / ws) + zp as f64).clamp(0.0, 255.0) as u8));
            zero_points.push(zp);
            scales.push(ws);
            let qb = libm::round(b[o] / (in_q.scale * ws));
            biases.push(qb.clamp(width.min() as f64, width.max() as f64) as i32);
        }
        let filters = QFilterSet {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels: filter_in,
            out_channels,
            weights,
            weight_zero_points: zero_points,
            weight_scales: scales,
            biases,
        };
        Ok(LayerDesc::conv(name, kind, input, stride, filters, in_q, out_q))
    }
}

/// Builds a model graph for `topology` with parameters drawn from `seed`.
pub fn build_model(topology: &Topology, seed: u64) -> Result<ModelGraph> {
    if topology.resolution == 0 || topology.blocks.is_empty() || topology.num_classes == 0 {
        return Err(Error::Domain("topology needs a resolution, blocks and classes".into()));
    }
    let mut g = Generator { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut layers: Vec<LayerDesc> = Vec::new();
    let mut shortcuts = Vec::new();

    let input = Dims::new(topology.resolution, topology.resolution, 3);
    let entry = g.conv("conv0", LayerKind::C2d, input, IMAGE_QUANT, ENTRY_CHANNELS, 3, 2)?;
    let mut dims = entry.output;
    let mut quant = entry.output_quant;
    layers.push(entry);
    // Index of the layer whose output is the current block input.
    let mut block_input = 0usize;

    for (b, block) in topology.blocks.iter().enumerate() {
        let b = b + 1;
        if block.stride != 1 && block.stride != 2 {
            return Err(Error::Domain(format!("block {b} has stride {}", block.stride)));
        }
        let in_dims = dims;
        let in_q = quant;
        if block.expansion > 1 {
            let exp =
                g.conv(&format!("b{b}.exp"), LayerKind::Exp, dims, quant, dims.channels * block.expansion, 1, 1)?;
            dims = exp.output;
            quant = exp.output_quant;
            layers.push(exp);
        }
        let dwc = g.conv(&format!("b{b}.dwc"), LayerKind::Dwc, dims, quant, dims.channels, 3, block.stride)?;
        dims = dwc.output;
        quant = dwc.output_quant;
        layers.push(dwc);
        let pro = g.conv(&format!("b{b}.pro"), LayerKind::Pro, dims, quant, block.out_channels, 1, 1)?;
        dims = pro.output;
        quant = pro.output_quant;
        layers.push(pro);

        let residual = block.stride == 1 && in_dims == dims;
        let add = if residual {
            let max = quant.scale.max(in_q.scale);
            let (_, hi) = ACTIVATION_SCALE_RANGE;
            let scale = (max * g.log_uniform(1.0, 2.0)).min(hi);
            let zp = g.rng.gen_range(64..=192u8);
            shortcuts.push(Shortcut { add: layers.len(), source: block_input });
            LayerDesc::add(format!("b{b}.add"), dims, quant, Some(in_q), QuantParams::new(scale, zp))
        } else {
            LayerDesc::add(format!("b{b}.add"), dims, quant, None, quant)
        };
        quant = add.output_quant;
        block_input = layers.len();
        layers.push(add);
    }

    let head = g.conv("head", LayerKind::Exp, dims, quant, topology.head_channels, 1, 1)?;
    dims = head.output;
    quant = head.output_quant;
    layers.push(head);
    // a 1×1 map would make the pooling multiplier exactly 1
    let pool_q = if dims.pixels() == 1 { QuantParams::new(quant.scale * 2.0, quant.zero_point) } else { quant };
    let pool = LayerDesc::avgpool("pool", dims, quant, pool_q);
    dims = pool.output;
    quant = pool_q;
    layers.push(pool);
    let classifier = g.conv("classifier", LayerKind::Pro, dims, quant, topology.num_classes, 1, 1)?;
    layers.push(classifier);

    let graph = ModelGraph { input, input_quant: IMAGE_QUANT, layers, shortcuts, num_classes: topology.num_classes };
    graph.validate()?;
    Ok(graph)
}

/// Standard MobileNetV2 with seeded parameters.
pub fn build_mobilenet_v2(width_multiplier: f64, resolution: usize, seed: u64) -> Result<ModelGraph> {
    build_model(&Topology::mobilenet_v2(width_multiplier, resolution)?, seed)
}

/// A random image in the model input quantization.
pub fn random_image(dims: Dims, seed: u64) -> super::QTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e);
    let data = (0..dims.len()).map(|_| rng.gen::<u8>()).collect();
    super::QTensor {
        height: dims.height,
        width: dims.width,
        channels: dims.channels,
        data,
        zero_point: IMAGE_QUANT.zero_point,
        scale: IMAGE_QUANT.scale,
    }
}

/// A random tensor with the given quantization.
pub fn random_tensor(dims: Dims, quant: QuantParams, seed: u64) -> super::QTensor {
    super::QTensor { zero_point: quant.zero_point, scale: quant.scale, ..random_image(dims, seed) }
}

/// A single unprepared convolution-like layer with seeded parameters, in
/// the same style as the model generator: 3×3 kernels for C2D and DWC, 1×1
/// for EXP and PRO. DWC ignores `out_channels`.
pub fn random_layer(kind: LayerKind, input: Dims, out_channels: usize, stride: usize, seed: u64) -> Result<LayerDesc> {
    let mut g = Generator { rng: ChaCha8Rng::seed_from_u64(seed) };
    let in_q = g.activation_quant((32, 224));
    let name = format!("random.{}", kind.as_str().to_ascii_lowercase());
    match kind {
        LayerKind::C2d => g.conv(&name, kind, input, in_q, out_channels, 3, stride),
        LayerKind::Dwc => g.conv(&name, kind, input, in_q, input.channels, 3, stride),
        LayerKind::Exp | LayerKind::Pro => g.conv(&name, kind, input, in_q, out_channels, 1, 1),
        LayerKind::AvgPool => Ok(LayerDesc::avgpool(name, input, in_q, g.activation_quant((32, 224)))),
        LayerKind::Add => {
            let main = g.activation_quant((32, 224));
            let shortcut = g.activation_quant((32, 224));
            let scale = main.scale.max(shortcut.scale) * g.log_uniform(1.0, 2.0);
            let out = QuantParams::new(scale, g.rng.gen_range(64..=192u8));
            Ok(LayerDesc::add(name, input, main, Some(shortcut), out))
        }
    }
}

/// Small topologies used by tests and the `verify` command.
impl Topology {
    /// A few blocks at a tiny resolution, exercising expansion, stride 2,
    /// residuals and 24-channel padding.
    pub fn tiny(resolution: usize) -> Self {
        Topology {
            resolution,
            blocks: vec![
                BlockSpec { expansion: 1, out_channels: 16, stride: 1 },
                BlockSpec { expansion: 6, out_channels: 24, stride: 2 },
                BlockSpec { expansion: 6, out_channels: 24, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 32, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 32, stride: 1 },
            ],
            head_channels: 64,
            num_classes: 10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_topology_shape() {
        let g = build_mobilenet_v2(1.0, 224, 0).unwrap();
        assert_eq!(g.block_count(), 17);
        assert_eq!(g.input, Dims::new(224, 224, 3));
        assert_eq!(g.layers[0].kind, LayerKind::C2d);
        assert_eq!(g.layers[0].output, Dims::new(112, 112, 32));
        assert_eq!(g.output_dims(), Dims::new(1, 1, 1001));
        let head = g.layers.iter().find(|l| l.name == "head").unwrap();
        assert_eq!(head.output, Dims::new(7, 7, 1280));
        // residual blocks: 3, 5, 6, 8, 9, 10, 12, 13, 15, 16
        assert_eq!(g.shortcuts.len(), 10);
        assert_eq!(g.layers.iter().filter(|l| l.kind == LayerKind::Exp).count(), 17);
    }

    #[test]
    fn seeded_determinism() {
        let a = build_mobilenet_v2(1.0, 224, 0).unwrap();
        let b = build_mobilenet_v2(1.0, 224, 0).unwrap();
        assert_eq!(a, b);
        let c = build_mobilenet_v2(1.0, 224, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(build_mobilenet_v2(1.0, 100, 0), Err(Error::Domain(_))));
        assert!(matches!(build_mobilenet_v2(0.0, 224, 0), Err(Error::Domain(_))));
        assert!(matches!(build_mobilenet_v2(f64::NAN, 224, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn width_multiplier_scales_channels() {
        let t = Topology::mobilenet_v2(0.5, 96).unwrap();
        assert_eq!(t.blocks[0].out_channels, 8);
        assert_eq!(t.blocks[16].out_channels, 160);
        assert_eq!(t.head_channels, 1280);
        let t = Topology::mobilenet_v2(1.4, 224).unwrap();
        assert_eq!(t.blocks[1].out_channels, 32);
        assert_eq!(t.head_channels, 1792);
    }

    #[test]
    fn scales_in_documented_range() {
        let g = build_mobilenet_v2(1.0, 224, 3).unwrap();
        let (lo, hi) = ACTIVATION_SCALE_RANGE;
        for l in &g.layers {
            assert!(l.output_quant.scale >= lo && l.output_quant.scale <= hi, "{}", l.name);
        }
    }
}
