//! Seeded random single-layer instances for engine-versus-oracle checks.
//!
//! Channel counts include values that are not multiples of 16, so cases
//! also exercise padding; inputs are generated at the original width and
//! extended with the zero point.

use alloc::format;
use alloc::string::String;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{naive_add, naive_quant_layer};
use crate::engines::{
    add_forward, add_passthrough, c2d_forward, dwc_avgpool, dwc_forward, exp_forward, pro_forward, EngineStats,
};
use crate::model::{prepare_layer, random_layer, random_tensor, Dims, LayerDesc, LayerKind, QTensor};
use crate::quant::Rounding;
use crate::{Error, Result};

/// One prepared layer with its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineCase {
    pub seed: u64,
    pub rounding: Rounding,
    /// Channels before padding: (input, output).
    pub original_channels: (usize, usize),
    /// The layer as generated, before padding and preparation.
    pub raw_layer: LayerDesc,
    pub layer: LayerDesc,
    pub input: QTensor,
    /// Second ADD operand.
    pub shortcut: Option<QTensor>,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, from: &[T]) -> T {
    from[rng.gen_range(0..from.len())]
}

/// A random case for `kind`. `stride` applies to C2D and DWC.
pub fn random_case(kind: LayerKind, stride: usize, seed: u64, rounding: Rounding) -> Result<EngineCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ kind as u64);
    let (dims, out_channels) = match kind {
        LayerKind::C2d => (Dims::new(rng.gen_range(2..=12), rng.gen_range(2..=12), 3), 32),
        LayerKind::Dwc => {
            let c = pick(&mut rng, &[8, 16, 24, 32, 48]);
            (Dims::new(rng.gen_range(1..=9), rng.gen_range(1..=9), c), c)
        }
        LayerKind::AvgPool => {
            let c = pick(&mut rng, &[8, 16, 24, 32]);
            (Dims::new(rng.gen_range(1..=7), rng.gen_range(1..=7), c), c)
        }
        LayerKind::Exp | LayerKind::Pro => {
            let c = pick(&mut rng, &[8, 16, 24, 32, 48, 64]);
            let m = pick(&mut rng, &[8, 16, 24, 32, 48, 64]);
            (Dims::new(rng.gen_range(1..=6), rng.gen_range(1..=6), c), m)
        }
        LayerKind::Add => {
            let c = pick(&mut rng, &[8, 16, 24, 32]);
            (Dims::new(rng.gen_range(1..=6), rng.gen_range(1..=6), c), c)
        }
    };
    // A few draws give a multiplier outside (0, 1); take the next one.
    let mut last_err = None;
    for attempt in 0..64u64 {
        let layer_seed = rng.gen::<u64>() ^ attempt;
        let raw = random_layer(kind, dims, out_channels, stride, layer_seed)?;
        let layer = match prepare_layer(&raw, rounding) {
            Ok(l) => l,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let input = random_tensor(dims, raw.input_quant, rng.gen()).pad_channels_to(layer.input.channels);
        let shortcut =
            raw.shortcut_quant.map(|q| random_tensor(dims, q, rng.gen()).pad_channels_to(layer.input.channels));
        return Ok(EngineCase {
            seed,
            rounding,
            original_channels: (dims.channels, raw.output.channels),
            raw_layer: raw,
            layer,
            input,
            shortcut,
        });
    }
    Err(last_err.unwrap_or_else(|| Error::Domain("no valid random layer".into())))
}

impl EngineCase {
    /// Runs the engine for the layer kind.
    pub fn run_engine(&self) -> Result<(QTensor, EngineStats)> {
        let (l, x, r) = (&self.layer, &self.input, self.rounding);
        match l.kind {
            LayerKind::C2d => c2d_forward(x, l, r),
            LayerKind::Dwc => dwc_forward(x, l, r),
            LayerKind::AvgPool => dwc_avgpool(x, l, r),
            LayerKind::Pro => pro_forward(x, l, r),
            LayerKind::Exp => exp_forward(x, l, r),
            LayerKind::Add => match &self.shortcut {
                Some(s) => add_forward(x, s, l, r),
                None => add_passthrough(x, l),
            },
        }
    }

    /// Direct evaluation of the same layer.
    pub fn run_oracle(&self) -> Result<QTensor> {
        match &self.shortcut {
            Some(s) => naive_add(&self.input, s, &self.layer, self.rounding),
            None => naive_quant_layer(&self.input, &self.layer, self.rounding),
        }
    }

    /// Direct evaluation at the original channel counts, with the prepared
    /// constants of the real channels and no padding anywhere.
    pub fn unpadded_oracle(&self) -> Result<QTensor> {
        let (c_in, c_out) = self.original_channels;
        let mut l = self.raw_layer.clone();
        l.requant = self.layer.requant.iter().take(c_out).copied().collect();
        l.add = self.layer.add;
        let input = self.input.truncate_channels(c_in);
        match &self.shortcut {
            Some(s) => naive_add(&input, &s.truncate_channels(c_in), &l, self.rounding),
            None => naive_quant_layer(&input, &l, self.rounding),
        }
    }

    /// Enough to regenerate and inspect the case.
    pub fn describe(&self) -> String {
        format!(
            "{} seed={} rounding={} input={} output={} stride={} (original channels {} -> {})",
            self.layer.kind,
            self.seed,
            self.rounding.as_str(),
            self.layer.input,
            self.layer.output,
            self.layer.stride,
            self.original_channels.0,
            self.original_channels.1
        )
    }
}

/// First element where two tensors differ: `(row, col, channel, a, b)`.
pub fn first_mismatch(a: &QTensor, b: &QTensor) -> Option<(usize, usize, usize, u8, u8)> {
    if a.dims() != b.dims() {
        return Some((0, 0, 0, 0, 0));
    }
    let i = a.data.iter().zip(&b.data).position(|(x, y)| x != y)?;
    let c = i % a.channels;
    let p = i / a.channels;
    Some((p / a.width, p % a.width, c, a.data[i], b.data[i]))
}
