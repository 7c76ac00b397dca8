//! The five layer-specialised engines.
//!
//! Every engine is bit-exact against [`crate::oracle`] and reports
//! [`EngineStats`] from an initiation-interval-1 pipeline model: one inner
//! loop iteration per clock, with the per-cycle MADD counts of the hardware
//! (C2D 896, DWC 160, PRO 272, EXP 272, ADD 54).

use alloc::format;
use core::fmt;

use crate::model::{LayerDesc, LayerKind, QTensor};
use crate::{Error, Result};

mod add;
mod c2d;
mod dwc;
mod layout;
mod linebuf;
mod pointwise;

pub use add::{add_forward, add_passthrough, AddParams, ADD_PRE_SHIFT};
pub use c2d::c2d_forward;
pub use dwc::{dwc_avgpool, dwc_forward};
pub use layout::{bias_word_bits, layout_weights, Slot, WeightMemoryImage, WORD_BITS};
pub use linebuf::{LineBuffer, SamePadding};
pub use pointwise::{exp_forward, exp_forward_stream, pro_forward, ExpStream, ProStream};

/// Channels per stream batch and per engine lane group.
pub const LANES: usize = 16;

/// Default ops/cycle of the ADD engine (reported constant, not derived).
pub const DEFAULT_ADD_OPS_PER_CYCLE: u64 = 54;

/// The hardware engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Engine {
    C2d,
    Dwc,
    Pro,
    Exp,
    Add,
}

impl Engine {
    pub const ALL: [Engine; 5] = [Engine::C2d, Engine::Dwc, Engine::Pro, Engine::Exp, Engine::Add];

    /// Peak multiply-adds per clock of the fully pipelined engine.
    pub fn madds_per_cycle(self) -> u64 {
        match self {
            // 3x3x3 taps + 1 scaling, for 32 filters
            Engine::C2d => 28 * 32,
            // 3x3 taps + 1 scaling, for 16 channels
            Engine::Dwc => 10 * 16,
            // 16x16 block + 16 amortised scalings
            Engine::Pro | Engine::Exp => 16 * 16 + 16,
            Engine::Add => DEFAULT_ADD_OPS_PER_CYCLE,
        }
    }

    /// The engine that executes a layer kind.
    pub fn for_kind(kind: LayerKind) -> Engine {
        match kind {
            LayerKind::C2d => Engine::C2d,
            LayerKind::Dwc | LayerKind::AvgPool => Engine::Dwc,
            LayerKind::Pro => Engine::Pro,
            LayerKind::Exp => Engine::Exp,
            LayerKind::Add => Engine::Add,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Engine::C2d => "C2D",
            Engine::Dwc => "DWC",
            Engine::Pro => "PRO",
            Engine::Exp => "EXP",
            Engine::Add => "ADD",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cycle and work accounting for one engine invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineStats {
    pub engine: Engine,
    pub cycles: u64,
    /// Peak-rate MADDs, `madds_per_cycle · cycles` (table accounting).
    pub madds: u64,
    /// MADDs actually required: output elements times kernel volume plus
    /// one scaling per output.
    pub useful_madds: u64,
    /// Parameter bytes the engine holds (8-bit weights plus narrowed biases).
    pub weight_bytes: u64,
    pub output_elements: u64,
    /// Signed 32-bit accumulators live per pixel.
    pub acc_working_set: u64,
}

impl EngineStats {
    pub fn empty(engine: Engine) -> Self {
        EngineStats {
            engine,
            cycles: 0,
            madds: 0,
            useful_madds: 0,
            weight_bytes: 0,
            output_elements: 0,
            acc_working_set: 0,
        }
    }

    /// Accumulates another invocation of the same engine.
    pub fn merge(&mut self, other: &EngineStats) {
        self.cycles += other.cycles;
        self.madds += other.madds;
        self.useful_madds += other.useful_madds;
        self.weight_bytes = self.weight_bytes.max(other.weight_bytes);
        self.output_elements += other.output_elements;
        self.acc_working_set = self.acc_working_set.max(other.acc_working_set);
    }
}

fn bias_bytes(kind: LayerKind, filters: usize) -> u64 {
    (kind.bias_width().bits() as u64 * filters as u64).div_ceil(8)
}

/// Analytic statistics of a prepared (padded) layer.
pub fn layer_stats(layer: &LayerDesc) -> Result<EngineStats> {
    let engine = Engine::for_kind(layer.kind);
    let inp = layer.input;
    let out = layer.output;
    let lanes = LANES as u64;
    let mut s = EngineStats::empty(engine);
    s.output_elements = out.len() as u64;
    match layer.kind {
        LayerKind::C2d => {
            let f = layer.filters()?;
            s.cycles = inp.pixels() as u64;
            s.useful_madds = s.output_elements * (f.kernel_volume() as u64 + 1);
            s.weight_bytes = f.weights.len() as u64 + bias_bytes(layer.kind, f.out_channels);
            s.acc_working_set = f.out_channels as u64;
        }
        LayerKind::Dwc => {
            let f = layer.filters()?;
            s.cycles = inp.pixels() as u64 * (inp.channels as u64).div_ceil(lanes);
            s.useful_madds = s.output_elements * (f.kernel_volume() as u64 + 1);
            s.weight_bytes = f.weights.len() as u64 + bias_bytes(layer.kind, f.out_channels);
            s.acc_working_set = lanes;
        }
        LayerKind::AvgPool => {
            s.cycles = inp.pixels() as u64 * (inp.channels as u64).div_ceil(lanes);
            s.useful_madds = inp.len() as u64 + out.len() as u64;
            s.acc_working_set = lanes;
        }
        LayerKind::Pro | LayerKind::Exp => {
            let f = layer.filters()?;
            s.cycles = out.pixels() as u64 * layer.apass as u64 * layer.fpass as u64;
            s.useful_madds = s.output_elements * (f.kernel_volume() as u64 + 1);
            s.weight_bytes = f.weights.len() as u64 + bias_bytes(layer.kind, f.out_channels);
            s.acc_working_set = if layer.kind == LayerKind::Exp { layer.fpass as u64 * lanes } else { lanes };
        }
        LayerKind::Add => {
            s.cycles = out.pixels() as u64 * (out.channels as u64).div_ceil(lanes);
            if !layer.residual {
                return Ok(s);
            }
            // three scalings per element
            s.useful_madds = s.output_elements * 3;
        }
    }
    s.madds = engine.madds_per_cycle() * s.cycles;
    Ok(s)
}

/// Cycles a prepared layer occupies its engine.
pub fn cycles_for(layer: &LayerDesc) -> Result<u64> {
    layer_stats(layer).map(|s| s.cycles)
}

pub(crate) fn check_input(input: &QTensor, layer: &LayerDesc) -> Result<()> {
    if input.dims() != layer.input {
        return Err(Error::Shape(format!("layer {} expects {} input, got {}", layer.name, layer.input, input.dims())));
    }
    if input.zero_point != layer.input_quant.zero_point {
        return Err(Error::Shape(format!(
            "layer {} expects input zero point {}, got {}",
            layer.name, layer.input_quant.zero_point, input.zero_point
        )));
    }
    Ok(())
}

pub(crate) fn check_prepared(layer: &LayerDesc, channels: usize) -> Result<()> {
    if layer.requant.len() != channels {
        return Err(Error::Shape(format!(
            "layer {} has {} requantization entries for {channels} outputs (not prepared?)",
            layer.name,
            layer.requant.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_multiple_of_16(layer: &LayerDesc, what: &str, n: usize) -> Result<()> {
    if n == 0 || !n.is_multiple_of(LANES) {
        return Err(Error::Shape(format!("layer {}: {what} count {n} is not a multiple of 16", layer.name)));
    }
    Ok(())
}
