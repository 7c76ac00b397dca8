//! Pointwise (1×1) convolution in the two loop orders.
//!
//! PRO buffers a whole pixel and runs `fpass` outer, `apass` inner: one
//! 16×16 block per cycle, results for a filter batch as soon as its last
//! channel batch is done. EXP consumes each 16-channel activation batch
//! exactly once as it streams in, so it runs `apass` outer, `fpass` inner and
//! keeps `FPASS · 16` partial accumulators per pixel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layout::layout_weights;
use super::{check_input, check_multiple_of_16, check_prepared, layer_stats, EngineStats, LANES};
use crate::dataflow::ActivationStream;
use crate::model::{LayerDesc, LayerKind, QTensor};
use crate::quant::{RequantParams, Rounding};
use crate::Result;

/// Integer constants shared by both loop orders, with weights stored as a
/// memory image and read one word per memory per cycle.
#[derive(Debug, Clone)]
struct Pointwise {
    image: super::WeightMemoryImage,
    biases: Vec<i32>,
    weight_zero: Vec<i32>,
    requant: Vec<RequantParams>,
    apass: usize,
    fpass: usize,
    a0: i32,
    rounding: Rounding,
}

impl Pointwise {
    fn new(layer: &LayerDesc, kind: LayerKind, rounding: Rounding) -> Result<Self> {
        let f = layer.filters()?;
        check_multiple_of_16(layer, "channel", f.in_channels)?;
        check_multiple_of_16(layer, "filter", f.out_channels)?;
        if layer.input.channels != f.in_channels || layer.output.channels != f.out_channels {
            return Err(crate::Error::Shape(format!(
                "layer {}: filters {}->{} do not match dims {} -> {}",
                layer.name, f.in_channels, f.out_channels, layer.input, layer.output
            )));
        }
        check_prepared(layer, f.out_channels)?;
        Ok(Pointwise {
            image: layout_weights(kind, f)?,
            biases: f.biases.clone(),
            weight_zero: f.weight_zero_points.iter().map(|&z| z as i32).collect(),
            requant: layer.requant.clone(),
            apass: f.in_channels / LANES,
            fpass: f.out_channels / LANES,
            a0: layer.input_quant.zero_point as i32,
            rounding,
        })
    }

    /// The 16×16 weight block `WEI[fpass·16 + f][apass·16 + a]`, read as one
    /// word from each of the 16 memories, offset by the weight zero points.
    fn block(&self, kind: LayerKind, fpass: usize, apass: usize) -> [[i32; LANES]; LANES] {
        let address = fpass * self.apass + apass;
        let mut wei = [[0i32; LANES]; LANES];
        for m in 0..LANES {
            let word = self.image.read(m, address);
            for (l, &w) in word.iter().enumerate() {
                // PRO: memory = filter, lane = channel. EXP: memory = channel, lane = filter.
                let (f, a) = if kind == LayerKind::Pro { (m, l) } else { (l, m) };
                wei[f][a] = w as i32 - self.weight_zero[fpass * LANES + f];
            }
        }
        wei
    }

    fn finish(&self, fpass: usize, acc: &[i32]) -> [u8; LANES] {
        let mut out = [0u8; LANES];
        for (f, o) in out.iter_mut().enumerate() {
            *o = self.requant[fpass * LANES + f].output_u8(acc[f], self.rounding);
        }
        out
    }
}

/// Projection engine process: takes a pixel's channel batches, emits its
/// filter batches.
#[derive(Debug, Clone)]
pub struct ProStream {
    pw: Pointwise,
    pixel: Vec<u8>,
    filled: usize,
}

impl ProStream {
    pub fn new(layer: &LayerDesc, rounding: Rounding) -> Result<Self> {
        let pw = Pointwise::new(layer, LayerKind::Pro, rounding)?;
        let pixel = vec![0; pw.apass * LANES];
        Ok(ProStream { pw, pixel, filled: 0 })
    }

    pub fn apass(&self) -> usize {
        self.pw.apass
    }

    pub fn fpass(&self) -> usize {
        self.pw.fpass
    }

    /// Accepts the next channel batch; once the pixel is complete returns its
    /// `FPASS` output batches.
    pub fn push(&mut self, batch: &[u8; LANES]) -> Option<Vec<[u8; LANES]>> {
        self.pixel[self.filled * LANES..(self.filled + 1) * LANES].copy_from_slice(batch);
        self.filled += 1;
        if self.filled < self.pw.apass {
            return None;
        }
        self.filled = 0;
        let pw = &self.pw;
        let mut outputs = Vec::with_capacity(pw.fpass);
        for fpass in 0..pw.fpass {
            let mut acc = [0i32; LANES];
            acc.copy_from_slice(&pw.biases[fpass * LANES..(fpass + 1) * LANES]);
            for apass in 0..pw.apass {
                let wei = pw.block(LayerKind::Pro, fpass, apass);
                let act = &self.pixel[apass * LANES..(apass + 1) * LANES];
                for f in 0..LANES {
                    for a in 0..LANES {
                        acc[f] += (act[a] as i32 - pw.a0) * wei[f][a];
                    }
                }
                if apass == pw.apass - 1 {
                    outputs.push(pw.finish(fpass, &acc));
                }
            }
        }
        Some(outputs)
    }
}

/// Expansion engine process: consumes each channel batch once and keeps
/// partial sums for every filter batch of the current pixel.
#[derive(Debug, Clone)]
pub struct ExpStream {
    pw: Pointwise,
    acc: Vec<i32>,
    apass: usize,
}

impl ExpStream {
    pub fn new(layer: &LayerDesc, rounding: Rounding) -> Result<Self> {
        let pw = Pointwise::new(layer, LayerKind::Exp, rounding)?;
        let acc = vec![0; pw.fpass * LANES];
        let mut s = ExpStream { pw, acc, apass: 0 };
        s.reset_accumulators();
        Ok(s)
    }

    fn reset_accumulators(&mut self) {
        self.acc.copy_from_slice(&self.pw.biases);
    }

    pub fn apass(&self) -> usize {
        self.pw.apass
    }

    pub fn fpass(&self) -> usize {
        self.pw.fpass
    }

    /// `ACC[fpass][f]` of the pixel in flight, bias included.
    pub fn partial_sums(&self) -> &[i32] {
        &self.acc
    }

    /// Accumulator entries held per pixel.
    pub fn working_set(&self) -> usize {
        self.acc.len()
    }

    /// Accepts the next channel batch; after the last one of a pixel returns
    /// its `FPASS` output batches.
    pub fn push(&mut self, batch: &[u8; LANES]) -> Option<Vec<[u8; LANES]>> {
        let apass = self.apass;
        let last = apass == self.pw.apass - 1;
        let mut outputs = if last { Vec::with_capacity(self.pw.fpass) } else { Vec::new() };
        for fpass in 0..self.pw.fpass {
            let wei = self.pw.block(LayerKind::Exp, fpass, apass);
            let acc = &mut self.acc[fpass * LANES..(fpass + 1) * LANES];
            for f in 0..LANES {
                for a in 0..LANES {
                    acc[f] += (batch[a] as i32 - self.pw.a0) * wei[f][a];
                }
            }
            if last {
                outputs.push(self.pw.finish(fpass, acc));
            }
        }
        if last {
            self.apass = 0;
            self.reset_accumulators();
            Some(outputs)
        } else {
            self.apass += 1;
            None
        }
    }
}

fn collect_outputs(out: &mut QTensor, pixel: usize, batches: &[[u8; LANES]]) {
    let base = pixel * out.channels;
    for (i, b) in batches.iter().enumerate() {
        out.data[base + i * LANES..base + (i + 1) * LANES].copy_from_slice(b);
    }
}

/// Projection pointwise convolution in channels-filters-pixels order.
pub fn pro_forward(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<(QTensor, EngineStats)> {
    let mut engine = ProStream::new(layer, rounding)?;
    check_input(input, layer)?;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    let mut batch = [0u8; LANES];
    for (p, px) in input.data.chunks(input.channels).enumerate() {
        for chunk in px.chunks(LANES) {
            batch.copy_from_slice(chunk);
            if let Some(outputs) = engine.push(&batch) {
                collect_outputs(&mut out, p, &outputs);
            }
        }
    }
    Ok((out, layer_stats(layer)?))
}

/// Expansion pointwise convolution in filters-channels-pixels order, fed
/// through a single-consumption activation stream.
pub fn exp_forward(input: &QTensor, layer: &LayerDesc, rounding: Rounding) -> Result<(QTensor, EngineStats)> {
    check_input(input, layer)?;
    let mut stream = ActivationStream::new(input)?;
    let out = exp_forward_stream(&mut stream, layer, rounding)?;
    Ok((out, layer_stats(layer)?))
}

/// Drives the EXP engine from an activation stream until it is drained.
pub fn exp_forward_stream(stream: &mut ActivationStream<'_>, layer: &LayerDesc, rounding: Rounding) -> Result<QTensor> {
    let mut engine = ExpStream::new(layer, rounding)?;
    let mut out = QTensor::zeros(layer.output, layer.output_quant);
    while let Some(batch) = stream.next_batch()? {
        if let Some(outputs) = engine.push(&batch.values) {
            let pixel = batch.row * out.width + batch.col;
            collect_outputs(&mut out, pixel, &outputs);
        }
    }
    Ok(out)
}
