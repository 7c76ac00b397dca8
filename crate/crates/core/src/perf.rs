//! Analytic performance model: peak throughput per engine, parameter-memory
//! bandwidth, the per-round latency timeline and cross-design normalisation.
//!
//! The timeline covers engine processing and weight loading only. Loading
//! the C2D constants, streaming the image in and reading results out are not
//! on it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::dataflow::RoundPlan;
use crate::engines::{
    bias_word_bits, cycles_for, layout_weights, Engine, EngineStats, DEFAULT_ADD_OPS_PER_CYCLE, LANES, WORD_BITS,
};
use crate::model::{LayerKind, PreparedModel};
use crate::{Error, Result};

/// Default engine clock.
pub const DEFAULT_FREQUENCY_HZ: u64 = 100_000_000;

/// External weight-bus bandwidth, in gigabits per second, at which the
/// standard 224×224 model takes about 10.6 ms with rounds up to 10
/// computation limited and rounds from 13 on bandwidth limited.
pub const CALIBRATED_BANDWIDTH_GBPS: f64 = 16.0;

/// Reference point of [`normalize_performance`].
pub const REFERENCE_FREQ_MHZ: f64 = 100.0;
pub const REFERENCE_DSPS: u32 = 608;

/// Clock and external memory configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockConfig {
    pub frequency_hz: u64,
    /// Bytes per second available for weight loading; may be infinite.
    pub external_bandwidth: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig { frequency_hz: DEFAULT_FREQUENCY_HZ, external_bandwidth: gbps_to_bytes(CALIBRATED_BANDWIDTH_GBPS) }
    }
}

/// Gigabits per second to bytes per second.
pub fn gbps_to_bytes(gbps: f64) -> f64 {
    gbps * 1e9 / 8.0
}

impl ClockConfig {
    pub fn new(frequency_hz: u64, external_bandwidth: f64) -> Result<Self> {
        if frequency_hz == 0 {
            return Err(Error::Domain("clock frequency must be positive".into()));
        }
        if external_bandwidth.is_nan() || external_bandwidth <= 0.0 {
            return Err(Error::Domain(format!("external bandwidth {external_bandwidth} must be positive")));
        }
        Ok(ClockConfig { frequency_hz, external_bandwidth })
    }

    /// Cycles needed to move `bytes` over the external bus.
    pub fn load_cycles(&self, bytes: u64) -> u64 {
        if bytes == 0 || self.external_bandwidth.is_infinite() {
            return 0;
        }
        libm::ceil(bytes as f64 * self.frequency_hz as f64 / self.external_bandwidth) as u64
    }

    pub fn cycles_to_ms(&self, cycles: u64) -> f64 {
        cycles as f64 * 1e3 / self.frequency_hz as f64
    }
}

/// `count · frequency / 1e9`, from exact integers.
fn giga(count: u64, frequency_hz: u64) -> f64 {
    (count as u128 * frequency_hz as u128) as f64 / 1e9
}

/// One line of the throughput table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputRow {
    pub engine: Engine,
    pub ops_per_cycle: u64,
    pub gops: f64,
    /// Totals of the supplied statistics for this engine.
    pub cycles: u64,
    pub madds: u64,
    pub useful_madds: u64,
}

/// Peak GOp/s of every engine (one MADD = one op) plus the totals of any
/// statistics supplied. ADD uses `add_ops_per_cycle`.
pub fn throughput_report(stats: &[EngineStats], clock: &ClockConfig, add_ops_per_cycle: u64) -> Vec<ThroughputRow> {
    Engine::ALL
        .iter()
        .map(|&engine| {
            let ops_per_cycle = match engine {
                Engine::Add => add_ops_per_cycle,
                e => e.madds_per_cycle(),
            };
            let mut total = EngineStats::empty(engine);
            for s in stats.iter().filter(|s| s.engine == engine) {
                total.merge(s);
            }
            ThroughputRow {
                engine,
                ops_per_cycle,
                gops: giga(ops_per_cycle, clock.frequency_hz),
                cycles: total.cycles,
                madds: total.madds,
                useful_madds: total.useful_madds,
            }
        })
        .collect()
}

/// Throughput with the default ADD constant.
pub fn throughput_report_default(stats: &[EngineStats], clock: &ClockConfig) -> Vec<ThroughputRow> {
    throughput_report(stats, clock, DEFAULT_ADD_OPS_PER_CYCLE)
}

/// One line of the parameter-memory table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthRow {
    pub engine: Engine,
    /// Weight memories read every cycle (0 for the ADD stream).
    pub memories: usize,
    pub word_bits: usize,
    /// Width of the bias word read alongside, or of the ADD stream.
    pub side_bits: usize,
    pub bits_per_cycle: usize,
    pub gbps: f64,
    /// Deepest weight memory over the model's layers, in words.
    pub max_words: usize,
    /// Weight plus bias storage for the largest layer, in bytes.
    pub capacity_bytes: usize,
}

/// Parameter-memory bandwidth of DWC, PRO, EXP and the ADD stream: one word
/// from every memory each cycle.
pub fn bandwidth_report(model: &PreparedModel, clock: &ClockConfig) -> Result<Vec<BandwidthRow>> {
    let mut rows = Vec::new();
    for (engine, kind) in [(Engine::Dwc, LayerKind::Dwc), (Engine::Pro, LayerKind::Pro), (Engine::Exp, LayerKind::Exp)]
    {
        let mut row: Option<BandwidthRow> = None;
        for layer in model.layers().iter().filter(|l| l.kind == kind) {
            let f = layer.filters()?;
            let image = layout_weights(kind, f)?;
            let side_bits = bias_word_bits(kind);
            let bits = image.bits_per_cycle() + side_bits;
            let capacity = image.memory_count * image.depth() * LANES + (f.out_channels / LANES) * side_bits / 8;
            let r = row.get_or_insert(BandwidthRow {
                engine,
                memories: image.memory_count,
                word_bits: image.word_bits,
                side_bits,
                bits_per_cycle: bits,
                gbps: giga(bits as u64, clock.frequency_hz),
                max_words: 0,
                capacity_bytes: 0,
            });
            r.max_words = r.max_words.max(image.depth());
            r.capacity_bytes = r.capacity_bytes.max(capacity);
        }
        rows.extend(row);
    }
    let stream_bits = LANES * 8;
    rows.push(BandwidthRow {
        engine: Engine::Add,
        memories: 0,
        word_bits: WORD_BITS,
        side_bits: stream_bits,
        bits_per_cycle: stream_bits,
        gbps: giga(stream_bits as u64, clock.frequency_hz),
        max_words: 0,
        capacity_bytes: 0,
    });
    Ok(rows)
}

/// Busy cycles of every layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleModel {
    cycles: BTreeMap<usize, u64>,
}

impl CycleModel {
    pub fn from_model(model: &PreparedModel) -> Result<Self> {
        let mut cycles = BTreeMap::new();
        for (i, layer) in model.layers().iter().enumerate() {
            cycles.insert(i, cycles_for(layer)?);
        }
        Ok(CycleModel { cycles })
    }

    pub fn from_cycles(cycles: impl IntoIterator<Item = (usize, u64)>) -> Self {
        CycleModel { cycles: cycles.into_iter().collect() }
    }

    pub fn insert(&mut self, layer: usize, cycles: u64) {
        self.cycles.insert(layer, cycles);
    }

    pub fn cycles(&self, layer: usize) -> Result<u64> {
        self.cycles.get(&layer).copied().ok_or_else(|| Error::Plan(format!("no cycle count for layer {layer}")))
    }

    fn slot(&self, layer: Option<usize>) -> Result<u64> {
        layer.map_or(Ok(0), |i| self.cycles(i))
    }
}

/// Start and end cycle of an engine within the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: u64,
    pub end: u64,
}

impl Span {
    fn at(start: u64, cycles: u64) -> Self {
        Span { start, end: start + cycles }
    }

    pub fn cycles(&self) -> u64 {
        self.end - self.start
    }
}

/// What a round's second stage waits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Limiting {
    Compute,
    Bandwidth,
}

impl Limiting {
    pub fn as_str(self) -> &'static str {
        match self {
            Limiting::Compute => "compute",
            Limiting::Bandwidth => "bandwidth",
        }
    }
}

/// Timing of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEntry {
    pub round_index: usize,
    pub trailing: bool,
    pub start_cycle: u64,
    pub c2d: Option<Span>,
    pub dwc: Option<Span>,
    pub pro: Option<Span>,
    pub add: Option<Span>,
    pub exp: Option<Span>,
    pub weight_load_bytes: u64,
    pub weight_load_cycles: u64,
    pub load_end: u64,
    pub stage2_start: u64,
    pub end_cycle: u64,
    pub limiting: Limiting,
}

impl TimelineEntry {
    pub fn span(&self, engine: Engine) -> Option<Span> {
        match engine {
            Engine::C2d => self.c2d,
            Engine::Dwc => self.dwc,
            Engine::Pro => self.pro,
            Engine::Add => self.add,
            Engine::Exp => self.exp,
        }
    }

    /// Cycles from round start to round end.
    pub fn critical_path(&self) -> u64 {
        self.end_cycle - self.start_cycle
    }
}

/// Per-round timeline with one frame in flight.
///
/// In each round C2D (round 0 only) and DWC run first. The round's PRO and
/// EXP parameters stream in over the external bus from the start of the
/// round; the PRO/ADD/EXP stage starts once both DWC and the load have
/// finished and lasts as long as its slowest engine. DWC parameters are
/// small and load during the previous round's second stage, when DWC idles.
pub fn estimate_timeline(plan: &[RoundPlan], cycles: &CycleModel, clock: &ClockConfig) -> Result<Vec<TimelineEntry>> {
    let mut t = 0u64;
    let mut out = Vec::with_capacity(plan.len());
    for r in plan {
        let start = t;
        let c2d = r.c2d.map(|i| cycles.cycles(i)).transpose()?.map(|c| Span::at(start, c));
        let dwc_start = c2d.map_or(start, |s| s.end);
        let dwc = r.dwc.map(|i| cycles.cycles(i)).transpose()?.map(|c| Span::at(dwc_start, c));
        let dwc_end = dwc.map_or(dwc_start, |s| s.end);
        let weight_load_bytes = r.stage2_load_bytes();
        let weight_load_cycles = clock.load_cycles(weight_load_bytes);
        let load_end = start + weight_load_cycles;
        let stage2_start = dwc_end.max(load_end);
        let (pro, add, exp) = (cycles.slot(r.pro)?, cycles.slot(r.add)?, cycles.slot(r.exp)?);
        let end_cycle = stage2_start + pro.max(add).max(exp);
        let span = |slot: Option<usize>, c: u64| slot.map(|_| Span::at(stage2_start, c));
        out.push(TimelineEntry {
            round_index: r.round_index,
            trailing: r.trailing,
            start_cycle: start,
            c2d,
            dwc,
            pro: span(r.pro, pro),
            add: span(r.add, add),
            exp: span(r.exp, exp),
            weight_load_bytes,
            weight_load_cycles,
            load_end,
            stage2_start,
            end_cycle,
            limiting: if load_end > dwc_end { Limiting::Bandwidth } else { Limiting::Compute },
        });
        t = end_cycle;
    }
    Ok(out)
}

/// End-to-end latency in milliseconds and the matching frame rate. An empty
/// timeline takes 0 ms and reports 0 frames per second.
pub fn total_latency(timeline: &[TimelineEntry], clock: &ClockConfig) -> (f64, f64) {
    let cycles = timeline.last().map_or(0, |e| e.end_cycle);
    let ms = clock.cycles_to_ms(cycles);
    let fps = if ms > 0.0 { 1e3 / ms } else { 0.0 };
    (ms, fps)
}

/// Scales a throughput to the reference clock and DSP count, assuming
/// performance grows linearly with both.
pub fn normalize_performance_to(gops: f64, freq_mhz: f64, dsps: u32, ref_freq_mhz: f64, ref_dsps: u32) -> Result<f64> {
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if !positive(gops) || !positive(freq_mhz) || dsps == 0 || !positive(ref_freq_mhz) || ref_dsps == 0 {
        return Err(Error::Domain(format!(
            "normalisation needs positive inputs, got ({gops}, {freq_mhz}, {dsps}, {ref_freq_mhz}, {ref_dsps})"
        )));
    }
    Ok(gops * (ref_freq_mhz / freq_mhz) * (ref_dsps as f64 / dsps as f64))
}

/// [`normalize_performance_to`] at 100 MHz and 608 DSPs.
pub fn normalize_performance(gops: f64, freq_mhz: f64, dsps: u32) -> Result<f64> {
    normalize_performance_to(gops, freq_mhz, dsps, REFERENCE_FREQ_MHZ, REFERENCE_DSPS)
}
