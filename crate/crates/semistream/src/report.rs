//! Performance report emission.
//!
//! Text output has one `key=value` record per engine or round under a
//! `[section]` line; CSV output has one table per section, each preceded by
//! a `# section` comment and a header row. Field names are the same in both.

use std::fmt::Write as _;

use semistream_core::dataflow::schedule_rounds;
use semistream_core::engines::{layer_stats, EngineStats};
use semistream_core::model::PreparedModel;
use semistream_core::perf::{
    bandwidth_report, estimate_timeline, throughput_report, total_latency, BandwidthRow, ClockConfig, CycleModel,
    ThroughputRow, TimelineEntry,
};
use semistream_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

pub const THROUGHPUT_FIELDS: &[&str] = &["engine", "ops_per_cycle", "gops", "cycles", "madds", "useful_madds"];
pub const BANDWIDTH_FIELDS: &[&str] =
    &["engine", "memories", "word_bits", "side_bits", "bits_per_cycle", "gbps", "max_words", "capacity_bytes"];
pub const TIMELINE_FIELDS: &[&str] = &[
    "round",
    "trailing",
    "start_cycle",
    "c2d_cycles",
    "dwc_cycles",
    "pro_cycles",
    "add_cycles",
    "exp_cycles",
    "weight_load_bytes",
    "weight_load_cycles",
    "load_end",
    "stage2_start",
    "end_cycle",
    "critical_path",
    "limiting",
];
pub const TOTAL_FIELDS: &[&str] = &["total_cycles", "latency_ms", "fps", "compute_rounds", "bandwidth_rounds"];

/// Decimal rendering with at least one fractional digit: `16.0`, `89.6`,
/// `6.75`.
pub fn number(x: f64) -> String {
    let s = format!("{x}");
    if x.is_finite() && !s.contains('.') && !s.contains('e') {
        format!("{x:.1}")
    } else {
        s
    }
}

/// Everything `semistream report` prints.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfReport {
    pub clock: ClockConfig,
    pub throughput: Vec<ThroughputRow>,
    pub bandwidth: Vec<BandwidthRow>,
    pub timeline: Vec<TimelineEntry>,
    pub latency_ms: f64,
    pub fps: f64,
}

impl PerfReport {
    pub fn build(model: &PreparedModel, clock: ClockConfig, add_ops_per_cycle: u64) -> Result<Self> {
        let stats = model.layers().iter().map(layer_stats).collect::<Result<Vec<EngineStats>>>()?;
        let plan = schedule_rounds(model)?;
        let timeline = estimate_timeline(&plan, &CycleModel::from_model(model)?, &clock)?;
        let (latency_ms, fps) = total_latency(&timeline, &clock);
        Ok(PerfReport {
            clock,
            throughput: throughput_report(&stats, &clock, add_ops_per_cycle),
            bandwidth: bandwidth_report(model, &clock)?,
            timeline,
            latency_ms,
            fps,
        })
    }

    fn throughput_records(&self) -> Vec<Vec<String>> {
        self.throughput
            .iter()
            .map(|r| {
                vec![
                    r.engine.to_string(),
                    r.ops_per_cycle.to_string(),
                    number(r.gops),
                    r.cycles.to_string(),
                    r.madds.to_string(),
                    r.useful_madds.to_string(),
                ]
            })
            .collect()
    }

    fn bandwidth_records(&self) -> Vec<Vec<String>> {
        self.bandwidth
            .iter()
            .map(|r| {
                vec![
                    r.engine.to_string(),
                    r.memories.to_string(),
                    r.word_bits.to_string(),
                    r.side_bits.to_string(),
                    r.bits_per_cycle.to_string(),
                    number(r.gbps),
                    r.max_words.to_string(),
                    r.capacity_bytes.to_string(),
                ]
            })
            .collect()
    }

    fn timeline_records(&self) -> Vec<Vec<String>> {
        let cycles = |s: Option<semistream_core::perf::Span>| s.map_or(0, |s| s.cycles()).to_string();
        self.timeline
            .iter()
            .map(|e| {
                vec![
                    e.round_index.to_string(),
                    e.trailing.to_string(),
                    e.start_cycle.to_string(),
                    cycles(e.c2d),
                    cycles(e.dwc),
                    cycles(e.pro),
                    cycles(e.add),
                    cycles(e.exp),
                    e.weight_load_bytes.to_string(),
                    e.weight_load_cycles.to_string(),
                    e.load_end.to_string(),
                    e.stage2_start.to_string(),
                    e.end_cycle.to_string(),
                    e.critical_path().to_string(),
                    e.limiting.as_str().to_string(),
                ]
            })
            .collect()
    }

    fn total_record(&self) -> Vec<String> {
        let count = |l| self.timeline.iter().filter(|e| e.limiting == l).count().to_string();
        vec![
            self.timeline.last().map_or(0, |e| e.end_cycle).to_string(),
            format!("{:.3}", self.latency_ms),
            format!("{:.2}", self.fps),
            count(semistream_core::perf::Limiting::Compute),
            count(semistream_core::perf::Limiting::Bandwidth),
        ]
    }

    pub fn render(&self, format: Format) -> String {
        let bandwidth = if self.clock.external_bandwidth.is_infinite() {
            "inf".to_string()
        } else {
            number(self.clock.external_bandwidth * 8.0 / 1e9)
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# frequency_mhz={} bandwidth_gbps={bandwidth}",
            number(self.clock.frequency_hz as f64 / 1e6)
        );
        let _ = writeln!(out, "# timeline excludes C2D weight preload, image input streaming and result readout");
        let sections = [
            ("throughput", THROUGHPUT_FIELDS, self.throughput_records()),
            ("bandwidth", BANDWIDTH_FIELDS, self.bandwidth_records()),
            ("timeline", TIMELINE_FIELDS, self.timeline_records()),
            ("total", TOTAL_FIELDS, vec![self.total_record()]),
        ];
        for (name, fields, records) in sections {
            match format {
                Format::Text => {
                    let _ = writeln!(out, "[{name}]");
                    for rec in records {
                        let line: Vec<String> = fields.iter().zip(&rec).map(|(k, v)| format!("{k}={v}")).collect();
                        let _ = writeln!(out, "{}", line.join(" "));
                    }
                }
                Format::Csv => {
                    let _ = writeln!(out, "# {name}");
                    let _ = writeln!(out, "{}", fields.join(","));
                    for rec in records {
                        let _ = writeln!(out, "{}", rec.join(","));
                    }
                }
            }
            out.push('\n');
        }
        if format == Format::Text {
            let _ = writeln!(out, "total: {:.3} ms, {:.2} f/s", self.latency_ms, self.fps);
        }
        out
    }
}

/// Values of `field` in the records of `section` of a text report.
pub fn text_field<'a>(report: &'a str, section: &str, field: &str) -> Vec<&'a str> {
    let header = format!("[{section}]");
    let prefix = format!("{field}=");
    report
        .lines()
        .skip_while(|l| *l != header)
        .skip(1)
        .take_while(|l| !l.is_empty())
        .filter_map(|l| l.split(' ').find_map(|kv| kv.strip_prefix(prefix.as_str())))
        .collect()
}
