//! Bit-exact, integer-only quantized CNN inference organised as five
//! layer-specialised compute engines (C2D, DWC, PRO, EXP, ADD) chained in a
//! semi-streaming circular dataflow, together with an analytic model of
//! throughput, parameter bandwidth and per-round latency.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, threads and the
//! command line live in the companion `semistream` crate.
//!
//! Module map:
//!
//! * [`quant`]: fixed-point multiplier conversion, requantization, clamping,
//!   batch-norm folding and bias narrowing.
//! * [`model`]: quantized tensors and filter sets, layer descriptors, the
//!   MobileNetV2 topology builder, channel padding and `prepare`.
//! * [`engines`]: the five engines, their cycle/MADD statistics and the
//!   weight-memory layouts.
//! * [`dataflow`]: bounded queues, the 16-channel batch protocol, round
//!   planning and the reference single-threaded scheduler.
//! * [`perf`]: throughput, bandwidth, timeline and normalisation reports.
//! * [`oracle`]: direct nested-loop reference evaluation and float ground truth.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataflow;
pub mod engines;
mod error;
pub mod model;
pub mod oracle;
pub mod perf;
pub mod quant;

pub use error::{Error, Result};
