//! Weight-memory organisation of the DWC, PRO and EXP engines.
//!
//! Each engine owns a bank of single-ported 128-bit memories (16 byte lanes).
//! The layouts are chosen so that one inner-loop cycle reads exactly one word
//! from every memory, all at the same address:
//!
//! * DWC: 9 memories, one per kernel tap; word `p` holds that tap for the 16
//!   channels of pass `p`.
//! * PRO: 16 memories, memory `f` holds filter `f` of every 16-filter batch;
//!   word `fpass · APASS + apass` holds its 16 weights for channel batch `apass`.
//! * EXP: 16 memories, memory `j` holds channels `j, j+16, j+32, …`; word
//!   `fpass · APASS + apass` holds channel `apass · 16 + j` of the 16 filters
//!   of batch `fpass`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::LANES;
use crate::model::{LayerKind, QFilterSet};
use crate::{Error, Result};

/// Width of every weight memory word.
pub const WORD_BITS: usize = 128;

/// Width of the bias memory word: 16 narrowed biases.
pub fn bias_word_bits(kind: LayerKind) -> usize {
    LANES * kind.bias_width().bits() as usize
}

/// Location of one weight byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub memory: usize,
    pub address: usize,
    pub lane: usize,
}

/// Packed contents of an engine's weight memories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMemoryImage {
    pub kind: LayerKind,
    pub memory_count: usize,
    pub word_bits: usize,
    pub words: Vec<Vec<[u8; LANES]>>,
    pub filters: usize,
    pub channels: usize,
    pub taps: usize,
    pub apass: usize,
    pub fpass: usize,
}

impl WeightMemoryImage {
    /// Where weight `(filter, channel, tap)` lives. Depthwise weights use
    /// `channel = 0` with the filter index naming the channel.
    pub fn slot_of(&self, filter: usize, channel: usize, tap: usize) -> Option<Slot> {
        if filter >= self.filters || channel >= self.channels || tap >= self.taps {
            return None;
        }
        Some(match self.kind {
            LayerKind::Dwc => Slot { memory: tap, address: filter / LANES, lane: filter % LANES },
            LayerKind::Pro => Slot {
                memory: filter % LANES,
                address: (filter / LANES) * self.apass + channel / LANES,
                lane: channel % LANES,
            },
            _ => Slot {
                memory: channel % LANES,
                address: (filter / LANES) * self.apass + channel / LANES,
                lane: filter % LANES,
            },
        })
    }

    /// The full `(filter, channel, tap) -> slot` map.
    pub fn address_map(&self) -> Vec<((usize, usize, usize), Slot)> {
        let mut map = Vec::with_capacity(self.filters * self.channels * self.taps);
        for f in 0..self.filters {
            for c in 0..self.channels {
                for t in 0..self.taps {
                    map.push(((f, c, t), self.slot_of(f, c, t).expect("in range")));
                }
            }
        }
        map
    }

    #[inline]
    pub fn read(&self, memory: usize, address: usize) -> &[u8; LANES] {
        &self.words[memory][address]
    }

    pub fn lane(&self, slot: Slot) -> u8 {
        self.words[slot.memory][slot.address][slot.lane]
    }

    /// Words per memory, which is also the number of distinct inner-loop cycles.
    pub fn depth(&self) -> usize {
        self.words.first().map_or(0, Vec::len)
    }

    /// Bits read from weight memories per cycle.
    pub fn bits_per_cycle(&self) -> usize {
        self.memory_count * self.word_bits
    }
}

/// Packs a padded filter set into the engine's memory bank.
pub fn layout_weights(kind: LayerKind, filters: &QFilterSet) -> Result<WeightMemoryImage> {
    filters.validate()?;
    let unpadded =
        |what: &str, n: usize| Error::Shape(format!("{kind} weight layout needs a multiple of 16 {what}, got {n}"));
    match kind {
        LayerKind::Dwc => {
            if filters.kernel_h != 3 || filters.kernel_w != 3 || filters.in_channels != 1 {
                return Err(Error::Shape("DWC weight layout needs 3x3 depthwise filters".into()));
            }
            if !filters.out_channels.is_multiple_of(LANES) {
                return Err(unpadded("channels", filters.out_channels));
            }
        }
        LayerKind::Pro | LayerKind::Exp => {
            if filters.kernel_h != 1 || filters.kernel_w != 1 {
                return Err(Error::Shape(format!("{kind} weight layout needs 1x1 filters")));
            }
            if !filters.in_channels.is_multiple_of(LANES) {
                return Err(unpadded("channels", filters.in_channels));
            }
            if !filters.out_channels.is_multiple_of(LANES) {
                return Err(unpadded("filters", filters.out_channels));
            }
        }
        _ => return Err(Error::Shape(format!("{kind} has no weight memory layout"))),
    }
    let taps = filters.kernel_h * filters.kernel_w;
    let (memory_count, apass, fpass, depth) = match kind {
        LayerKind::Dwc => (taps, 1, filters.out_channels / LANES, filters.out_channels / LANES),
        _ => {
            let a = filters.in_channels / LANES;
            let f = filters.out_channels / LANES;
            (LANES, a, f, a * f)
        }
    };
    let mut image = WeightMemoryImage {
        kind,
        memory_count,
        word_bits: WORD_BITS,
        words: vec![vec![[0u8; LANES]; depth]; memory_count],
        filters: filters.out_channels,
        channels: filters.in_channels,
        taps,
        apass,
        fpass,
    };
    for f in 0..image.filters {
        for c in 0..image.channels {
            for t in 0..taps {
                let slot = image.slot_of(f, c, t).expect("in range");
                image.words[slot.memory][slot.address][slot.lane] =
                    filters.weight(f, t / filters.kernel_w, t % filters.kernel_w, c);
            }
        }
    }
    Ok(image)
}
