//! The 16-channel batch protocol, bounded queues, round planning and the
//! reference single-threaded scheduler.
//!
//! Activations travel between engines as [`ChannelBatch`]es: one pixel's
//! 16-channel slice. The stream runs pixel-major (all batches of a pixel
//! before the next pixel), which is what PRO, ADD and EXP consume. DWC works
//! on whole frames one 16-channel slice at a time, so the stream is drained
//! into a [`FrameBuffer`] before it and re-serialised after it.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::engines::LANES;
use crate::model::{Dims, QTensor, QuantParams};
use crate::{Error, Result};

mod plan;
mod scheduler;

pub use plan::{residual_fifo_capacity, schedule_rounds, EngineLoad, RoundPlan};
pub use scheduler::{
    check_image, round_sink, round_stages, run_dwc, run_entry, run_inference, run_inference_traced, AddStage,
    InferenceTrace, RoundTrace, SchedulerConfig, Stage,
};

/// One pixel's 16-channel slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelBatch {
    pub row: usize,
    pub col: usize,
    pub batch_index: usize,
    pub values: [u8; LANES],
}

/// Occupancy counters of a queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueueStats {
    pub capacity: usize,
    pub enqueued: u64,
    pub dequeued: u64,
    pub max_occupancy: usize,
}

impl QueueStats {
    pub fn balanced(&self) -> bool {
        self.enqueued == self.dequeued
    }
}

/// FIFO with a fixed capacity; pushing into a full queue is an error.
#[derive(Debug, Clone)]
pub struct BoundedQueue<T> {
    items: VecDeque<T>,
    stats: QueueStats,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("queue capacity must be positive".into()));
        }
        Ok(BoundedQueue {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            stats: QueueStats { capacity, ..QueueStats::default() },
        })
    }

    pub fn capacity(&self) -> usize {
        self.stats.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.stats.capacity
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        if self.is_full() {
            return Err(Error::Sequencing(format!("push into full queue (capacity {})", self.stats.capacity)));
        }
        self.items.push_back(item);
        self.stats.enqueued += 1;
        self.stats.max_occupancy = self.stats.max_occupancy.max(self.items.len());
        Ok(())
    }

    pub fn pop(&mut self) -> Option<T> {
        let item = self.items.pop_front()?;
        self.stats.dequeued += 1;
        Some(item)
    }

    pub fn front(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn stats(&self) -> QueueStats {
        self.stats
    }

    /// Clears the counters, keeping contents and capacity.
    pub fn reset_stats(&mut self) {
        self.stats =
            QueueStats { capacity: self.stats.capacity, max_occupancy: self.items.len(), ..QueueStats::default() };
    }
}

fn batches_per_pixel(t: &QTensor) -> Result<usize> {
    if !t.channels.is_multiple_of(LANES) {
        return Err(Error::Shape(format!("{} channels cannot be streamed in 16-channel batches", t.channels)));
    }
    Ok(t.channels / LANES)
}

/// The batch at `(row, col, b)` of a tensor.
pub fn batch_at(t: &QTensor, row: usize, col: usize, b: usize) -> ChannelBatch {
    let start = t.index(row, col, b * LANES);
    let mut values = [0u8; LANES];
    values.copy_from_slice(&t.data[start..start + LANES]);
    ChannelBatch { row, col, batch_index: b, values }
}

/// All batches of a tensor in stream order.
pub fn tensor_batches(t: &QTensor) -> Result<impl Iterator<Item = ChannelBatch> + '_> {
    let per_pixel = batches_per_pixel(t)?;
    Ok((0..t.height * t.width * per_pixel).map(move |i| {
        let b = i % per_pixel;
        let p = i / per_pixel;
        batch_at(t, p / t.width, p % t.width, b)
    }))
}

/// Read-once view of a tensor as a batch stream.
///
/// Every batch may be taken exactly once; a second read of the same batch is
/// a sequencing error. `reads` counts successful reads.
#[derive(Debug)]
pub struct ActivationStream<'a> {
    tensor: &'a QTensor,
    consumed: Vec<bool>,
    per_pixel: usize,
    cursor: usize,
    reads: u64,
}

impl<'a> ActivationStream<'a> {
    pub fn new(tensor: &'a QTensor) -> Result<Self> {
        let per_pixel = batches_per_pixel(tensor)?;
        Ok(ActivationStream {
            tensor,
            consumed: vec![false; tensor.height * tensor.width * per_pixel],
            per_pixel,
            cursor: 0,
            reads: 0,
        })
    }

    /// Takes a specific batch.
    pub fn take(&mut self, row: usize, col: usize, b: usize) -> Result<ChannelBatch> {
        if row >= self.tensor.height || col >= self.tensor.width || b >= self.per_pixel {
            return Err(Error::Shape(format!("batch ({row}, {col}, {b}) is outside the stream")));
        }
        let i = (row * self.tensor.width + col) * self.per_pixel + b;
        if self.consumed[i] {
            return Err(Error::Sequencing(format!("activation batch ({row}, {col}, {b}) was already consumed")));
        }
        self.consumed[i] = true;
        self.reads += 1;
        Ok(batch_at(self.tensor, row, col, b))
    }

    /// The next batch in stream order, or `None` when the stream is drained.
    pub fn next_batch(&mut self) -> Result<Option<ChannelBatch>> {
        if self.cursor == self.consumed.len() {
            return Ok(None);
        }
        let i = self.cursor;
        self.cursor += 1;
        let p = i / self.per_pixel;
        self.take(p / self.tensor.width, p % self.tensor.width, i % self.per_pixel).map(Some)
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn len(&self) -> usize {
        self.consumed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consumed.is_empty()
    }
}

/// Full-frame buffer at the DWC reorder boundary. Batches may arrive in any
/// order but each position exactly once.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    tensor: QTensor,
    written: Vec<bool>,
    filled: usize,
}

impl FrameBuffer {
    pub fn new(dims: Dims, quant: QuantParams) -> Result<Self> {
        if !dims.channels.is_multiple_of(LANES) || dims.is_empty() {
            return Err(Error::Shape(format!("frame {dims} is not a whole number of batches")));
        }
        let n = dims.pixels() * dims.channels / LANES;
        Ok(FrameBuffer { tensor: QTensor::zeros(dims, quant), written: vec![false; n], filled: 0 })
    }

    pub fn push(&mut self, batch: &ChannelBatch) -> Result<()> {
        let t = &self.tensor;
        let per_pixel = t.channels / LANES;
        if batch.row >= t.height || batch.col >= t.width || batch.batch_index >= per_pixel {
            return Err(Error::Shape(format!(
                "batch ({}, {}, {}) is outside frame {}",
                batch.row,
                batch.col,
                batch.batch_index,
                t.dims()
            )));
        }
        let i = (batch.row * t.width + batch.col) * per_pixel + batch.batch_index;
        if self.written[i] {
            return Err(Error::Sequencing(format!(
                "batch ({}, {}, {}) delivered twice",
                batch.row, batch.col, batch.batch_index
            )));
        }
        self.written[i] = true;
        self.filled += 1;
        let start = t.index(batch.row, batch.col, batch.batch_index * LANES);
        self.tensor.data[start..start + LANES].copy_from_slice(&batch.values);
        Ok(())
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.written.len()
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.written.len()
    }

    pub fn into_tensor(self) -> Result<QTensor> {
        if !self.is_full() {
            return Err(Error::Sequencing(format!(
                "frame buffer holds {} of {} batches",
                self.filled,
                self.written.len()
            )));
        }
        Ok(self.tensor)
    }
}

/// Splits the 32-channel C2D output into its two 16-channel streams. Batch 1
/// of a pixel is held back and emitted right after batch 0 of that pixel.
pub fn split_c2d_stream(c2d_output: &QTensor) -> Result<(Vec<ChannelBatch>, Vec<ChannelBatch>)> {
    if c2d_output.channels != 2 * LANES {
        return Err(Error::Shape(format!("C2D output has {} channels, expected 32", c2d_output.channels)));
    }
    let mut first = Vec::with_capacity(c2d_output.height * c2d_output.width);
    let mut second = Vec::with_capacity(first.capacity());
    for row in 0..c2d_output.height {
        for col in 0..c2d_output.width {
            first.push(batch_at(c2d_output, row, col, 0));
            second.push(batch_at(c2d_output, row, col, 1));
        }
    }
    Ok((first, second))
}

/// The serialised C2D stream: batch 0 then batch 1 per pixel.
pub fn serialize_c2d_stream(first: &[ChannelBatch], second: &[ChannelBatch]) -> Vec<ChannelBatch> {
    first.iter().zip(second).flat_map(|(a, b)| [*a, *b]).collect()
}
