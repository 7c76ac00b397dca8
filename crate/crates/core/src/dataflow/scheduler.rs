use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::plan::{residual_fifo_capacity, schedule_rounds, RoundPlan};
use super::{
    serialize_c2d_stream, split_c2d_stream, tensor_batches, BoundedQueue, ChannelBatch, FrameBuffer, QueueStats,
};
use crate::engines::{
    c2d_forward, dwc_avgpool, dwc_forward, layer_stats, AddParams, Engine, EngineStats, ExpStream, ProStream, LANES,
};
use crate::model::{LayerDesc, LayerKind, PreparedModel, QTensor};
use crate::quant::Rounding;
use crate::{Error, Result};

/// Knobs of the reference scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerConfig {
    /// Capacity of every inter-engine queue in batches; `None` means two
    /// rows of the round's stream frame.
    pub queue_capacity: Option<usize>,
    /// Residual FIFO capacity; `None` uses [`residual_fifo_capacity`].
    pub fifo_capacity: Option<usize>,
}

impl SchedulerConfig {
    pub fn queue_capacity_for(&self, stream_width: usize) -> usize {
        self.queue_capacity.unwrap_or(2 * stream_width).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct AddStage {
    name: String,
    params: Option<AddParams>,
    tee: bool,
    rounding: Rounding,
}

/// One process of the streaming PRO → ADD → EXP triplet.
#[derive(Debug, Clone)]
pub enum Stage {
    Pro { engine: ProStream, expected: usize },
    Add(AddStage),
    Exp { engine: ExpStream, expected: usize },
}

impl Stage {
    /// The process for a layer. `feeds_shortcut` makes an ADD copy its
    /// output into the residual FIFO for the next round.
    pub fn for_layer(layer: &LayerDesc, rounding: Rounding, feeds_shortcut: bool) -> Result<Self> {
        Ok(match layer.kind {
            LayerKind::Pro => Stage::Pro { engine: ProStream::new(layer, rounding)?, expected: 0 },
            LayerKind::Exp => Stage::Exp { engine: ExpStream::new(layer, rounding)?, expected: 0 },
            LayerKind::Add => {
                let params = if layer.residual {
                    Some(
                        layer
                            .add
                            .ok_or_else(|| Error::Shape(format!("layer {} has no addition constants", layer.name)))?,
                    )
                } else {
                    None
                };
                Stage::Add(AddStage { name: layer.name.clone(), params, tee: feeds_shortcut, rounding })
            }
            other => return Err(Error::Plan(format!("{other} is not a streaming stage"))),
        })
    }

    pub fn engine(&self) -> Engine {
        match self {
            Stage::Pro { .. } => Engine::Pro,
            Stage::Add(_) => Engine::Add,
            Stage::Exp { .. } => Engine::Exp,
        }
    }

    /// Whether the stage touches the residual FIFO.
    pub fn uses_fifo(&self) -> bool {
        matches!(self, Stage::Add(a) if a.params.is_some() || a.tee)
    }

    /// Consumes one batch and returns the batches it completes.
    pub fn process(
        &mut self,
        batch: ChannelBatch,
        fifo: Option<&mut BoundedQueue<ChannelBatch>>,
    ) -> Result<Vec<ChannelBatch>> {
        let pointwise = |out: Option<Vec<[u8; LANES]>>| {
            out.unwrap_or_default()
                .into_iter()
                .enumerate()
                .map(|(i, values)| ChannelBatch { row: batch.row, col: batch.col, batch_index: i, values })
                .collect()
        };
        match self {
            Stage::Pro { engine, expected } => {
                in_order(&batch, expected, engine.apass())?;
                Ok(pointwise(engine.push(&batch.values)))
            }
            Stage::Exp { engine, expected } => {
                in_order(&batch, expected, engine.apass())?;
                Ok(pointwise(engine.push(&batch.values)))
            }
            Stage::Add(a) => {
                let mut fifo = fifo;
                let mut out = batch;
                if let Some(p) = &a.params {
                    let q = fifo
                        .as_deref_mut()
                        .ok_or_else(|| Error::Sequencing(format!("ADD {} has no residual FIFO", a.name)))?;
                    let s = q
                        .pop()
                        .ok_or_else(|| Error::Sequencing(format!("residual FIFO underrun in ADD {}", a.name)))?;
                    if (s.row, s.col, s.batch_index) != (batch.row, batch.col, batch.batch_index) {
                        return Err(Error::Sequencing(format!(
                            "ADD {}: shortcut batch ({}, {}, {}) does not match ({}, {}, {})",
                            a.name, s.row, s.col, s.batch_index, batch.row, batch.col, batch.batch_index
                        )));
                    }
                    p.add_slices(&batch.values, &s.values, &mut out.values, a.rounding);
                }
                if a.tee {
                    let q = fifo.ok_or_else(|| Error::Sequencing(format!("ADD {} has no residual FIFO", a.name)))?;
                    q.push(out)?;
                }
                Ok(alloc::vec![out])
            }
        }
    }
}

fn in_order(batch: &ChannelBatch, expected: &mut usize, per_pixel: usize) -> Result<()> {
    if batch.batch_index != *expected {
        return Err(Error::Sequencing(format!(
            "batch {} of pixel ({}, {}) arrived, expected batch {}",
            batch.batch_index, batch.row, batch.col, expected
        )));
    }
    *expected = (*expected + 1) % per_pixel;
    Ok(())
}

/// What the reference scheduler observed in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round_index: usize,
    /// Batches in the DWC input buffer when DWC emitted its first batch.
    pub dwc_input_at_first_output: usize,
    /// Batches in a full DWC input frame.
    pub dwc_frame_batches: usize,
    /// Inter-engine queues in ring order, named `producer->consumer`.
    pub queues: Vec<(String, QueueStats)>,
    /// Batches in a full frame of the stream after DWC.
    pub stream_frame_batches: usize,
    pub fifo_replayed: u64,
    pub fifo_written: u64,
}

/// Result of a traced run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Output trimmed to the model's class count.
    pub logits: QTensor,
    pub rounds: Vec<RoundTrace>,
    /// Statistics per executed layer, by layer index.
    pub layer_stats: Vec<(usize, EngineStats)>,
    pub fifo: QueueStats,
}

impl InferenceTrace {
    /// Statistics merged per engine, in [`Engine::ALL`] order.
    pub fn engine_totals(&self) -> Vec<EngineStats> {
        Engine::ALL
            .iter()
            .map(|&e| {
                let mut total = EngineStats::empty(e);
                for (_, s) in self.layer_stats.iter().filter(|(_, s)| s.engine == e) {
                    total.merge(s);
                }
                total
            })
            .collect()
    }
}

/// Checks an input image against the model entry.
pub fn check_image(model: &PreparedModel, image: &QTensor) -> Result<()> {
    let g = &model.graph;
    if image.dims() != g.input {
        return Err(Error::Shape(format!("image is {}, the model expects {}", image.dims(), g.input)));
    }
    if image.zero_point != g.input_quant.zero_point {
        return Err(Error::Shape(format!(
            "image zero point {} differs from the model's {}",
            image.zero_point, g.input_quant.zero_point
        )));
    }
    Ok(())
}

/// Runs the C2D slot of round 0 and reassembles its two 16-channel streams
/// into the DWC input frame.
pub fn run_entry(
    model: &PreparedModel,
    plan: &RoundPlan,
    image: &QTensor,
) -> Result<(QTensor, Option<(usize, EngineStats)>)> {
    let Some(c2d) = plan.c2d else { return Ok((image.clone(), None)) };
    let layer = model.layer(c2d);
    let (out, stats) = c2d_forward(image, layer, model.rounding)?;
    let (first, second) = split_c2d_stream(&out)?;
    let mut frame = FrameBuffer::new(out.dims(), out.quant())?;
    for b in serialize_c2d_stream(&first, &second) {
        frame.push(&b)?;
    }
    Ok((frame.into_tensor()?, Some((c2d, stats))))
}

/// Runs the DWC slot (depthwise or average pool) on a full frame.
pub fn run_dwc(model: &PreparedModel, plan: &RoundPlan, frame: &QTensor) -> Result<(QTensor, EngineStats)> {
    let i = plan.dwc.ok_or_else(|| Error::Plan(format!("round {} has no DWC slot", plan.round_index)))?;
    let layer = model.layer(i);
    match layer.kind {
        LayerKind::AvgPool => dwc_avgpool(frame, layer, model.rounding),
        _ => dwc_forward(frame, layer, model.rounding),
    }
}

/// The streaming processes of a round, in ring order.
pub fn round_stages(model: &PreparedModel, plan: &RoundPlan) -> Result<Vec<(usize, Stage)>> {
    [plan.pro, plan.add, plan.exp]
        .into_iter()
        .flatten()
        .map(|i| {
            let feeds = plan.add == Some(i) && plan.feeds_shortcut;
            Stage::for_layer(model.layer(i), model.rounding, feeds).map(|s| (i, s))
        })
        .collect()
}

/// The buffer collecting a round's stream output: the next DWC input frame,
/// or the logits in the trailing round.
pub fn round_sink(model: &PreparedModel, plan: &RoundPlan) -> Result<FrameBuffer> {
    let last = [plan.exp, plan.add, plan.pro, plan.dwc]
        .into_iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Plan(format!("round {} is empty", plan.round_index)))?;
    let l = model.layer(last);
    FrameBuffer::new(l.output, l.output_quant)
}

fn queue_name(from: Engine, to: Option<Engine>) -> String {
    match to {
        Some(t) => format!("{from}->{t}"),
        None => format!("{from}->out"),
    }
}

/// Inference through the reference scheduler with default settings.
pub fn run_inference(model: &PreparedModel, image: &QTensor) -> Result<QTensor> {
    run_inference_traced(model, image, &SchedulerConfig::default()).map(|t| t.logits)
}

/// Inference through the single-threaded round-robin scheduler.
///
/// C2D runs once; each round then fills the DWC input frame, runs DWC on the
/// whole frame, and streams its output through PRO, ADD and EXP over bounded
/// queues, one step per process per sweep. The last stage's output is
/// buffered as the next round's DWC frame.
pub fn run_inference_traced(
    model: &PreparedModel,
    image: &QTensor,
    config: &SchedulerConfig,
) -> Result<InferenceTrace> {
    check_image(model, image)?;
    let plan = schedule_rounds(model)?;
    let mut fifo = BoundedQueue::new(config.fifo_capacity.unwrap_or_else(|| residual_fifo_capacity(model)))?;
    let mut layer_stats_log = Vec::new();
    let mut rounds = Vec::with_capacity(plan.len());
    let mut frame = image.clone();
    for r in &plan {
        let round = r.round_index;
        let (next, trace) =
            run_round(model, r, frame, config, &mut fifo, &mut layer_stats_log).map_err(|e| e.in_round(round))?;
        rounds.push(trace);
        frame = next;
    }
    if !fifo.is_empty() {
        return Err(Error::Sequencing(format!("{} residual batches never replayed", fifo.len())));
    }
    Ok(InferenceTrace {
        logits: frame.truncate_channels(model.graph.num_classes),
        rounds,
        layer_stats: layer_stats_log,
        fifo: fifo.stats(),
    })
}

fn run_round(
    model: &PreparedModel,
    r: &RoundPlan,
    frame: QTensor,
    config: &SchedulerConfig,
    fifo: &mut BoundedQueue<ChannelBatch>,
    log: &mut Vec<(usize, EngineStats)>,
) -> Result<(QTensor, RoundTrace)> {
    let (frame, entry) = run_entry(model, r, &frame)?;
    log.extend(entry);

    // Reorder boundary: the whole frame is buffered before DWC starts.
    let mut dwc_in = FrameBuffer::new(frame.dims(), frame.quant())?;
    for b in tensor_batches(&frame)? {
        dwc_in.push(&b)?;
    }
    let dwc_input_at_first_output = dwc_in.filled();
    let dwc_frame_batches = dwc_in.capacity();
    let (dwc_out, dwc_stats) = run_dwc(model, r, &dwc_in.into_tensor()?)?;
    log.push((r.dwc.expect("checked by run_dwc"), dwc_stats));

    let mut stages: Vec<(Stage, VecDeque<ChannelBatch>)> = round_stages(model, r)?
        .into_iter()
        .map(|(i, s)| {
            log.push((i, layer_stats(model.layer(i))?));
            Ok((s, VecDeque::new()))
        })
        .collect::<Result<_>>()?;
    let capacity = config.queue_capacity_for(dwc_out.width);
    let mut queues = (0..=stages.len()).map(|_| BoundedQueue::new(capacity)).collect::<Result<Vec<_>>>()?;
    let mut sink = round_sink(model, r)?;
    let mut source = tensor_batches(&dwc_out)?.peekable();
    let stream_frame_batches = dwc_out.height * dwc_out.width * dwc_out.channels / LANES;
    let fifo_before = fifo.stats();

    loop {
        let mut progressed = false;
        if let Some(b) = sink_pop(&mut queues) {
            sink.push(&b)?;
            progressed = true;
        }
        for (k, (stage, pending)) in stages.iter_mut().enumerate().rev() {
            if let Some(b) = pending.front() {
                if !queues[k + 1].is_full() {
                    queues[k + 1].push(*b)?;
                    pending.pop_front();
                    progressed = true;
                }
            } else if let Some(b) = queues[k].pop() {
                let port = if stage.uses_fifo() { Some(&mut *fifo) } else { None };
                pending.extend(stage.process(b, port)?);
                progressed = true;
            }
        }
        if source.peek().is_some() && !queues[0].is_full() {
            queues[0].push(source.next().expect("peeked"))?;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    let idle = source.peek().is_none()
        && queues.iter().all(BoundedQueue::is_empty)
        && stages.iter().all(|(_, p)| p.is_empty());
    if !idle {
        return Err(Error::Sequencing("stream stalled before the frame completed".into()));
    }

    let mut names = Vec::with_capacity(queues.len());
    let engines: Vec<Engine> = stages.iter().map(|(s, _)| s.engine()).collect();
    for k in 0..queues.len() {
        let from = if k == 0 { Engine::Dwc } else { engines[k - 1] };
        names.push((queue_name(from, engines.get(k).copied()), queues[k].stats()));
    }
    let fifo_after = fifo.stats();
    let trace = RoundTrace {
        round_index: r.round_index,
        dwc_input_at_first_output,
        dwc_frame_batches,
        queues: names,
        stream_frame_batches,
        fifo_replayed: fifo_after.dequeued - fifo_before.dequeued,
        fifo_written: fifo_after.enqueued - fifo_before.enqueued,
    };
    Ok((sink.into_tensor()?, trace))
}

fn sink_pop(queues: &mut [BoundedQueue<ChannelBatch>]) -> Option<ChannelBatch> {
    queues.last_mut().and_then(BoundedQueue::pop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, prepare, random_image, Topology};

    fn tiny(seed: u64) -> (PreparedModel, QTensor) {
        let g = build_model(&Topology::tiny(16), seed).unwrap();
        let m = prepare(&g, Rounding::Nearest).unwrap();
        let img = random_image(g.input, seed + 100);
        (m, img)
    }

    #[test]
    fn queue_capacity_does_not_change_results() {
        let (m, img) = tiny(5);
        let base = run_inference(&m, &img).unwrap();
        assert_eq!(base.channels, m.graph.num_classes);
        for cap in [1, 2, 3, 17] {
            let cfg = SchedulerConfig { queue_capacity: Some(cap), ..Default::default() };
            let t = run_inference_traced(&m, &img, &cfg).unwrap();
            assert_eq!(t.logits, base, "capacity {cap}");
            for r in &t.rounds {
                for (name, q) in &r.queues {
                    assert!(q.balanced(), "{name}");
                    assert!(q.max_occupancy <= cap);
                }
            }
        }
    }

    #[test]
    fn dwc_waits_for_full_frame_and_fifo_replays_everything() {
        let (m, img) = tiny(8);
        let t = run_inference_traced(&m, &img, &SchedulerConfig::default()).unwrap();
        for r in &t.rounds {
            assert_eq!(r.dwc_input_at_first_output, r.dwc_frame_batches);
            for (_, q) in &r.queues {
                assert!(q.max_occupancy < r.stream_frame_batches.max(2));
            }
        }
        assert!(t.fifo.balanced());
        assert!(t.fifo.enqueued > 0);
        let written: u64 = t.rounds.iter().map(|r| r.fifo_written).sum();
        assert_eq!(written, t.fifo.dequeued);
    }

    #[test]
    fn undersized_fifo_is_reported_with_round() {
        let (m, img) = tiny(1);
        let cfg = SchedulerConfig { fifo_capacity: Some(3), ..Default::default() };
        let err = run_inference_traced(&m, &img, &cfg).unwrap_err();
        assert!(matches!(err, Error::InRound { .. }), "{err}");
    }

    #[test]
    fn wrong_image_names_expected_dims() {
        let (m, _) = tiny(1);
        let img = random_image(crate::model::Dims::new(8, 8, 3), 0);
        let err = run_inference(&m, &img).unwrap_err();
        assert!(format!("{err}").contains("16x16x3"), "{err}");
    }
}
