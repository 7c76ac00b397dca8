//! Threaded stream mode: within each round, the DWC output feeder and the
//! PRO, ADD and EXP processes each run on their own thread, connected by
//! bounded blocking channels. Results match the reference scheduler for any
//! interleaving.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use semistream_core::dataflow::{
    check_image, residual_fifo_capacity, round_sink, round_stages, run_dwc, run_entry, schedule_rounds, tensor_batches,
    BoundedQueue, ChannelBatch, RoundPlan, SchedulerConfig, Stage,
};
use semistream_core::model::{PreparedModel, QTensor};
use semistream_core::{Error, Result};

fn stage_loop(
    mut stage: Stage,
    rx: Receiver<ChannelBatch>,
    tx: SyncSender<ChannelBatch>,
    mut fifo: Option<&mut BoundedQueue<ChannelBatch>>,
) -> Result<()> {
    for batch in rx {
        for out in stage.process(batch, fifo.as_deref_mut())? {
            if tx.send(out).is_err() {
                // downstream failed; its error is reported instead
                return Ok(());
            }
        }
    }
    Ok(())
}

fn run_round(
    model: &PreparedModel,
    r: &RoundPlan,
    frame: QTensor,
    config: &SchedulerConfig,
    fifo: &mut BoundedQueue<ChannelBatch>,
) -> Result<QTensor> {
    let (frame, _) = run_entry(model, r, &frame)?;
    let (dwc_out, _) = run_dwc(model, r, &frame)?;
    let stages = round_stages(model, r)?;
    let mut sink = round_sink(model, r)?;
    let capacity = config.queue_capacity_for(dwc_out.width);

    thread::scope(|s| {
        let (tx0, mut rx) = sync_channel::<ChannelBatch>(capacity);
        let batches = tensor_batches(&dwc_out)?;
        let feeder = s.spawn(move || {
            for b in batches {
                if tx0.send(b).is_err() {
                    break;
                }
            }
        });
        let mut fifo_port = Some(fifo);
        let mut workers = Vec::with_capacity(stages.len());
        for (_, stage) in stages {
            let (tx, next_rx) = sync_channel::<ChannelBatch>(capacity);
            let port = if stage.uses_fifo() { fifo_port.take() } else { None };
            let input = std::mem::replace(&mut rx, next_rx);
            workers.push(s.spawn(move || stage_loop(stage, input, tx, port)));
        }
        let mut sunk = Ok(());
        for b in rx {
            if let Err(e) = sink.push(&b) {
                sunk = Err(e);
                break;
            }
        }
        feeder.join().expect("feeder thread panicked");
        for w in workers {
            w.join().expect("engine thread panicked")?;
        }
        sunk
    })?;
    sink.into_tensor()
}

/// Inference with one thread per streaming engine.
pub fn run_inference_threaded(model: &PreparedModel, image: &QTensor, config: &SchedulerConfig) -> Result<QTensor> {
    check_image(model, image)?;
    let plan = schedule_rounds(model)?;
    let mut fifo = BoundedQueue::new(config.fifo_capacity.unwrap_or_else(|| residual_fifo_capacity(model)))?;
    let mut frame = image.clone();
    for r in &plan {
        frame = run_round(model, r, frame, config, &mut fifo)
            .map_err(|e| Error::InRound { round: r.round_index, source: Box::new(e) })?;
    }
    if !fifo.is_empty() {
        return Err(Error::Sequencing(format!("{} residual batches never replayed", fifo.len())));
    }
    Ok(frame.truncate_channels(model.graph.num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semistream_core::dataflow::run_inference_traced;
    use semistream_core::model::{build_model, prepare, random_image, Topology};
    use semistream_core::quant::Rounding;

    #[test]
    fn matches_reference_scheduler() {
        let m = prepare(&build_model(&Topology::tiny(16), 2).unwrap(), Rounding::Nearest).unwrap();
        let img = random_image(m.graph.input, 9);
        for cap in [None, Some(1), Some(5)] {
            let cfg = SchedulerConfig { queue_capacity: cap, ..Default::default() };
            let reference = run_inference_traced(&m, &img, &cfg).unwrap().logits;
            assert_eq!(run_inference_threaded(&m, &img, &cfg).unwrap(), reference);
        }
    }
}
