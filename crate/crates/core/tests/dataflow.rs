use semistream_core::dataflow::{
    residual_fifo_capacity, run_dwc, run_entry, run_inference, run_inference_traced, schedule_rounds,
    serialize_c2d_stream, split_c2d_stream, tensor_batches, FrameBuffer, SchedulerConfig,
};
use semistream_core::engines::{dwc_forward, Engine};
use semistream_core::model::{
    build_mobilenet_v2, build_model, prepare, random_image, BlockSpec, Dims, LayerKind, PreparedModel, QTensor,
    QuantParams, Topology,
};
use semistream_core::oracle::run_sequential;
use semistream_core::quant::Rounding;
use semistream_core::Error;

fn model(topology: &Topology, seed: u64) -> PreparedModel {
    prepare(&build_model(topology, seed).unwrap(), Rounding::Nearest).unwrap()
}

fn block(expansion: usize, out_channels: usize, stride: usize) -> BlockSpec {
    BlockSpec { expansion, out_channels, stride }
}

#[test]
fn twenty_pairs_match_layer_by_layer() {
    for seed in 0..20u64 {
        let m = if seed % 5 == 4 {
            prepare(&build_mobilenet_v2(0.35, 32, seed).unwrap(), Rounding::Nearest).unwrap()
        } else {
            model(&Topology::tiny(16 + 16 * (seed as usize % 2)), seed)
        };
        let image = random_image(m.graph.input, seed + 1000);
        let streamed = run_inference(&m, &image).unwrap();
        assert_eq!(streamed, run_sequential(&m, &image).unwrap(), "seed {seed}");
        assert_eq!(streamed.channels, m.graph.num_classes);
    }
}

#[test]
fn queue_capacities_do_not_change_logits() {
    let m = model(&Topology::tiny(32), 4);
    let image = random_image(m.graph.input, 4);
    let reference = run_inference(&m, &image).unwrap();
    for cap in [1, 2, 3, 17, 1000] {
        let cfg = SchedulerConfig { queue_capacity: Some(cap), ..Default::default() };
        assert_eq!(run_inference_traced(&m, &image, &cfg).unwrap().logits, reference);
    }
}

#[test]
fn traces_show_reorder_boundary_streaming_and_exactly_once() {
    let m = model(&Topology::tiny(32), 6);
    let image = random_image(m.graph.input, 6);
    let t = run_inference_traced(&m, &image, &SchedulerConfig::default()).unwrap();
    for r in &t.rounds {
        assert_eq!(r.dwc_input_at_first_output, r.dwc_frame_batches, "round {}", r.round_index);
        for (name, q) in &r.queues {
            assert!(q.balanced(), "{name}");
            if r.stream_frame_batches > q.capacity {
                assert!(q.max_occupancy < r.stream_frame_batches, "{name}");
            }
        }
    }
    let written: u64 = t.rounds.iter().map(|r| r.fifo_written).sum();
    let replayed: u64 = t.rounds.iter().map(|r| r.fifo_replayed).sum();
    assert!(written > 0);
    assert_eq!(written, replayed);
    assert!(t.fifo.balanced());
    // each residual round replays exactly what the previous round wrote
    let plan = schedule_rounds(&m).unwrap();
    for (k, r) in plan.iter().enumerate().skip(1) {
        if r.residual {
            assert_eq!(t.rounds[k].fifo_replayed, t.rounds[k - 1].fifo_written);
        }
    }
}

#[test]
fn model_without_residuals_passes_every_add_through() {
    let topo = Topology {
        resolution: 32,
        blocks: vec![block(1, 16, 1), block(6, 24, 2), block(6, 32, 2)],
        head_channels: 48,
        num_classes: 5,
    };
    let m = model(&topo, 2);
    let plan = schedule_rounds(&m).unwrap();
    assert!(plan.iter().all(|r| !r.residual && !r.feeds_shortcut));
    for r in plan.iter().filter(|r| !r.trailing) {
        assert!(!m.layer(r.add.unwrap()).residual);
    }
    let image = random_image(m.graph.input, 1);
    let t = run_inference_traced(&m, &image, &SchedulerConfig::default()).unwrap();
    assert_eq!(t.fifo.enqueued, 0);
    assert_eq!(t.logits, run_sequential(&m, &image).unwrap());
}

#[test]
fn standard_plan_has_seventeen_rounds() {
    let m = prepare(&build_mobilenet_v2(1.0, 224, 0).unwrap(), Rounding::Nearest).unwrap();
    let plan = schedule_rounds(&m).unwrap();
    assert_eq!(plan.iter().filter(|r| !r.trailing).count(), 17);
    assert_eq!(plan.len(), 18);
    assert!(plan[0].c2d.is_some());
    let last = &plan[17];
    assert!(last.trailing);
    assert_eq!(m.layer(last.dwc.unwrap()).kind, LayerKind::AvgPool);
    assert_eq!(m.layer(last.pro.unwrap()).output.channels, m.graph.num_classes.next_multiple_of(16));
    for r in &plan {
        for (e, i) in r.assignments() {
            assert_eq!(Engine::for_kind(m.layer(i).kind), e);
        }
        if let Some(d) = r.dwc {
            let l = m.layer(d);
            if l.stride == 2 {
                assert_eq!(l.output.height, l.input.height / 2);
            }
        }
    }
    // the 960 → 160 projections hold 960·160 weight bytes
    let big: Vec<_> = plan
        .iter()
        .filter(|r| r.pro.is_some_and(|p| m.layer(p).input.channels == 960 && m.layer(p).output.channels == 160))
        .collect();
    assert_eq!(big.len(), 2);
    assert!(big.iter().all(|r| r.pro_load.weight_bytes == 960 * 160));
    assert_eq!(residual_fifo_capacity(&m), 112 * 112);
}

#[test]
fn fifo_capacity_examples() {
    let one_block = Topology { resolution: 16, blocks: vec![block(1, 16, 1)], head_channels: 32, num_classes: 4 };
    assert_eq!(residual_fifo_capacity(&model(&one_block, 0)), 64);
    let mut last = 0;
    for res in [32, 64, 96, 128, 160] {
        let cap =
            residual_fifo_capacity(&prepare(&build_mobilenet_v2(0.5, res, 0).unwrap(), Rounding::Nearest).unwrap());
        assert!(cap >= last);
        last = cap;
    }
}

#[test]
fn undersized_fifo_fails_with_round_context() {
    let m = model(&Topology::tiny(32), 1);
    let image = random_image(m.graph.input, 1);
    let cfg = SchedulerConfig { fifo_capacity: Some(1), ..Default::default() };
    let err = run_inference_traced(&m, &image, &cfg).unwrap_err();
    assert!(matches!(err, Error::InRound { .. }), "{err}");
}

#[test]
fn wrong_image_names_expected_dims() {
    let m = model(&Topology::tiny(16), 1);
    let err = run_inference(&m, &random_image(Dims::new(17, 16, 3), 0)).unwrap_err();
    assert!(err.to_string().contains("16x16x3"), "{err}");
}

#[test]
fn c2d_stream_split_and_reassembly() {
    let dims = Dims::new(3, 2, 32);
    let data: Vec<u8> = (0..dims.len()).map(|i| (i % 32) as u8).collect();
    let t = QTensor::new(dims, data, QuantParams::new(0.1, 0)).unwrap();
    let (a, b) = split_c2d_stream(&t).unwrap();
    assert_eq!(a[0].values.to_vec(), (0..16).collect::<Vec<u8>>());
    assert_eq!(b[0].values.to_vec(), (16..32).collect::<Vec<u8>>());
    let serial = serialize_c2d_stream(&a, &b);
    assert_eq!(serial, tensor_batches(&t).unwrap().collect::<Vec<_>>());
    let mut frame = FrameBuffer::new(dims, t.quant()).unwrap();
    for batch in &serial {
        frame.push(batch).unwrap();
    }
    assert_eq!(frame.into_tensor().unwrap(), t);
    assert!(split_c2d_stream(&QTensor::zeros(Dims::new(1, 1, 16), t.quant())).is_err());
}

#[test]
fn dwc_over_reassembled_entry_stream_matches_dense() {
    let m = model(&Topology::tiny(32), 8);
    let plan = schedule_rounds(&m).unwrap();
    let image = random_image(m.graph.input, 8);
    let (entry, _) = run_entry(&m, &plan[0], &image).unwrap();
    let (a, b) = split_c2d_stream(&entry).unwrap();
    let mut frame = FrameBuffer::new(entry.dims(), entry.quant()).unwrap();
    for batch in serialize_c2d_stream(&a, &b) {
        frame.push(&batch).unwrap();
    }
    let rebuilt = frame.into_tensor().unwrap();
    let (streamed, _) = run_dwc(&m, &plan[0], &rebuilt).unwrap();
    let dwc = m.layer(plan[0].dwc.unwrap());
    assert_eq!(streamed, dwc_forward(&entry, dwc, m.rounding).unwrap().0);
}
