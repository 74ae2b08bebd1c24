use beamflow::baselines::{RecurrentConfig, RecurrentModel};
use beamflow::data::{load_frames, split_sequences, WindowConfig};
use beamflow::eval::evaluate;
use beamflow::flow::{train_model, TrainConfig};
use beamflow::model::recurrent::CellKind;
use beamflow::model::{FlowModel, ModelConfig};
use beamflow::numerics::adam::AdamState;
use beamflow::numerics::rng::Rng;
use beamflow::simulator::dataset::{generate_dataset, SimConfig};

#[test]
#[ignore]
fn epoch_timing_probe() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.ds");
    let sim = SimConfig::default(); // 30 sequences x 80 frames
    let summary = generate_dataset(&sim, &Rng::new(1), &path).unwrap();
    println!("dataset: {} frames in {} sequences", summary.frames, summary.sequences);

    let loaded = load_frames(&path).unwrap();
    let wcfg = WindowConfig::variant_a();
    let split = split_sequences(&loaded.sequences, &wcfg, 0.2, &mut Rng::new(2)).unwrap();
    println!("windows: train {} test {}", split.train.len(), split.test.len());

    let mut model = FlowModel::init(ModelConfig::default(), &mut Rng::new(3)).unwrap();
    println!("fm params: {}", model.param_count());
    let mut state = AdamState::new(&model.params);
    let tcfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let hist = train_model(
        &mut model,
        &mut state,
        0,
        &split.train,
        &wcfg,
        &tcfg,
        &Rng::new(4),
        |r, _, _| {
            println!("epoch {} total {:.4} ({:.2?} elapsed)", r.epoch, r.losses.total, start.elapsed());
            Ok(())
        },
    )
    .unwrap();
    let per_epoch = start.elapsed().as_secs_f64() / hist.len() as f64;
    println!("seconds per epoch: {per_epoch:.2}");
}

#[test]
#[ignore]
fn full_learning_probe() {
    use beamflow::simulator::scene::{MotionModel, TrajectoryConfig};
    use beamflow::simulator::JitterConfig;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.ds");
    let sim = SimConfig {
        sequences: 40,
        trajectories: vec![TrajectoryConfig {
            motion: MotionModel::ConstantVelocity,
            start: [-40.0, 20.0],
            end: [40.0, 20.0],
            speed: 5.0,
            fps: 7.0,
            frames: 64,
            p_flip: 0.0,
        }],
        jitter: JitterConfig {
            speed: 0.15,
            lateral: 1.0,
            along: 34.0,
            flip_direction: true,
        },
        ..SimConfig::default()
    };
    let summary = generate_dataset(&sim, &Rng::new(1), &path).unwrap();
    println!("dataset: {} frames in {} sequences", summary.frames, summary.sequences);

    let loaded = load_frames(&path).unwrap();
    let wcfg = WindowConfig::variant_a();
    let split = split_sequences(&loaded.sequences, &wcfg, 0.2, &mut Rng::new(2)).unwrap();
    println!("windows: train {} test {}", split.train.len(), split.test.len());

    let start = std::time::Instant::now();
    let mut model = FlowModel::init(ModelConfig::default(), &mut Rng::new(3)).unwrap();
    let mut state = AdamState::new(&model.params);
    let tcfg = TrainConfig::default(); // 100 epochs, batch 32
    train_model(
        &mut model,
        &mut state,
        0,
        &split.train,
        &wcfg,
        &tcfg,
        &Rng::new(4),
        |r, _, _| {
            if r.epoch % 10 == 0 {
                println!(
                    "fm epoch {:3} fm {:.4} term {:.4} ce {:.4} total {:.4} ({:.0?})",
                    r.epoch, r.losses.fm, r.losses.term, r.losses.ce, r.losses.total,
                    start.elapsed()
                );
            }
            Ok(())
        },
    )
    .unwrap();
    println!("fm training took {:.0?}", start.elapsed());

    let report = evaluate(&model, &split.test, &wcfg, &[1, 3], "A", "probe").unwrap();
    println!("fm per-step acc1 {:?}", report.per_step[&1]);
    println!("fm per-step acc3 {:?}", report.per_step[&3]);
    println!("fm avg acc1 {:.4} acc3 {:.4}", report.averages[&1], report.averages[&3]);

    let rnn_start = std::time::Instant::now();
    let mut rnn = RecurrentModel::init(
        RecurrentConfig {
            cell: CellKind::Elman,
            ..RecurrentConfig::default()
        },
        &mut Rng::new(5),
    )
    .unwrap();
    let mut rnn_state = AdamState::new(&rnn.params);
    train_model(
        &mut rnn,
        &mut rnn_state,
        0,
        &split.train,
        &wcfg,
        &tcfg,
        &Rng::new(6),
        |_, _, _| Ok(()),
    )
    .unwrap();
    println!("rnn training took {:.0?}", rnn_start.elapsed());
    let rnn_report = evaluate(&rnn, &split.test, &wcfg, &[1, 3], "A", "probe").unwrap();
    println!("rnn per-step acc1 {:?}", rnn_report.per_step[&1]);
    println!(
        "rnn avg acc1 {:.4} acc3 {:.4}",
        rnn_report.averages[&1], rnn_report.averages[&3]
    );
}
