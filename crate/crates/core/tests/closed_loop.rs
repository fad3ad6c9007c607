use pqc::harness::run_batch;
use pqc::{
    compute_metrics, run_closed_loop, run_fixed_qp, ControlObjective, DisturbanceSpec,
    ExperimentConfig, FrameSchedule, Mode, PlantModel, QualityController, TraceTable,
};

fn with_plant(plant: PlantModel) -> ExperimentConfig {
    ExperimentConfig {
        plant,
        ..Default::default()
    }
}

#[test]
fn controller_never_worse_than_fixed_qp_on_standard_grid() {
    for alpha in [0.0, 0.5, 0.8] {
        for dist in [
            DisturbanceSpec::Step {
                amplitude: 1.0,
                step_frame: 100,
            },
            DisturbanceSpec::Sinusoid {
                amplitude: 1.0,
                period: 30.0,
            },
        ] {
            let cfg = with_plant(PlantModel::first_order(alpha).with_disturbance(dist));
            let c = compute_metrics(&run_closed_loop(&cfg).unwrap(), &cfg.objective).unwrap();
            let fixed = cfg.clone().with_mode(Mode::FixedQp);
            let b = compute_metrics(&run_fixed_qp(&fixed).unwrap(), &cfg.objective).unwrap();
            assert!(
                c.quality_fluc_db <= b.quality_fluc_db,
                "a={alpha} {dist:?}: {} > {}",
                c.quality_fluc_db,
                b.quality_fluc_db
            );
            if b.control_error_db >= 0.5 {
                assert!(
                    c.control_error_db <= b.control_error_db,
                    "a={alpha} {dist:?}"
                );
            }
        }
    }
}

#[test]
fn step_disturbance_is_rejected() {
    let cfg = with_plant(
        PlantModel::first_order(0.5).with_disturbance(DisturbanceSpec::Step {
            amplitude: -1.5,
            step_frame: 100,
        }),
    );
    let recs = run_closed_loop(&cfg).unwrap();
    let tail = compute_metrics(&recs[250..], &cfg.objective).unwrap();
    assert!(tail.control_error_db < 0.05, "{}", tail.control_error_db);
    // The controller answers a quality drop with a lower QP.
    assert!(recs[299].qp < recs[99].qp);
}

#[test]
fn lambda_one_gives_smallest_control_error_under_offset() {
    let configs: Vec<_> = [0.0, 0.5, 0.8, 1.0]
        .into_iter()
        .map(|lambda| ExperimentConfig {
            objective: ControlObjective::new(37.2, lambda).unwrap(),
            ..with_plant(
                PlantModel::first_order(0.5)
                    .with_disturbance(DisturbanceSpec::Constant { amplitude: 1.0 }),
            )
        })
        .collect();
    let errs: Vec<f64> = run_batch(&configs)
        .into_iter()
        .zip(&configs)
        .map(|(r, c)| {
            compute_metrics(&r.unwrap(), &c.objective)
                .unwrap()
                .control_error_db
        })
        .collect();
    for e in &errs[..3] {
        assert!(errs[3] < *e, "{errs:?}");
    }
}

#[test]
fn batch_matches_sequential_runs() {
    let configs: Vec<_> = (0..8)
        .map(|i| ExperimentConfig {
            seed: i,
            ..with_plant(PlantModel::first_order(0.3).with_disturbance(
                DisturbanceSpec::SeededNoise {
                    amplitude: 0.5,
                    seed: 0,
                },
            ))
        })
        .collect();
    let batch = run_batch(&configs);
    for (cfg, got) in configs.iter().zip(batch) {
        assert_eq!(got.unwrap(), run_closed_loop(cfg).unwrap());
    }
}

#[test]
fn intra_schedules_stay_in_qp_range() {
    for schedule in [FrameSchedule::AllIntra, FrameSchedule::IntraEvery(8)] {
        let cfg = ExperimentConfig {
            schedule,
            ..with_plant(PlantModel::first_order(0.5))
        };
        let recs = run_closed_loop(&cfg).unwrap();
        assert_eq!(recs.len(), 300);
        assert!(recs.iter().all(|r| (0..=51).contains(&r.qp)));
    }
}

fn affine_trace(frames: usize) -> TraceTable {
    let rows = (0..frames)
        .map(|f| {
            let lift = if f >= frames / 2 { 1.0 } else { 0.0 };
            (0..=51)
                .map(|qp| {
                    (
                        qp,
                        50.0 - 0.4 * qp as f64 + lift,
                        1e5 * 2f64.powf((32 - qp) as f64 / 6.0),
                    )
                })
                .collect()
        })
        .collect();
    TraceTable::from_frames(rows).unwrap()
}

#[test]
fn trace_driven_loop_tracks_target() {
    let table = affine_trace(200);
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let reread = TraceTable::read_csv(buf.as_slice()).unwrap();
    let cfg = ExperimentConfig {
        n_frames: 200,
        ..with_plant(PlantModel::trace_driven(reread))
    };
    let recs = run_closed_loop(&cfg).unwrap();
    let tail = compute_metrics(&recs[150..], &cfg.objective).unwrap();
    assert!(tail.control_error_db < 0.25, "{}", tail.control_error_db);
}

#[test]
fn trace_shorter_than_run_is_an_error() {
    let cfg = with_plant(PlantModel::trace_driven(affine_trace(10)));
    assert!(run_closed_loop(&cfg).is_err());
}

#[test]
fn controller_reset_matches_fresh_instance() {
    let cfg = ExperimentConfig::default();
    let mut plant = cfg.plant.clone();
    let mut used =
        QualityController::new(cfg.gains, cfg.objective, cfg.range, cfg.qp_offset).unwrap();
    let mut prev = None;
    for f in 0..50 {
        let d = used.next_qp(pqc::FrameKind::Inter, prev).unwrap();
        prev = Some(plant.step(d.qp, f).unwrap().psnr);
    }
    used.reset(cfg.qp_offset);
    let fresh = QualityController::new(cfg.gains, cfg.objective, cfg.range, cfg.qp_offset).unwrap();
    assert_eq!(used.state(), fresh.state());
}
