use ogm_core::predictor::{rss_epsilon, CellKind, Mode, Predictor, PredictorConfig};
use ogm_core::synth::{generate_dataset, SceneTemplate};
use ogm_core::trainer::{loss_log_csv, train, Checkpoint, TrainConfig};
use ogm_core::{Error, GridSpec};

fn template() -> SceneTemplate {
    SceneTemplate {
        grid: GridSpec::new(16, 16, 2.0).unwrap(),
        n_frames: 6,
        max_agents: 2,
        max_speed: 2.0,
        vehicle_length: 6.0,
        vehicle_width: 2.5,
        lane_width: 4.0,
        obstacle_density: 0.5,
        speed_quantum: 4.0,
        ..SceneTemplate::default()
    }
}

fn model(cell: CellKind, mode: Mode, seed: u64) -> Predictor<f32> {
    Predictor::new(
        PredictorConfig {
            num_layers: 2,
            hidden_channels: 4,
            kernel: 3,
            patch: 2,
            cell,
            mode,
            t_in: 3,
            t_out: 3,
            ..PredictorConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn config(iterations: u64) -> TrainConfig {
    TrainConfig {
        batch: 2,
        epochs: 100,
        max_iterations: Some(iterations),
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = generate_dataset(5, &template(), 4).unwrap();
    let run = || {
        let mut m = model(CellKind::StLstm, Mode::Separate, 1);
        let r = train(&mut m, &data, &config(10), |_, _| Ok(())).unwrap();
        (
            loss_log_csv(&r.log),
            Checkpoint::from_model(&m, r.iterations, 1).to_bytes(),
        )
    };
    let (log_a, ck_a) = run();
    let (log_b, ck_b) = run();
    assert_eq!(log_a.lines().count(), 11);
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
}

#[test]
fn logged_epsilon_follows_the_schedule() {
    let data = generate_dataset(4, &template(), 5).unwrap();
    let mut m = model(CellKind::ConvLstm, Mode::Combined, 2);
    let cfg = TrainConfig {
        rss: ogm_core::predictor::RssSchedule {
            alpha_e: 3.0,
            ..Default::default()
        },
        ..config(6)
    };
    let r = train(&mut m, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(r.log[0].epsilon, 0.5);
    for rec in &r.log {
        assert_eq!(
            rec.epsilon,
            rss_epsilon(rec.iteration, 0.5, 1.0, 3.0).unwrap()
        );
        // combined mode trains on the static term alone
        assert_eq!(rec.l_semantic, 0.0);
        assert_eq!(rec.l_overall, rec.l_static);
    }
}

#[test]
fn separate_mode_weights_the_semantic_term() {
    let data = generate_dataset(4, &template(), 11).unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 8);
    let r = train(&mut m, &data, &config(3), |_, _| Ok(())).unwrap();
    for rec in &r.log {
        assert!(rec.l_semantic > 0.0);
        assert!(
            (rec.l_overall - (rec.l_static + 10.0 * rec.l_semantic)).abs()
                < 1e-5 * rec.l_overall.max(1.0)
        );
    }
}

#[test]
fn loss_decreases_on_a_tiny_problem() {
    let data = generate_dataset(4, &template(), 6).unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 3);
    let cfg = TrainConfig {
        adam: ogm_core::trainer::AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..config(40)
    };
    let r = train(&mut m, &data, &cfg, |_, _| Ok(())).unwrap();
    let first = r.log[0].l_overall;
    let last = r.log.last().unwrap().l_overall;
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_hook_fires_on_schedule() {
    let data = generate_dataset(4, &template(), 7).unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 4);
    let cfg = TrainConfig {
        checkpoint_every: Some(3),
        ..config(7)
    };
    let mut seen = Vec::new();
    train(&mut m, &data, &cfg, |_, k| {
        seen.push(k);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![3, 6]);
}

#[test]
fn non_finite_loss_aborts_with_last_finite_state() {
    let data = generate_dataset(4, &template(), 8).unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 5);
    for (name, t) in m.parameters_mut() {
        if name.ends_with("head.bias") {
            t.data_mut()[0] = f32::NAN;
        }
    }
    let before = Checkpoint::from_model(&m, 0, 0).to_bytes();
    let r = train(&mut m, &data, &config(5), |_, _| Ok(())).unwrap();
    assert!(r.aborted.as_deref().unwrap().contains("non-finite"));
    assert_eq!(r.iterations, 0);
    assert_eq!(Checkpoint::from_model(&m, 0, 0).to_bytes(), before);
}

#[test]
fn short_sequences_are_rejected() {
    let data = generate_dataset(
        2,
        &SceneTemplate {
            n_frames: 5,
            ..template()
        },
        9,
    )
    .unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 6);
    assert!(matches!(
        train(&mut m, &data, &config(1), |_, _| Ok(())),
        Err(Error::Input(_))
    ));
}

#[test]
fn checkpoint_file_roundtrip_preserves_predictions() {
    let data = generate_dataset(3, &template(), 10).unwrap();
    let mut m = model(CellKind::StLstm, Mode::Separate, 7);
    train(&mut m, &data, &config(3), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&m, 3, 7).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.iteration, 3);
    let restored = back.to_model().unwrap();
    let past = data[0].slice(0, 3).unwrap();
    assert_eq!(m.predict(&past).unwrap(), restored.predict(&past).unwrap());

    // a manifest that disagrees with its own tensors
    let text = std::fs::read(&path).unwrap();
    let edited =
        String::from_utf8_lossy(&text).replacen("model.num_layers = 2", "model.num_layers = 3", 1);
    let bytes = [
        &edited.as_bytes()[..edited.find("\n%%\n").unwrap()],
        &text[text.windows(4).position(|w| w == b"\n%%\n").unwrap()..],
    ]
    .concat();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(ck.to_model(), Err(Error::Shape { .. })));
}
